//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! nodes in reverse insertion order, which is a topological order because an
//! op can only reference nodes that already exist.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        cols: Vec<T>,
    },
    Resize(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    DepthGradient(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u8>,
        coeffs: Vec<T>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The gradient tape. One graph per forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    multiplies: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Source index pair and interpolation weight along one resized axis
/// (align-corners-false convention).
fn axis_taps<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, T::from_f64_lossy(frac))
        })
        .collect()
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, c: usize, stride: usize, cols: &mut [T]) {
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let row = 9 * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut cols[(oy * ow + ox) * row..(oy * ow + ox + 1) * row];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    let d = &mut dst[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        d.fill(T::zero());
                    } else {
                        let s = (iy as usize * w + ix as usize) * c;
                        d.copy_from_slice(&x[s..s + c]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], h: usize, w: usize, c: usize, stride: usize, dx: &mut [T]) {
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let row = 9 * c;
    for oy in 0..oh {
        for ox in 0..ow {
            let src = &cols[(oy * ow + ox) * row..(oy * ow + ox + 1) * row];
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = &src[(ky * 3 + kx) * c..(ky * 3 + kx + 1) * c];
                    let d = (iy as usize * w + ix as usize) * c;
                    for (o, &v) in dx[d..d + c].iter_mut().zip(s) {
                        *o += v;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            multiplies: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scalar multiplications performed by matmul and convolution so far.
    pub fn multiply_count(&self) -> u64 {
        self.multiplies
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            (n, 1),
            false,
        );
        self.multiplies += (m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v < T::zero() { T::zero() } else { v }); // NaN passes through
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Row-wise softmax of an `[m, n]` tensor, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = match self.shape(x) {
            &[_, n] => n,
            s => return Err(Error::dim("softmax_rows", s, &[0, 0])),
        };
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = match self.shape(x) {
            &[m, n] => (m, n),
            s => return Err(Error::dim("transpose", s, &[0, 0])),
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// 3×3 convolution with zero padding 1 on `[h, w, cin]` input.
    ///
    /// `w` is laid out `[9 * cin, cout]` with row index `(ky * 3 + kx) * cin + ci`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::arg("conv3x3 stride must be positive"));
        }
        let (h, wd, cin) = self.value(x).hwc()?;
        let cout = match self.shape(w) {
            &[r, co] if r == 9 * cin => co,
            s => return Err(Error::dim("conv3x3 weight", s, &[9 * cin, 0])),
        };
        if self.shape(b) != [cout] {
            return Err(Error::dim("conv3x3 bias", self.shape(b), &[cout]));
        }
        let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
        let npix = oh * ow;
        let mut cols = vec![T::zero(); npix * 9 * cin];
        im2col(self.value(x).data(), h, wd, cin, stride, &mut cols);
        let mut out = vec![T::zero(); npix * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(self.value(b).data());
        }
        T::gemm(
            npix,
            9 * cin,
            cout,
            &cols,
            (9 * cin, 1),
            self.value(w).data(),
            (cout, 1),
            &mut out,
            (cout, 1),
            true,
        );
        self.multiplies += (npix * 9 * cin * cout) as u64;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        if !rg {
            cols = Vec::new();
        }
        let value = Tensor::new(vec![oh, ow, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv3x3 {
                x,
                w,
                b,
                stride,
                cols,
            },
            rg,
        ))
    }

    /// Per-pixel linear map: `[h, w, cin] × [cin, cout] + [cout]`.
    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, cin) = self.value(x).hwc()?;
        match self.shape(w) {
            &[ci, _] if ci == cin => {}
            s => return Err(Error::dim("conv1x1", &[h, wd, cin], s)),
        }
        let cout = self.shape(w)[1];
        let flat = self.reshape(x, &[h * wd, cin])?;
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        self.reshape(y, &[h, wd, cout])
    }

    /// Bilinear resampling of `[h, w, c]` with half-pixel centers (align corners off).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::arg(format!("resize target {out_h}x{out_w} must be positive")));
        }
        let (h, w, c) = self.value(x).hwc()?;
        let ty = axis_taps::<T>(h, out_h);
        let tx = axis_taps::<T>(w, out_w);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); out_h * out_w * c];
        let one = T::one();
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let w00 = (one - ly) * (one - lx);
                let w01 = (one - ly) * lx;
                let w10 = ly * (one - lx);
                let w11 = ly * lx;
                let (p00, p01) = ((y0 * w + x0) * c, (y0 * w + x1) * c);
                let (p10, p11) = ((y1 * w + x0) * c, (y1 * w + x1) * c);
                let o = (oy * out_w + ox) * c;
                for ch in 0..c {
                    out[o + ch] = w00 * src[p00 + ch]
                        + w01 * src[p01 + ch]
                        + w10 * src[p10 + ch]
                        + w11 * src[p11 + ch];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![out_h, out_w, c], out)?;
        Ok(self.push(value, Op::Resize(x), rg))
    }

    /// Channel-wise concatenation of `[h, w, c_i]` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let (h, w, _) = self.value(first).hwc()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = self.value(p).hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::dim("concat_channels", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&p, &pc) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[px * pc..(px + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(vec![h, w, total], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).channels(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    /// Forward-difference gradient magnitude averaged over channels: `[h, w, c] -> [h, w, 1]`.
    ///
    /// The last row and column use a zero difference (replicate boundary).
    pub fn depth_gradient(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if h < 2 || w < 2 {
            return Err(Error::arg(format!(
                "depth gradient needs at least 2x2 pixels, got {h}x{w}"
            )));
        }
        let f = self.value(x).data();
        let inv_c = T::one() / T::from_usize(c).unwrap();
        let mut out = vec![T::zero(); h * w];
        for y in 0..h {
            for xx in 0..w {
                let p = (y * w + xx) * c;
                let mut acc = T::zero();
                for ch in 0..c {
                    let dx = if xx + 1 < w { f[p + c + ch] - f[p + ch] } else { T::zero() };
                    let dy = if y + 1 < h { f[p + w * c + ch] - f[p + ch] } else { T::zero() };
                    acc += (dx * dx + dy * dy).sqrt();
                }
                out[y * w + xx] = acc * inv_c;
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(vec![h, w, 1], out)?;
        Ok(self.push(value, Op::DepthGradient(x), rg))
    }

    /// Mean cross-entropy between `[.., k]` logits and per-row labels.
    ///
    /// Rows labelled [`IGNORE_INDEX`] are skipped; `weights` scales each row's
    /// term while the denominator stays the count of non-ignored rows. A batch
    /// with every row ignored yields 0 and a zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], weights: Option<&[T]>) -> Result<Var> {
        let shape = self.shape(logits);
        let k = *shape.last().unwrap();
        let rows = self.value(logits).len() / k;
        if labels.len() != rows {
            return Err(Error::dim("cross_entropy labels", shape, &[labels.len()]));
        }
        if let Some(wt) = weights {
            if wt.len() != rows {
                return Err(Error::dim("cross_entropy weights", shape, &[wt.len()]));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= k) {
            return Err(Error::arg(format!(
                "label {bad} outside 0..{k} and not the ignore index {IGNORE_INDEX}"
            )));
        }
        let counted = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * k];
        let mut coeffs = vec![T::zero(); rows];
        let mut loss = T::zero();
        if counted > 0 {
            let denom = T::from_usize(counted).unwrap();
            for r in 0..rows {
                if labels[r] == IGNORE_INDEX {
                    continue;
                }
                let row = &data[r * k..(r + 1) * k];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                    *p = (v - max).exp();
                    total += *p;
                }
                for p in &mut probs[r * k..(r + 1) * k] {
                    *p /= total;
                }
                let wgt = weights.map_or(T::one(), |w| w[r]);
                let target = labels[r] as usize;
                // log-sum-exp form keeps large-margin logits finite
                let nll = total.ln() + max - row[target];
                loss += wgt * nll;
                coeffs[r] = wgt / denom;
            }
            loss /= denom;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                coeffs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Weighted sum of scalar losses.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let scaled = self.scale(v, w);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        acc.ok_or_else(|| Error::arg("weighted_sum of zero terms"))
    }

    fn accumulate<'a>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
        grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
    }

    /// Back-propagates from a scalar node. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let Self { nodes, grads, .. } = self;
        let seed = grads[loss.0].get_or_insert_with(|| vec![T::zero()]);
        seed[0] += T::one();

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    if rg(*a) {
                        let bv = nodes[b.0].value.data();
                        let ga = Self::accumulate(grads, nodes, *a);
                        T::gemm(m, n, k, &g, (n, 1), bv, (1, n), ga, (k, 1), true);
                    }
                    if rg(*b) {
                        let av = nodes[a.0].value.data();
                        let gb = Self::accumulate(grads, nodes, *b);
                        T::gemm(k, m, n, av, (1, k), &g, (n, 1), gb, (n, 1), true);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if rg(v) {
                            let gv = Self::accumulate(grads, nodes, v);
                            gv.iter_mut().zip(&g).for_each(|(o, &d)| *o += d);
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    if rg(*x) {
                        let gx = Self::accumulate(grads, nodes, *x);
                        gx.iter_mut().zip(&g).for_each(|(o, &d)| *o += d);
                    }
                    if rg(*bias) {
                        let n = nodes[bias.0].value.len();
                        let gb = Self::accumulate(grads, nodes, *bias);
                        for row in g.chunks_exact(n) {
                            gb.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if rg(*x) {
                        let gx = Self::accumulate(grads, nodes, *x);
                        gx.iter_mut().zip(&g).for_each(|(o, &d)| *o += d * *s);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let bv = nodes[b.0].value.data();
                        let ga = Self::accumulate(grads, nodes, *a);
                        for ((o, &d), &y) in ga.iter_mut().zip(&g).zip(bv) {
                            *o += d * y;
                        }
                    }
                    if rg(*b) {
                        let av = nodes[a.0].value.data();
                        let gb = Self::accumulate(grads, nodes, *b);
                        for ((o, &d), &x) in gb.iter_mut().zip(&g).zip(av) {
                            *o += d * x;
                        }
                    }
                }
                Op::Relu(x) => {
                    let out = node.value.data();
                    let gx = Self::accumulate(grads, nodes, *x);
                    for ((o, &d), &y) in gx.iter_mut().zip(&g).zip(out) {
                        if y > T::zero() {
                            *o += d;
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let n = node.value.shape()[1];
                    let out = node.value.data();
                    let gx = Self::accumulate(grads, nodes, *x);
                    for ((go, gi), yo) in gx
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.chunks_exact(n))
                    {
                        let dot: T = gi.iter().zip(yo).map(|(&d, &y)| d * y).sum();
                        for ((o, &d), &y) in go.iter_mut().zip(gi).zip(yo) {
                            *o += y * (d - dot);
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (m, n) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    let gx = Self::accumulate(grads, nodes, *x);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::Reshape(x) => {
                    let gx = Self::accumulate(grads, nodes, *x);
                    gx.iter_mut().zip(&g).for_each(|(o, &d)| *o += d);
                }
                Op::Conv3x3 {
                    x,
                    w,
                    b,
                    stride,
                    cols,
                } => {
                    let (h, wd, cin) = nodes[x.0].value.hwc().unwrap();
                    let cout = nodes[b.0].value.len();
                    let npix = node.value.len() / cout;
                    if rg(*b) {
                        let gb = Self::accumulate(grads, nodes, *b);
                        for row in g.chunks_exact(cout) {
                            gb.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                        }
                    }
                    if rg(*w) {
                        let gw = Self::accumulate(grads, nodes, *w);
                        T::gemm(
                            9 * cin,
                            npix,
                            cout,
                            cols,
                            (1, 9 * cin),
                            &g,
                            (cout, 1),
                            gw,
                            (cout, 1),
                            true,
                        );
                    }
                    if rg(*x) {
                        let wv = nodes[w.0].value.data();
                        let mut dcols = vec![T::zero(); npix * 9 * cin];
                        T::gemm(
                            npix,
                            cout,
                            9 * cin,
                            &g,
                            (cout, 1),
                            wv,
                            (1, cout),
                            &mut dcols,
                            (9 * cin, 1),
                            false,
                        );
                        let gx = Self::accumulate(grads, nodes, *x);
                        col2im_add(&dcols, h, wd, cin, *stride, gx);
                    }
                }
                Op::Resize(x) => {
                    let (h, w, c) = nodes[x.0].value.hwc().unwrap();
                    let (oh, ow, _) = node.value.hwc().unwrap();
                    let ty = axis_taps::<T>(h, oh);
                    let tx = axis_taps::<T>(w, ow);
                    let gx = Self::accumulate(grads, nodes, *x);
                    let one = T::one();
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let o = (oy * ow + ox) * c;
                            let taps = [
                                ((y0 * w + x0) * c, (one - ly) * (one - lx)),
                                ((y0 * w + x1) * c, (one - ly) * lx),
                                ((y1 * w + x0) * c, ly * (one - lx)),
                                ((y1 * w + x1) * c, ly * lx),
                            ];
                            for (p, wt) in taps {
                                for ch in 0..c {
                                    gx[p + ch] += wt * g[o + ch];
                                }
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let total = *node.value.shape().last().unwrap();
                    let mut offset = 0;
                    for &p in parts {
                        let pc = *nodes[p.0].value.shape().last().unwrap();
                        if rg(p) {
                            let gp = Self::accumulate(grads, nodes, p);
                            for (px, dst) in gp.chunks_exact_mut(pc).enumerate() {
                                let src = &g[px * total + offset..px * total + offset + pc];
                                dst.iter_mut().zip(src).for_each(|(o, &d)| *o += d);
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Slice { x, start } => {
                    let c = *nodes[x.0].value.shape().last().unwrap();
                    let n = *node.value.shape().last().unwrap();
                    let gx = Self::accumulate(grads, nodes, *x);
                    for (px, src) in g.chunks_exact(n).enumerate() {
                        let dst = &mut gx[px * c + start..px * c + start + n];
                        dst.iter_mut().zip(src).for_each(|(o, &d)| *o += d);
                    }
                }
                Op::DepthGradient(x) => {
                    let (h, w, c) = nodes[x.0].value.hwc().unwrap();
                    let f = nodes[x.0].value.data();
                    let inv_c = T::one() / T::from_usize(c).unwrap();
                    let gx = Self::accumulate(grads, nodes, *x);
                    for y in 0..h {
                        for xx in 0..w {
                            let p = (y * w + xx) * c;
                            let up = g[y * w + xx] * inv_c;
                            for ch in 0..c {
                                let dx = if xx + 1 < w { f[p + c + ch] - f[p + ch] } else { T::zero() };
                                let dy = if y + 1 < h { f[p + w * c + ch] - f[p + ch] } else { T::zero() };
                                let mag = (dx * dx + dy * dy).sqrt();
                                // subgradient 0 where the magnitude vanishes
                                if mag == T::zero() {
                                    continue;
                                }
                                let (ex, ey) = (up * dx / mag, up * dy / mag);
                                if xx + 1 < w {
                                    gx[p + c + ch] += ex;
                                    gx[p + ch] -= ex;
                                }
                                if y + 1 < h {
                                    gx[p + w * c + ch] += ey;
                                    gx[p + ch] -= ey;
                                }
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    labels,
                    coeffs,
                } => {
                    let k = *nodes[logits.0].value.shape().last().unwrap();
                    let up = g[0];
                    let gl = Self::accumulate(grads, nodes, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        if label == IGNORE_INDEX || coeffs[r] == T::zero() {
                            continue;
                        }
                        let s = up * coeffs[r];
                        for j in 0..k {
                            let onehot = if j == label as usize { T::one() } else { T::zero() };
                            gl[r * k + j] += s * (probs[r * k + j] - onehot);
                        }
                    }
                }
                Op::Sum(x) => {
                    let gx = Self::accumulate(grads, nodes, *x);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
        }
        Ok(())
    }

    /// Clears every accumulated gradient.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}
