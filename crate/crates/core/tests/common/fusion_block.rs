use maskadapt::depth_features::with_gradient_channel;
use maskadapt::fusion::{fuse_level_traced, AttentionWeights};
use maskadapt::params::Conv;
use maskadapt::{Graph64, Tensor, Tensor64, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub struct Block {
    pub rgb: Tensor64,
    pub depth: Tensor64,
    pub w: AttentionWeights<Tensor64>,
}

pub fn random_block(h: usize, w: usize, c: usize, d: usize, rng: &mut ChaCha8Rng) -> Block {
    Block {
        rgb: rand_tensor(&[h, w, c], rng),
        depth: rand_tensor(&[h, w, c], rng),
        w: AttentionWeights {
            query: rand_tensor(&[c + 1, d], rng),
            key: rand_tensor(&[c + 1, d], rng),
            value: rand_tensor(&[c, d], rng),
            residual: Conv {
                weight: rand_tensor(&[d, c], rng),
                bias: rand_tensor(&[c], rng),
            },
        },
    }
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Wrt {
    Query,
    Key,
    Value,
    ResidualWeight,
    ResidualBias,
    Rgb,
    Depth,
}

pub const ALL_WRT: [Wrt; 7] = [
    Wrt::Query,
    Wrt::Key,
    Wrt::Value,
    Wrt::ResidualWeight,
    Wrt::ResidualBias,
    Wrt::Rgb,
    Wrt::Depth,
];

impl Block {
    pub fn get(&self, which: Wrt) -> &Tensor64 {
        match which {
            Wrt::Query => &self.w.query,
            Wrt::Key => &self.w.key,
            Wrt::Value => &self.w.value,
            Wrt::ResidualWeight => &self.w.residual.weight,
            Wrt::ResidualBias => &self.w.residual.bias,
            Wrt::Rgb => &self.rgb,
            Wrt::Depth => &self.depth,
        }
    }

    /// Depth gradient, concat, attention, residual, then cross-entropy,
    /// as a function of the single input `wrt` (bound to `x`).
    pub fn loss(&self, g: &mut Graph64, x: Var, wrt: Wrt, p: usize, labels: &[u8]) -> maskadapt::Result<Var> {
        let mut bind = |which: Wrt| {
            if which == wrt {
                x
            } else {
                g.constant(self.get(which).clone())
            }
        };
        let weights = AttentionWeights {
            query: bind(Wrt::Query),
            key: bind(Wrt::Key),
            value: bind(Wrt::Value),
            residual: Conv {
                weight: bind(Wrt::ResidualWeight),
                bias: bind(Wrt::ResidualBias),
            },
        };
        let rgb = bind(Wrt::Rgb);
        let depth = bind(Wrt::Depth);
        let fused = with_gradient_channel(g, depth)?;
        let trace = fuse_level_traced(g, rgb, fused, &weights, p)?;
        let (h, w, c) = g.value(trace.refined).hwc()?;
        let rows = g.reshape(trace.refined, &[h * w, c])?;
        g.cross_entropy(rows, labels, None)
    }
}

/// Per-position softmax-weighted sum, written from scratch.
pub fn attention_oracle(b: &Block) -> Vec<f64> {
    let [h, w, c] = [b.rgb.shape()[0], b.rgb.shape()[1], b.rgb.shape()[2]];
    let d = b.w.query.shape()[1];
    let n = h * w;
    // depth + gradient channel
    let mut dg = vec![0.0; n * (c + 1)];
    for y in 0..h {
        for x in 0..w {
            let mut mag = 0.0;
            for ch in 0..c {
                let f = |yy: usize, xx: usize| b.depth.data()[(yy * w + xx) * c + ch];
                let dx = if x + 1 < w { f(y, x + 1) - f(y, x) } else { 0.0 };
                let dy = if y + 1 < h { f(y + 1, x) - f(y, x) } else { 0.0 };
                mag += (dx * dx + dy * dy).sqrt();
                dg[(y * w + x) * (c + 1) + ch] = f(y, x);
            }
            dg[(y * w + x) * (c + 1) + c] = mag / c as f64;
        }
    }
    let proj = |src: &[f64], cin: usize, wt: &Tensor64, i: usize| -> Vec<f64> {
        (0..d)
            .map(|o| (0..cin).map(|k| src[i * cin + k] * wt.data()[k * d + o]).sum())
            .collect()
    };
    let q: Vec<Vec<f64>> = (0..n).map(|i| proj(&dg, c + 1, &b.w.query, i)).collect();
    let k: Vec<Vec<f64>> = (0..n).map(|i| proj(&dg, c + 1, &b.w.key, i)).collect();
    let v: Vec<Vec<f64>> = (0..n).map(|i| proj(b.rgb.data(), c, &b.w.value, i)).collect();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let attended: Vec<f64> = (0..d).map(|o| (0..n).map(|j| e[j] / z * v[j][o]).sum()).collect();
        for ch in 0..c {
            let r: f64 = (0..d).map(|o| attended[o] * b.w.residual.weight.data()[o * c + ch]).sum();
            out[i * c + ch] = b.rgb.data()[i * c + ch] + r + b.w.residual.bias.data()[ch];
        }
    }
    out
}

