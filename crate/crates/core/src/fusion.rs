//! Depth-gradient-guided cross-attention.
//!
//! Per pyramid level: queries and keys come from the pooled depth features
//! with their gradient channel, values from the pooled RGB features. The
//! attended values are upsampled back and added to the RGB features through
//! a 1×1 convolution:
//!
//! ```text
//! Q = pool(F_dg) W_q      K = pool(F_dg) W_k      V = pool(F_rgb) W_v
//! F_refined = F_rgb + conv1x1(upsample(softmax(Q Kᵀ / √d_k) V))
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth_features::{with_gradient_channel, with_zero_channel, FusedDepthFeatures};
use crate::encoders::{conv1x1_init, FeaturePyramid, LEVELS};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{join, Conv, ParamTree};

/// Projections of one level. `query`/`key` are `(C+1) × d_k`, `value` is
/// `C × d_v`, and the residual conv maps `d_v → C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights<P> {
    pub query: P,
    pub key: P,
    pub value: P,
    pub residual: Conv<P>,
}

impl<P> AttentionWeights<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> AttentionWeights<Q> {
        AttentionWeights {
            query: f(&join(prefix, "query"), &self.query),
            key: f(&join(prefix, "key"), &self.key),
            value: f(&join(prefix, "value"), &self.value),
            residual: self.residual.map(&join(prefix, "residual"), f),
        }
    }
}

impl<P> ParamTree<P> for AttentionWeights<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "query"), &self.query);
        f(join(prefix, "key"), &self.key);
        f(join(prefix, "value"), &self.value);
        self.residual.visit(&join(prefix, "residual"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "query"), &mut self.query);
        f(join(prefix, "key"), &mut self.key);
        f(join(prefix, "value"), &mut self.value);
        self.residual.visit_mut(&join(prefix, "residual"), f);
    }
}

/// Random projections with a zero residual conv, so the block starts as the
/// identity on the RGB features.
pub fn init_attention<T: Scalar>(seed: u64, channels: usize, head_dim: usize) -> Result<AttentionWeights<Tensor<T>>> {
    if head_dim == 0 || channels == 0 {
        return Err(Error::Config("attention dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = conv1x1_init::<T>(&mut rng, channels + 1, head_dim, 1.0);
    let k = conv1x1_init::<T>(&mut rng, channels + 1, head_dim, 1.0);
    let v = conv1x1_init::<T>(&mut rng, channels, head_dim, 1.0);
    Ok(AttentionWeights {
        query: q.weight,
        key: k.weight,
        value: v.weight,
        residual: Conv {
            weight: Tensor::zeros(&[head_dim, channels]),
            bias: Tensor::zeros(&[channels]),
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Spatial pooling factor per level, for training and for inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingConfig {
    pub train: [usize; LEVELS],
    pub infer: [usize; LEVELS],
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            train: [8, 4, 2, 1],
            infer: [4, 2, 1, 1],
        }
    }
}

impl PoolingConfig {
    pub fn factors(&self, mode: Mode) -> [usize; LEVELS] {
        match mode {
            Mode::Train => self.train,
            Mode::Infer => self.infer,
        }
    }

    /// Validates the factors against an input resolution.
    pub fn validate(&self, height: usize, width: usize) -> Vec<String> {
        let mut errs = Vec::new();
        for i in 0..LEVELS {
            let (h, w) = (height >> i, width >> i);
            for (label, p) in [("train", self.train[i]), ("infer", self.infer[i])] {
                if p == 0 || h % p != 0 || w % p != 0 {
                    errs.push(format!(
                        "pooling.{label}[{i}] = {p} must be positive and divide level size {h}x{w}"
                    ));
                }
            }
            if self.infer[i] > self.train[i] {
                errs.push(format!(
                    "pooling.infer[{i}] = {} exceeds pooling.train[{i}] = {}",
                    self.infer[i], self.train[i]
                ));
            }
        }
        errs
    }
}

/// Intermediate nodes of one fused level, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct LevelTrace {
    /// Row-stochastic `[n, n]` attention matrix over pooled positions.
    pub attention: Var,
    /// Attended values `[n, d_v]` before upsampling.
    pub attended: Var,
    pub refined: Var,
}

fn pool<T: Scalar>(graph: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    if p == 1 {
        return Ok(x);
    }
    let (h, w, _) = graph.value(x).hwc()?;
    graph.resize(x, h / p, w / p)
}

pub fn fuse_level_traced<T: Scalar>(
    graph: &mut Graph<T>,
    f_rgb: Var,
    f_dg: FusedDepthFeatures,
    weights: &AttentionWeights<Var>,
    p: usize,
) -> Result<LevelTrace> {
    let (h, w, c) = graph.value(f_rgb).hwc()?;
    let (dh, dw, dc) = graph.value(f_dg.values).hwc()?;
    if (dh, dw, dc) != (h, w, c + 1) {
        return Err(Error::dim("fuse_level", &[h, w, c + 1], &[dh, dw, dc]));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::arg(format!("pooling factor {p} does not divide {h}x{w}")));
    }
    let d_k = graph.shape(weights.query)[1];
    if d_k == 0 {
        return Err(Error::Config("d_k must be positive".into()));
    }
    let n = (h / p) * (w / p);

    let dg = pool(graph, f_dg.values, p)?;
    let dg = graph.reshape(dg, &[n, c + 1])?;
    let rgb = pool(graph, f_rgb, p)?;
    let rgb = graph.reshape(rgb, &[n, c])?;

    let q = graph.matmul(dg, weights.query)?;
    let k = graph.matmul(dg, weights.key)?;
    let v = graph.matmul(rgb, weights.value)?;
    let d_v = graph.shape(v)[1];

    let kt = graph.transpose(k)?;
    let scores = graph.matmul(q, kt)?;
    let scores = graph.scale(scores, T::one() / T::from_usize(d_k).unwrap().sqrt());
    let attention = graph.softmax_rows(scores)?;
    let attended = graph.matmul(attention, v)?;

    let global = graph.reshape(attended, &[h / p, w / p, d_v])?;
    let up = if p == 1 { global } else { graph.resize(global, h, w)? };
    let projected = graph.conv1x1(up, weights.residual.weight, weights.residual.bias)?;
    let refined = graph.add(f_rgb, projected)?;
    Ok(LevelTrace {
        attention,
        attended,
        refined,
    })
}

pub fn fuse_level<T: Scalar>(
    graph: &mut Graph<T>,
    f_rgb: Var,
    f_dg: FusedDepthFeatures,
    weights: &AttentionWeights<Var>,
    p: usize,
) -> Result<Var> {
    fuse_level_traced(graph, f_rgb, f_dg, weights, p).map(|t| t.refined)
}

/// Gradient, concat, and cross-attention fusion at every level. With
/// `depth_gradients` off the gradient channel is replaced by zeros.
pub fn fuse_pyramid<T: Scalar>(
    graph: &mut Graph<T>,
    rgb: &FeaturePyramid,
    depth: &FeaturePyramid,
    weights: &[AttentionWeights<Var>],
    pooling: &PoolingConfig,
    mode: Mode,
    depth_gradients: bool,
) -> Result<FeaturePyramid> {
    if weights.len() != LEVELS {
        return Err(Error::Contract(format!("expected {LEVELS} attention blocks, got {}", weights.len())));
    }
    let factors = pooling.factors(mode);
    let mut levels = rgb.levels;
    for i in 0..LEVELS {
        if graph.shape(rgb.levels[i]) != graph.shape(depth.levels[i]) {
            return Err(Error::dim(
                "fuse_pyramid",
                graph.shape(rgb.levels[i]),
                graph.shape(depth.levels[i]),
            ));
        }
        let fused = if depth_gradients {
            with_gradient_channel(graph, depth.levels[i])?
        } else {
            with_zero_channel(graph, depth.levels[i])?
        };
        levels[i] = fuse_level(graph, rgb.levels[i], fused, &weights[i], factors[i])?;
    }
    Ok(FeaturePyramid { levels })
}

/// Multiply counts of one fused level with `d_k = d_v = c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCost {
    /// Scores plus aggregation, `2 n² c` for `n = hw / p²` pooled positions.
    pub quadratic: u64,
    /// Q/K/V projections at pooled size plus the full-size residual conv.
    pub linear: u64,
}

impl AttentionCost {
    pub fn total(&self) -> u64 {
        self.quadratic + self.linear
    }
}

pub fn attention_complexity(h: usize, w: usize, c: usize, p: usize) -> AttentionCost {
    let n = ((h / p) * (w / p)) as u64;
    let c = c as u64;
    AttentionCost {
        quadratic: 2 * n * n * c,
        linear: 2 * n * (c + 1) * c + n * c * c + (h * w) as u64 * c * c,
    }
}
