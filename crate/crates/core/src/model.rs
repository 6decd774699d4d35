//! The full segmentation network: frozen-able RGB encoder, depth encoder,
//! per-level fusion blocks and the decoder.

use serde::{Deserialize, Serialize};

use crate::encoders::{self, decode, encode, Decoder, Encoder, EncoderConfig, Modality, LEVELS};
use crate::error::{Error, Result};
use crate::fusion::{fuse_pyramid, init_attention, AttentionWeights, Mode, PoolingConfig};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{join, ParamTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModel<P> {
    pub rgb: Encoder<P>,
    pub depth: Encoder<P>,
    pub fusion: Vec<AttentionWeights<P>>,
    pub decoder: Decoder<P>,
}

pub type ModelParams<T> = SegModel<Tensor<T>>;

/// Optimizer groups; each has its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    RgbEncoder,
    DepthEncoder,
    Head,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("rgb.") {
            ParamGroup::RgbEncoder
        } else if name.starts_with("depth.") {
            ParamGroup::DepthEncoder
        } else {
            ParamGroup::Head
        }
    }
}

impl<P> SegModel<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> SegModel<Q> {
        SegModel {
            rgb: self.rgb.map("rgb", f),
            depth: self.depth.map("depth", f),
            fusion: self
                .fusion
                .iter()
                .enumerate()
                .map(|(i, a)| a.map(&format!("fusion.level{}", i + 1), f))
                .collect(),
            decoder: self.decoder.map("decoder", f),
        }
    }
}

impl<P> ParamTree<P> for SegModel<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.rgb.visit(&join(prefix, "rgb"), f);
        self.depth.visit(&join(prefix, "depth"), f);
        for (i, a) in self.fusion.iter().enumerate() {
            a.visit(&join(prefix, &format!("fusion.level{}", i + 1)), f);
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.rgb.visit_mut(&join(prefix, "rgb"), f);
        self.depth.visit_mut(&join(prefix, "depth"), f);
        for (i, a) in self.fusion.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("fusion.level{}", i + 1)), f);
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub attention_dim: usize,
    pub num_classes: usize,
    /// Append the raw depth map's gradient magnitude as a second depth-encoder input channel.
    pub depth_map_gradient_input: bool,
    pub pooling: PoolingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            attention_dim: 16,
            num_classes: 3,
            depth_map_gradient_input: false,
            pooling: PoolingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            rgb_in_channels: 3,
            depth_in_channels: if self.depth_map_gradient_input { 2 } else { 1 },
        }
    }
}

/// Which parts of the network take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub fusion: bool,
    pub depth_gradients: bool,
    pub mode: Mode,
}

/// How parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    /// Stages flagged trainable (and all fusion/decoder weights) become
    /// gradient leaves; frozen encoder stages become constants.
    Train,
    /// Everything is a constant (teacher and evaluation passes).
    Frozen,
}

pub fn init_model<T: Scalar>(seed: u64, config: &ModelConfig) -> Result<ModelParams<T>> {
    let enc = config.encoder_config();
    let fusion = (0..LEVELS)
        .map(|i| init_attention(seed.wrapping_add(100 + i as u64), config.channels, config.attention_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegModel {
        rgb: encoders::init_params(seed.wrapping_add(1), Modality::Rgb, &enc),
        depth: encoders::init_params(seed.wrapping_add(2), Modality::Depth, &enc),
        fusion,
        decoder: encoders::init_decoder(seed.wrapping_add(3), config.channels, config.num_classes)?,
    })
}

pub fn bind<T: Scalar>(graph: &mut Graph<T>, model: &ModelParams<T>, binding: Binding) -> SegModel<Var> {
    let rgb_trainable = model.rgb.is_trainable();
    let depth_trainable = model.depth.is_trainable();
    model.map(&mut |name, t| {
        let trainable = match (binding, ParamGroup::of(name)) {
            (Binding::Frozen, _) => false,
            (Binding::Train, ParamGroup::RgbEncoder) => rgb_trainable,
            (Binding::Train, ParamGroup::DepthEncoder) => depth_trainable,
            (Binding::Train, ParamGroup::Head) => true,
        };
        if trainable {
            graph.param(t.clone())
        } else {
            graph.constant(t.clone())
        }
    })
}

/// Logits `[H, W, K]` for one RGB `[H, W, 3]` / depth `[H, W, d]` pair.
pub fn forward<T: Scalar>(
    graph: &mut Graph<T>,
    model: &SegModel<Var>,
    rgb: Var,
    depth: Var,
    pooling: &PoolingConfig,
    opts: ForwardOptions,
) -> Result<Var> {
    let (h, w, _) = graph.value(rgb).hwc()?;
    let (dh, dw, _) = graph.value(depth).hwc()?;
    if (h, w) != (dh, dw) {
        return Err(Error::dim("forward rgb/depth", graph.shape(rgb), graph.shape(depth)));
    }
    let rgb_pyr = encode(graph, rgb, &model.rgb)?;
    let refined = if opts.fusion {
        let depth_pyr = encode(graph, depth, &model.depth)?;
        fuse_pyramid(
            graph,
            &rgb_pyr,
            &depth_pyr,
            &model.fusion,
            pooling,
            opts.mode,
            opts.depth_gradients,
        )?
    } else {
        rgb_pyr
    };
    decode(graph, &refined, &model.decoder)
}

/// Inference-mode logits without recording gradients.
pub fn predict<T: Scalar>(
    model: &ModelParams<T>,
    rgb: &Tensor<T>,
    depth: &Tensor<T>,
    pooling: &PoolingConfig,
    fusion: bool,
    depth_gradients: bool,
) -> Result<Tensor<T>> {
    let mut graph = Graph::new();
    let bound = bind(&mut graph, model, Binding::Frozen);
    let r = graph.constant(rgb.clone());
    let d = graph.constant(depth.clone());
    let opts = ForwardOptions {
        fusion,
        depth_gradients,
        mode: Mode::Infer,
    };
    let logits = forward(&mut graph, &bound, r, d, pooling, opts)?;
    Ok(graph.value(logits).clone())
}

/// Per-pixel argmax and max-softmax-probability of `[.., K]` logits.
pub fn argmax_with_confidence<T: Scalar>(logits: &Tensor<T>) -> (Vec<u8>, Vec<T>) {
    let k = *logits.shape().last().unwrap();
    let mut labels = Vec::with_capacity(logits.len() / k);
    let mut conf = Vec::with_capacity(logits.len() / k);
    for row in logits.data().chunks_exact(k) {
        let (best, &max) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        let total: T = row.iter().map(|&v| (v - max).exp()).sum();
        labels.push(best as u8);
        conf.push(T::one() / total);
    }
    (labels, conf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_at_init_is_identity_on_rgb_pyramid() {
        let cfg = ModelConfig::default();
        let model = init_model::<f32>(4, &cfg).unwrap();
        let mut g = Graph::new();
        let b = bind(&mut g, &model, Binding::Frozen);
        let rgb = g.constant(Tensor::from_fn(&[32, 32, 3], |i| ((i * 7919) % 101) as f32 / 100.0));
        let depth = g.constant(Tensor::from_fn(&[32, 32, 1], |i| ((i * 31) % 17) as f32 / 17.0));
        let rp = encode(&mut g, rgb, &b.rgb).unwrap();
        let dp = encode(&mut g, depth, &b.depth).unwrap();
        let fused = fuse_pyramid(&mut g, &rp, &dp, &b.fusion, &cfg.pooling, Mode::Train, true).unwrap();
        for (a, r) in fused.levels.iter().zip(rp.levels) {
            let (x, y) = (g.value(*a).data(), g.value(r).data());
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn param_groups_by_name() {
        let model = init_model::<f32>(0, &ModelConfig::default()).unwrap();
        let names: Vec<String> = model.named().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"rgb.stage1.first.weight".to_string()));
        assert!(names.contains(&"fusion.level2.query".to_string()));
        assert_eq!(ParamGroup::of("depth.stage3.second.bias"), ParamGroup::DepthEncoder);
        assert_eq!(ParamGroup::of("decoder.head.weight"), ParamGroup::Head);
    }

    #[test]
    fn frozen_rgb_binds_as_constants() {
        let mut model = init_model::<f32>(0, &ModelConfig::default()).unwrap();
        model.rgb.set_trainable(false);
        let mut g = Graph::new();
        let b = bind(&mut g, &model, Binding::Train);
        assert!(!g.requires_grad(b.rgb.stages[0].first.weight));
        assert!(g.requires_grad(b.depth.stages[0].first.weight));
        assert!(g.requires_grad(b.decoder.head.weight));
    }

    #[test]
    fn argmax_picks_largest() {
        let t = Tensor::new(vec![2, 3], vec![0.0f64, 2.0, 1.0, 5.0, 5.0, 0.0]).unwrap();
        let (l, c) = argmax_with_confidence(&t);
        assert_eq!(l, vec![1, 0]);
        let e = (2.0f64).exp() / (1.0 + 2f64.exp() + 1f64.exp());
        assert!((c[0] - e).abs() < 1e-12);
    }
}
