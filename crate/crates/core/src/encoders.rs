//! Four-stage convolutional encoders and the upsample-concat decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{join, Conv, ParamTree};

pub const LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
}

/// Shape settings shared by both encoders and the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Feature width `C` at every level.
    pub channels: usize,
    pub rgb_in_channels: usize,
    pub depth_in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            rgb_in_channels: 3,
            depth_in_channels: 1,
        }
    }
}

/// conv3x3(stride) → relu → conv3x3 → relu
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderStage<P> {
    pub first: Conv<P>,
    pub second: Conv<P>,
    pub stride: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder<P> {
    pub modality: Modality,
    pub in_channels: usize,
    pub channels: usize,
    pub stages: Vec<EncoderStage<P>>,
}

pub type EncoderParams<T> = Encoder<Tensor<T>>;

impl<P> Encoder<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Encoder<Q> {
        Encoder {
            modality: self.modality,
            in_channels: self.in_channels,
            channels: self.channels,
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let p = join(prefix, &format!("stage{}", i + 1));
                    EncoderStage {
                        first: s.first.map(&join(&p, "first"), f),
                        second: s.second.map(&join(&p, "second"), f),
                        stride: s.stride,
                        trainable: s.trainable,
                    }
                })
                .collect(),
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.stages.iter_mut().for_each(|s| s.trainable = trainable);
    }

    pub fn is_trainable(&self) -> bool {
        self.stages.iter().any(|s| s.trainable)
    }
}

impl<P> ParamTree<P> for Encoder<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", i + 1));
            s.first.visit(&join(&p, "first"), f);
            s.second.visit(&join(&p, "second"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{}", i + 1));
            s.first.visit_mut(&join(&p, "first"), f);
            s.second.visit_mut(&join(&p, "second"), f);
        }
    }
}

/// Four feature maps on a graph; level `i` (0-based) is `[H/2^i, W/2^i, C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; LEVELS],
}

impl FeaturePyramid {
    /// Checks the halving shape law against the input resolution.
    pub fn check<T: Scalar>(&self, graph: &Graph<T>, h: usize, w: usize, c: usize) -> Result<()> {
        for (i, &lv) in self.levels.iter().enumerate() {
            let expect = [h >> i, w >> i, c];
            if graph.shape(lv) != expect {
                return Err(Error::dim("feature pyramid level", graph.shape(lv), &expect));
            }
        }
        Ok(())
    }
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

pub(crate) fn he_conv3x3<T: Scalar>(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Conv<Tensor<T>> {
    Conv {
        weight: normal_tensor(rng, &[9 * cin, cout], (2.0 / (9 * cin) as f64).sqrt()),
        bias: Tensor::zeros(&[cout]),
    }
}

pub(crate) fn conv1x1_init<T: Scalar>(
    rng: &mut ChaCha8Rng,
    cin: usize,
    cout: usize,
    gain: f64,
) -> Conv<Tensor<T>> {
    Conv {
        weight: normal_tensor(rng, &[cin, cout], (gain / cin as f64).sqrt()),
        bias: Tensor::zeros(&[cout]),
    }
}

/// Fan-in scaled (He) normal initialization of one encoder.
pub fn init_params<T: Scalar>(seed: u64, modality: Modality, config: &EncoderConfig) -> EncoderParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = config.channels;
    let cin = match modality {
        Modality::Rgb => config.rgb_in_channels,
        Modality::Depth => config.depth_in_channels,
    };
    let stages = (0..LEVELS)
        .map(|i| EncoderStage {
            first: he_conv3x3(&mut rng, if i == 0 { cin } else { c }, c),
            second: he_conv3x3(&mut rng, c, c),
            stride: if i == 0 { 1 } else { 2 },
            trainable: true,
        })
        .collect();
    Encoder {
        modality,
        in_channels: cin,
        channels: c,
        stages,
    }
}

/// Runs the encoder on an `[H, W, ch]` image; H and W must be divisible by 8.
pub fn encode<T: Scalar>(graph: &mut Graph<T>, image: Var, params: &Encoder<Var>) -> Result<FeaturePyramid> {
    let (h, w, ch) = graph.value(image).hwc()?;
    let div = 1 << (LEVELS - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::arg(format!(
            "image {h}x{w} is not divisible by {div} for a {LEVELS}-level pyramid"
        )));
    }
    if ch != params.in_channels {
        return Err(Error::dim("encode input channels", &[h, w, ch], &[h, w, params.in_channels]));
    }
    let mut x = image;
    let mut levels = Vec::with_capacity(LEVELS);
    for stage in &params.stages {
        x = graph.conv3x3(x, stage.first.weight, stage.first.bias, stage.stride)?;
        x = graph.relu(x);
        x = graph.conv3x3(x, stage.second.weight, stage.second.bias, 1)?;
        x = graph.relu(x);
        levels.push(x);
    }
    let pyramid = FeaturePyramid {
        levels: levels.try_into().map_err(|_| Error::Contract("encoder must have 4 stages".into()))?,
    };
    pyramid.check(graph, h, w, params.channels)?;
    Ok(pyramid)
}

/// Upsamples levels 2–4 to full resolution, concatenates all four, then
/// `conv1x1(4C → C) → relu → conv1x1(C → K)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoder<P> {
    pub mix: Conv<P>,
    pub head: Conv<P>,
}

impl<P> Decoder<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Decoder<Q> {
        Decoder {
            mix: self.mix.map(&join(prefix, "mix"), f),
            head: self.head.map(&join(prefix, "head"), f),
        }
    }
}

impl<P> ParamTree<P> for Decoder<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        self.mix.visit(&join(prefix, "mix"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        self.mix.visit_mut(&join(prefix, "mix"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub fn init_decoder<T: Scalar>(seed: u64, channels: usize, num_classes: usize) -> Result<Decoder<Tensor<T>>> {
    if num_classes < 2 {
        return Err(Error::arg(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Decoder {
        mix: conv1x1_init(&mut rng, LEVELS * channels, channels, 2.0),
        head: conv1x1_init(&mut rng, channels, num_classes, 1.0),
    })
}

/// Per-pixel class logits `[H, W, K]` from a (refined) pyramid.
pub fn decode<T: Scalar>(graph: &mut Graph<T>, refined: &FeaturePyramid, params: &Decoder<Var>) -> Result<Var> {
    let k = graph.shape(params.head.bias)[0];
    if k < 2 {
        return Err(Error::arg(format!("need at least 2 classes, got {k}")));
    }
    let (h, w, _) = graph.value(refined.levels[0]).hwc()?;
    let mut parts = vec![refined.levels[0]];
    for &lv in &refined.levels[1..] {
        parts.push(graph.resize(lv, h, w)?);
    }
    let cat = graph.concat_channels(&parts)?;
    let mixed = graph.conv1x1(cat, params.mix.weight, params.mix.bias)?;
    let mixed = graph.relu(mixed);
    graph.conv1x1(mixed, params.head.weight, params.head.bias)
}
