//! Teacher–student self-training with complementary input masking.
//!
//! The student learns from labelled source scenes and from teacher
//! pseudo-labels on target scenes. One domain is fed masked (RGB and depth
//! hidden on complementary blocks) while the other is fed whole; which one
//! is masked switches from source to target once the teacher is confident.
//! The teacher is an exponential moving average of the student.

mod optim;
mod run;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Mode, PoolingConfig};
use crate::masking::{
    apply_mask, ratio_at, sample_mask, update_phase, DomainPhase, Geometry, MaskMode, MaskPair, MaskSchedule,
};
use crate::model::{argmax_with_confidence, bind, forward, Binding, ForwardOptions, ModelParams, ParamGroup, SegModel};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::ParamTree;
use crate::synthdata::SceneSample;

pub use optim::{ema_update, lr_at, AdamConfig, AdamState, GroupRates, LrSchedule};
pub use run::{
    evaluate, load_checkpoint, pretrain, run_training, save_checkpoint, segment, stage_settings, Checkpoint, Datasets,
    EvalEvent, RunOptions, RunOutput, Splits, Stage, Window,
};

const RGB_MEAN: f64 = 0.5;
const RGB_STD: f64 = 0.25;
/// Depth is centred per image and divided by this many meters.
const DEPTH_UNIT_M: f64 = 0.05;

/// One RGB-D frame ready for the network: RGB in `[0, 1]` (normalized
/// after augmentation) and depth already centred and scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPair<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
}

impl<T: Scalar> InputPair<T> {
    pub fn from_sample(sample: &SceneSample, depth_gradient_channel: bool) -> Result<Self> {
        Ok(Self {
            rgb: sample.rgb.cast(),
            depth: prepare_depth(&sample.depth.cast(), depth_gradient_channel)?,
        })
    }
}

/// Centres and scales a `[H, W, 1]` depth map; optionally appends its
/// gradient magnitude as a second channel.
pub fn prepare_depth<T: Scalar>(depth: &Tensor<T>, gradient_channel: bool) -> Result<Tensor<T>> {
    let (_, _, c) = depth.hwc()?;
    if c != 1 {
        return Err(Error::dim("prepare_depth", depth.shape(), &[depth.shape()[0], depth.shape()[1], 1]));
    }
    let mean = depth.mean();
    let unit = T::from_f64_lossy(DEPTH_UNIT_M);
    let centred = depth.map(|d| (d - mean) / unit);
    if !gradient_channel {
        return Ok(centred);
    }
    let mut g = Graph::new();
    let x = g.constant(centred);
    let grad = g.depth_gradient(x)?;
    let both = g.concat_channels(&[x, grad])?;
    Ok(g.value(both).clone())
}

fn normalize_rgb<T: Scalar>(rgb: &Tensor<T>) -> Tensor<T> {
    let (m, s) = (T::from_f64_lossy(RGB_MEAN), T::from_f64_lossy(RGB_STD));
    rgb.map(|v| (v - m) / s)
}

/// Labelled source frames and unlabelled target frames for one step.
#[derive(Clone, Debug)]
pub struct DomainBatch<T> {
    pub source: Vec<InputPair<T>>,
    pub source_labels: Vec<Vec<u8>>,
    pub target: Vec<InputPair<T>>,
}

/// Which domain's inputs get masked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduling {
    SourceOnly,
    TargetOnly,
    #[default]
    Scheduled,
}

/// Everything that shapes a step besides the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSettings {
    pub fusion: bool,
    pub depth_gradients: bool,
    /// Use target pseudo-labels at all; off gives a source-only run.
    pub adaptation: bool,
    pub mask_mode: MaskMode,
    pub scheduling: Scheduling,
    pub block: usize,
    pub pooling: PoolingConfig,
    pub pseudo_label_threshold: f64,
    /// Weight of the unmasked target term while source is masked.
    pub target_weight: f64,
    /// Weight of the unmasked source term while target is masked.
    pub source_weight: f64,
    pub unmasked_every: usize,
    pub confidence_every: usize,
    pub brightness: (f64, f64),
    pub noise_std: f64,
    pub rates: GroupRates,
    pub warmup: usize,
    pub decay_power: f64,
    pub adam: AdamConfig,
}

/// Independent random streams, all derived from one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerRngs {
    pub masks: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub data: ChaCha8Rng,
}

impl TrainerRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Self {
            masks: stream(11),
            augment: stream(12),
            data: stream(13),
        }
    }
}

/// EMA copy of the student. Only a `Teacher` can produce pseudo-labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Teacher<T>(ModelParams<T>);

impl<T: Scalar> Teacher<T> {
    pub fn from_student(student: &ModelParams<T>) -> Self {
        Teacher(student.clone())
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.0
    }

    pub fn ema_update(&mut self, student: &ModelParams<T>, alpha: f64) -> Result<()> {
        ema_update(&mut self.0, student, alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainerState<T> {
    pub student: ModelParams<T>,
    pub teacher: Teacher<T>,
    pub adam: AdamState<T>,
    pub t: usize,
    pub t_total: usize,
    pub alpha: f64,
    pub num_classes: usize,
    pub settings: StepSettings,
    pub schedule: MaskSchedule,
    pub rng: TrainerRngs,
    /// Sum and count of teacher confidences since the last phase check.
    pub confidence_window: (f64, usize),
}

impl<T: Scalar> TrainerState<T> {
    pub fn new(
        student: ModelParams<T>,
        settings: StepSettings,
        schedule: MaskSchedule,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::arg(format!("EMA momentum {alpha} must lie in (0, 1)")));
        }
        let mut schedule = schedule;
        schedule.phase = match settings.scheduling {
            Scheduling::TargetOnly if settings.adaptation => DomainPhase::Target,
            _ => DomainPhase::Source,
        };
        Ok(Self {
            teacher: Teacher::from_student(&student),
            adam: AdamState::new(&student),
            num_classes: *student.decoder.head.bias.shape().last().unwrap(),
            t: 0,
            t_total: schedule.t_total,
            alpha,
            settings,
            schedule,
            rng: TrainerRngs::new(seed),
            confidence_window: (0.0, 0),
            student,
        })
    }

    pub fn cast<U: Scalar>(&self) -> TrainerState<U> {
        let c = |m: &ModelParams<T>| m.map(&mut |_, t| t.cast::<U>());
        TrainerState {
            student: c(&self.student),
            teacher: Teacher(c(&self.teacher.0)),
            adam: self.adam.cast(),
            t: self.t,
            t_total: self.t_total,
            alpha: self.alpha,
            num_classes: self.num_classes,
            settings: self.settings.clone(),
            schedule: self.schedule,
            rng: self.rng.clone(),
            confidence_window: self.confidence_window,
        }
    }

    /// Learning rate of the named parameter at the current iteration.
    pub fn rate(&self, name: &str) -> f64 {
        let s = &self.settings;
        lr_at(
            self.t,
            &LrSchedule {
                base: s.rates.of(ParamGroup::of(name)),
                warmup: s.warmup,
                total: self.t_total,
                power: s.decay_power,
            },
        )
    }
}

/// Teacher argmax labels on whole (unmasked) inputs, plus per-pixel and
/// mean max-probability.
pub struct PseudoLabels<T> {
    pub labels: Vec<Vec<u8>>,
    pub pixel_confidence: Vec<Vec<T>>,
    pub confidence: f64,
}

pub fn pseudo_label<T: Scalar>(
    teacher: &Teacher<T>,
    targets: &[InputPair<T>],
    settings: &StepSettings,
) -> Result<PseudoLabels<T>> {
    let mut out = PseudoLabels {
        labels: Vec::with_capacity(targets.len()),
        pixel_confidence: Vec::with_capacity(targets.len()),
        confidence: 0.0,
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for x in targets {
        let logits = crate::model::predict(
            &teacher.0,
            &normalize_rgb(&x.rgb),
            &x.depth,
            &settings.pooling,
            settings.fusion,
            settings.depth_gradients,
        )?;
        let (labels, conf) = argmax_with_confidence(&logits);
        total += conf.iter().map(|c| c.to_f64_lossy()).sum::<f64>();
        count += conf.len();
        out.labels.push(labels);
        out.pixel_confidence.push(conf);
    }
    out.confidence = if count == 0 { 0.0 } else { total / count as f64 };
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: usize,
    pub loss: f64,
    pub source_loss: f64,
    pub target_loss: f64,
    pub mask_ratio: f64,
    pub phase: DomainPhase,
    pub geometry: Option<Geometry>,
    pub unmasked: bool,
    pub confidence: Option<f64>,
    /// Masks drawn this step, one per batch item; not logged.
    #[serde(skip)]
    pub masks: Vec<MaskPair>,
}

fn augment<T: Scalar>(rgb: &Tensor<T>, settings: &StepSettings, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let (lo, hi) = settings.brightness;
    let b = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let noise = Normal::new(0.0, settings.noise_std.max(0.0)).unwrap();
    let mut out = rgb.map(|v| v * T::from_f64_lossy(b));
    if settings.noise_std > 0.0 {
        for v in out.data_mut() {
            *v += T::from_f64_lossy(noise.sample(rng));
        }
    }
    normalize_rgb(&out)
}

/// Student input for one frame, masked when `mask` is given.
fn student_logits<T: Scalar>(
    graph: &mut Graph<T>,
    model: &SegModel<Var>,
    rgb: Tensor<T>,
    depth: &Tensor<T>,
    mask: Option<&MaskPair>,
    settings: &StepSettings,
) -> Result<Var> {
    let (rgb, depth) = match mask {
        Some(m) => (apply_mask(&rgb, &m.rgb)?, apply_mask(depth, &m.depth)?),
        None => (rgb, depth.clone()),
    };
    let r = graph.constant(rgb);
    let d = graph.constant(depth);
    let opts = ForwardOptions {
        fusion: settings.fusion,
        depth_gradients: settings.depth_gradients,
        mode: Mode::Train,
    };
    let logits = forward(graph, model, r, d, &settings.pooling, opts)?;
    let k = *graph.shape(logits).last().unwrap();
    let rows = graph.value(logits).len() / k;
    graph.reshape(logits, &[rows, k])
}

/// One optimisation step. Returns the step's losses and schedule state.
pub fn train_step<T: Scalar>(state: &mut TrainerState<T>, batch: &DomainBatch<T>) -> Result<StepMetrics> {
    let settings = state.settings.clone();
    let adapt = settings.adaptation && !batch.target.is_empty();
    if batch.source.is_empty() || batch.source.len() != batch.source_labels.len() {
        return Err(Error::arg("batch needs at least one labelled source frame"));
    }
    let t = state.t;
    let m_t = if settings.mask_mode == MaskMode::None {
        0.0
    } else {
        ratio_at(t.min(state.schedule.t_total), &state.schedule)?
    };
    let unmasked = settings.unmasked_every > 0 && t % settings.unmasked_every == 0;
    let phase = if adapt { state.schedule.phase } else { DomainPhase::Source };

    let pseudo = if adapt {
        Some(pseudo_label(&state.teacher, &batch.target, &settings)?)
    } else {
        None
    };
    let threshold = T::from_f64_lossy(settings.pseudo_label_threshold);

    let mut graph = Graph::new();
    let model = bind(&mut graph, &state.student, Binding::Train);
    let mut source_terms = Vec::new();
    let mut target_terms = Vec::new();
    let mut geometry = None;
    let mut masks = Vec::new();
    let n = batch.source.len().max(batch.target.len());
    for i in 0..n {
        let src = &batch.source[i % batch.source.len()];
        let (h, w, _) = src.rgb.hwc()?;
        let draw = if unmasked { None } else { settings.mask_mode.draw(&mut state.rng.masks) };
        let mask = match draw {
            Some(g) => {
                geometry = Some(g);
                Some(sample_mask(h, w, g, m_t, settings.block, &mut state.rng.masks)?)
            }
            None => None,
        };
        let src_mask = if phase == DomainPhase::Source { mask.as_ref() } else { None };
        let rgb = augment(&src.rgb, &settings, &mut state.rng.augment);
        let logits = student_logits(&mut graph, &model, rgb, &src.depth, src_mask, &settings)?;
        let loss = graph.cross_entropy(logits, &batch.source_labels[i % batch.source.len()], None)?;
        source_terms.push(loss);

        if let Some(pl) = &pseudo {
            let j = i % batch.target.len();
            let tgt = &batch.target[j];
            let tgt_mask = if phase == DomainPhase::Target { mask.as_ref() } else { None };
            let rgb = augment(&tgt.rgb, &settings, &mut state.rng.augment);
            let logits = student_logits(&mut graph, &model, rgb, &tgt.depth, tgt_mask, &settings)?;
            let weights: Vec<T> = pl.pixel_confidence[j]
                .iter()
                .map(|&c| if c >= threshold { T::one() } else { T::zero() })
                .collect();
            let loss = graph.cross_entropy(logits, &pl.labels[j], Some(&weights))?;
            target_terms.push(loss);
        }
        masks.extend(mask);
    }

    let inv = 1.0 / n as f64;
    let (w_src, w_tgt) = match (unmasked, phase) {
        (true, _) => (1.0, 1.0),
        (false, DomainPhase::Source) => (1.0, settings.target_weight),
        (false, DomainPhase::Target) => (settings.source_weight, 1.0),
    };
    let f = T::from_f64_lossy;
    let src_loss = graph.weighted_sum(&source_terms.iter().map(|&v| (v, f(inv))).collect::<Vec<_>>())?;
    let mut terms = vec![(src_loss, f(w_src))];
    let tgt_loss = if target_terms.is_empty() {
        None
    } else {
        let l = graph.weighted_sum(&target_terms.iter().map(|&v| (v, f(inv))).collect::<Vec<_>>())?;
        terms.push((l, f(w_tgt)));
        Some(l)
    };
    let total = graph.weighted_sum(&terms)?;
    let scalar = |v: Var, g: &Graph<T>| g.value(v).data()[0].to_f64_lossy();
    let metrics = StepMetrics {
        iteration: t,
        loss: scalar(total, &graph),
        source_loss: scalar(src_loss, &graph),
        target_loss: tgt_loss.map_or(0.0, |l| scalar(l, &graph)),
        mask_ratio: if unmasked || geometry.is_none() { 0.0 } else { m_t },
        phase,
        geometry,
        unmasked,
        confidence: pseudo.as_ref().map(|p| p.confidence),
        masks,
    };
    if !metrics.loss.is_finite() {
        let max_abs = state
            .student
            .leaves()
            .iter()
            .flat_map(|t| t.data().iter().map(|v| v.to_f64_lossy().abs()))
            .fold(0.0, f64::max);
        return Err(Error::NonFinite {
            iteration: t,
            snapshot: format!(
                "source_loss={} target_loss={} m_t={m_t} phase={phase:?} unmasked={unmasked} max|param|={max_abs}",
                metrics.source_loss, metrics.target_loss
            ),
        });
    }

    graph.backward(total)?;
    let grads = model.map(&mut |_, v| graph.grad(*v));
    drop(graph);
    let rates: Vec<(String, f64)> = state
        .student
        .named()
        .into_iter()
        .map(|(n, _)| {
            let r = state.rate(&n);
            (n, r)
        })
        .collect();
    let rate = |name: &str| rates.iter().find(|(n, _)| n == name).map_or(0.0, |r| r.1);
    state.adam.step(&mut state.student, &grads, &settings.adam, &rate)?;
    state.teacher.ema_update(&state.student, state.alpha)?;

    state.t += 1;
    if let Some(pl) = &pseudo {
        state.confidence_window.0 += pl.confidence;
        state.confidence_window.1 += 1;
    }
    if settings.scheduling == Scheduling::Scheduled
        && settings.confidence_every > 0
        && state.t % settings.confidence_every == 0
        && state.confidence_window.1 > 0
    {
        let mean = state.confidence_window.0 / state.confidence_window.1 as f64;
        state.schedule = update_phase(mean, &state.schedule);
        state.confidence_window = (0.0, 0);
    }
    Ok(metrics)
}
