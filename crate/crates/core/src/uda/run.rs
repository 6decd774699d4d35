use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    normalize_rgb, train_step, DomainBatch, GroupRates, InputPair, Scheduling, StepMetrics, StepSettings,
    TrainerState,
};
use crate::config::{EvalModel, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{boundary_f1, ConfusionMatrix, EvalMetrics, IouReport};
use crate::masking::{DomainPhase, MaskMode, MaskSchedule};
use crate::model::{argmax_with_confidence, init_model, predict, ModelParams};
use crate::numerics::{Scalar, IGNORE_INDEX};
use crate::synthdata::{generate, read_dataset, SceneSample};

/// Training and validation frames held in memory.
#[derive(Clone, Debug)]
pub struct Datasets<T> {
    pub source: Vec<InputPair<T>>,
    pub source_labels: Vec<Vec<u8>>,
    pub target: Vec<InputPair<T>>,
    pub val: Vec<InputPair<T>>,
    pub val_labels: Vec<Vec<u8>>,
}

/// Generated (or loaded) scenes for the three splits.
pub struct Splits {
    pub source: Vec<SceneSample>,
    pub target: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

impl Splits {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let d = &config.data;
        if d.uses_directories() {
            let read = |p: &Option<PathBuf>| read_dataset(p.as_deref().unwrap()).map(|(_, s)| s);
            return Ok(Self {
                source: read(&d.source_dir)?,
                target: read(&d.target_dir)?,
                val: read(&d.val_dir)?,
            });
        }
        let (source, target) = d.domains();
        let [s, t, v] = d.split_seeds();
        Ok(Self {
            source: generate(&source, d.source_train, s)?,
            target: generate(&target, d.target_train, t)?,
            val: generate(&target, d.target_val, v)?,
        })
    }
}

impl<T: Scalar> Datasets<T> {
    pub fn from_splits(splits: &Splits, gradient_channel: bool) -> Result<Self> {
        let inputs = |s: &[SceneSample]| {
            s.iter()
                .map(|x| InputPair::from_sample(x, gradient_channel))
                .collect::<Result<Vec<_>>>()
        };
        let labels = |s: &[SceneSample]| s.iter().map(|x| x.labels.clone()).collect::<Vec<_>>();
        let out = Self {
            source: inputs(&splits.source)?,
            source_labels: labels(&splits.source),
            target: inputs(&splits.target)?,
            val: inputs(&splits.val)?,
            val_labels: labels(&splits.val),
        };
        if out.source.is_empty() || out.val.is_empty() {
            return Err(Error::Config("source and validation splits must not be empty".into()));
        }
        Ok(out)
    }

    pub fn from_config(config: &RunConfig) -> Result<Self> {
        Self::from_splits(&Splits::from_config(config)?, config.model.depth_map_gradient_input)
    }

    fn batch(&self, size: usize, rng: &mut ChaCha8Rng) -> DomainBatch<T> {
        let mut b = DomainBatch {
            source: Vec::with_capacity(size),
            source_labels: Vec::with_capacity(size),
            target: Vec::with_capacity(size),
        };
        for _ in 0..size {
            let i = rng.random_range(0..self.source.len());
            b.source.push(self.source[i].clone());
            b.source_labels.push(self.source_labels[i].clone());
            if !self.target.is_empty() {
                b.target.push(self.target[rng.random_range(0..self.target.len())].clone());
            }
        }
        b
    }
}

/// Per-pixel class labels for one frame.
pub fn segment<T: Scalar>(model: &ModelParams<T>, frame: &InputPair<T>, settings: &StepSettings) -> Result<Vec<u8>> {
    let logits = predict(
        model,
        &normalize_rgb(&frame.rgb),
        &frame.depth,
        &settings.pooling,
        settings.fusion,
        settings.depth_gradients,
    )?;
    Ok(argmax_with_confidence(&logits).0)
}

/// Scores `model` on labelled frames: merged confusion-matrix IoU and mean
/// per-frame boundary F1.
pub fn evaluate<T: Scalar>(
    model: &ModelParams<T>,
    frames: &[InputPair<T>],
    labels: &[Vec<u8>],
    settings: &StepSettings,
    radius: usize,
) -> Result<(IouReport, f64)> {
    let k = *model.decoder.head.bias.shape().last().unwrap();
    let mut cm = ConfusionMatrix::new(k);
    let mut bf1 = 0.0;
    for (x, y) in frames.iter().zip(labels) {
        let pred = segment(model, x, settings)?;
        cm.accumulate(&pred, y, IGNORE_INDEX)?;
        let (h, w, _) = x.rgb.hwc()?;
        bf1 += boundary_f1(&pred, y, h, w, radius)?;
    }
    Ok((cm.iou()?, bf1 / frames.len().max(1) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// RGB encoder and decoder alone.
    Pretrain,
    /// RGB frozen (two-stage) or not; depth, fusion and decoder train.
    Adapt,
}

/// Settings, mask schedule and iteration count of one stage.
pub fn stage_settings(config: &RunConfig, stage: Stage) -> (StepSettings, MaskSchedule, usize) {
    let t = &config.train;
    match stage {
        Stage::Adapt => (config.adapt_settings(), config.mask_schedule(t.iterations), t.iterations),
        Stage::Pretrain => {
            let mut s = config.adapt_settings();
            let adapt = config.ablation.enable_adaptation;
            s.fusion = false;
            s.depth_gradients = false;
            s.mask_mode = if adapt { MaskMode::StochasticOnly } else { MaskMode::None };
            s.scheduling = Scheduling::TargetOnly;
            s.rates = GroupRates {
                rgb: t.pretrain_lr,
                depth: 0.0,
                head: t.pretrain_lr,
            };
            s.warmup = t.warmup_iters.min(t.pretrain_iterations);
            let mut sched = config.mask_schedule(t.pretrain_iterations);
            sched.m_start = t.pretrain_mask_ratio;
            sched.m_end = t.pretrain_mask_ratio;
            (s, sched, t.pretrain_iterations)
        }
    }
}

const PRETRAIN_STREAM: u64 = 0x5eed_0001;

/// RGB-only stage. Returns the teacher weights with the RGB encoder frozen.
pub fn pretrain<T: Scalar>(config: &RunConfig, data: &Datasets<T>) -> Result<ModelParams<T>> {
    let (settings, sched, iterations) = stage_settings(config, Stage::Pretrain);
    let model = init_model::<T>(config.seed, &config.model)?;
    let mut state = TrainerState::new(model, settings, sched, config.train.ema_alpha, config.seed ^ PRETRAIN_STREAM)?;
    while state.t < iterations {
        let batch = data.batch(config.train.batch_size, &mut state.rng.data);
        train_step(&mut state, &batch)?;
    }
    let mut out = state.teacher.params().clone();
    out.rgb.set_trainable(false);
    Ok(out)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEvent {
    pub iteration: usize,
    pub loss: f64,
    pub source_loss: f64,
    pub target_loss: f64,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub boundary_f1: f64,
    pub mask_ratio: f64,
    pub phase: DomainPhase,
    pub confidence: Option<f64>,
}

impl EvalEvent {
    pub fn metrics(&self) -> EvalMetrics {
        EvalMetrics {
            iteration: self.iteration,
            iou: self.iou.clone(),
            miou: self.miou,
            boundary_f1: self.boundary_f1,
        }
    }
}

/// Step statistics accumulated since the last evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Window {
    loss: f64,
    source_loss: f64,
    target_loss: f64,
    steps: usize,
    confidence: f64,
    confident_steps: usize,
}

impl Window {
    fn add(&mut self, m: &StepMetrics) {
        self.loss += m.loss;
        self.source_loss += m.source_loss;
        self.target_loss += m.target_loss;
        self.steps += 1;
        if let Some(c) = m.confidence {
            self.confidence += c;
            self.confident_steps += 1;
        }
    }
}

const CHECKPOINT_FORMAT: &str = "maskadapt-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run. Parameters are stored in
/// double precision whatever the training precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: Stage,
    pub config: RunConfig,
    pub state: TrainerState<f64>,
    pub window: Window,
}

impl Checkpoint {
    pub fn state<T: Scalar>(&self) -> TrainerState<T> {
        self.state.cast()
    }

    /// The network configured for scoring.
    pub fn eval_params<T: Scalar>(&self) -> ModelParams<T> {
        let p = match self.config.train.eval_model {
            EvalModel::Teacher => self.state.teacher.params(),
            EvalModel::Student => &self.state.student,
        };
        p.map(&mut |_, t| t.cast())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ckpt).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            ckpt.format,
            ckpt.version
        )));
    }
    Ok(ckpt)
}

/// Optional inputs of [`run_training`].
pub struct RunOptions<'a, T> {
    /// Writes `config.json`, `metrics.jsonl`, `steps.jsonl` and checkpoints here.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint>,
    /// Stage-one weights to reuse instead of pretraining again.
    pub pretrained: Option<ModelParams<T>>,
}

impl<T> Default for RunOptions<'_, T> {
    fn default() -> Self {
        Self {
            out_dir: None,
            resume: None,
            pretrained: None,
        }
    }
}

pub struct RunOutput<T> {
    pub state: TrainerState<T>,
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalEvent>,
}

fn json_line<S: Serialize>(value: &S) -> String {
    serde_json::to_string(value).expect("log records serialize")
}

/// Keeps the lines of a JSONL log whose `iteration` is below `end`.
fn truncate_log(path: &Path, end: usize) -> Result<()> {
    let Ok(file) = File::open(path) else { return Ok(()) };
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let it = serde_json::from_str::<serde_json::Value>(&line)
            .ok()
            .and_then(|v| v.get("iteration").and_then(|i| i.as_u64()));
        if it.is_some_and(|i| (i as usize) < end) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

struct Logs {
    metrics: File,
    steps: File,
    metrics_path: PathBuf,
    steps_path: PathBuf,
}

impl Logs {
    fn open(dir: &Path, resume_at: Option<usize>) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics_path = dir.join("metrics.jsonl");
        let steps_path = dir.join("steps.jsonl");
        // step records are 0-based; the evaluation at t precedes the checkpoint at t
        let open = |p: &Path, keep_t: bool| -> Result<File> {
            let mut o = OpenOptions::new();
            if let Some(t) = resume_at {
                truncate_log(p, t + keep_t as usize)?;
                o.create(true).append(true);
            } else {
                o.create(true).write(true).truncate(true);
            }
            o.open(p).map_err(|e| Error::io(p, e))
        };
        Ok(Self {
            metrics: open(&metrics_path, true)?,
            steps: open(&steps_path, false)?,
            metrics_path,
            steps_path,
        })
    }

    fn write(file: &mut File, path: &Path, line: String) -> Result<()> {
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))
    }
}

/// Trains per `config`: optional RGB-only stage, then adaptation with
/// periodic validation on the target split.
pub fn run_training<T: Scalar>(
    config: &RunConfig,
    data: &Datasets<T>,
    opts: RunOptions<'_, T>,
) -> Result<RunOutput<T>> {
    config.validate()?;
    let (settings, schedule, iterations) = stage_settings(config, Stage::Adapt);
    let (mut state, mut window, resumed) = match opts.resume {
        Some(ckpt) => {
            if ckpt.stage != Stage::Adapt {
                return Err(Error::Config("can only resume an adaptation-stage checkpoint".into()));
            }
            let t = ckpt.state.t;
            (ckpt.state(), ckpt.window, Some(t))
        }
        None => {
            let base = if config.train.two_stage {
                match opts.pretrained {
                    Some(p) => p,
                    None => pretrain(config, data)?,
                }
            } else {
                init_model(config.seed, &config.model)?
            };
            let state = TrainerState::new(base, settings, schedule, config.train.ema_alpha, config.seed)?;
            (state, Window::default(), None)
        }
    };

    let mut logs = match opts.out_dir {
        Some(dir) => {
            if resumed.is_none() {
                let path = dir.join("config.json");
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                std::fs::write(&path, config.to_json()).map_err(|e| Error::io(&path, e))?;
            }
            Some(Logs::open(dir, resumed)?)
        }
        None => None,
    };
    let checkpoint = |state: &TrainerState<T>, window: &Window, name: &str| -> Result<()> {
        if let Some(dir) = opts.out_dir {
            let ckpt = Checkpoint {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                stage: Stage::Adapt,
                config: config.clone(),
                state: state.cast(),
                window: window.clone(),
            };
            save_checkpoint(&dir.join(name), &ckpt)?;
        }
        Ok(())
    };

    let mut steps = Vec::new();
    let mut evals = Vec::new();
    let t_cfg = &config.train;
    while state.t < iterations {
        let batch = data.batch(t_cfg.batch_size, &mut state.rng.data);
        let m = train_step(&mut state, &batch)?;
        window.add(&m);
        if let Some(l) = logs.as_mut() {
            Logs::write(&mut l.steps, &l.steps_path, json_line(&m))?;
        }
        let mask_ratio = m.mask_ratio;
        steps.push(m);

        let t = state.t;
        if t % t_cfg.eval_every == 0 || t == iterations {
            let model = match t_cfg.eval_model {
                EvalModel::Teacher => state.teacher.params(),
                EvalModel::Student => &state.student,
            };
            let (iou, bf1) = evaluate(model, &data.val, &data.val_labels, &state.settings, t_cfg.boundary_radius)?;
            let n = window.steps.max(1) as f64;
            let event = EvalEvent {
                iteration: t,
                loss: window.loss / n,
                source_loss: window.source_loss / n,
                target_loss: window.target_loss / n,
                iou: iou.per_class,
                miou: iou.miou,
                boundary_f1: bf1,
                mask_ratio,
                phase: state.schedule.phase,
                confidence: (window.confident_steps > 0).then(|| window.confidence / window.confident_steps as f64),
            };
            if let Some(l) = logs.as_mut() {
                Logs::write(&mut l.metrics, &l.metrics_path, json_line(&event))?;
            }
            evals.push(event);
            window = Window::default();
        }
        if t_cfg.checkpoint_every > 0 && t % t_cfg.checkpoint_every == 0 {
            checkpoint(&state, &window, &format!("checkpoint_{t:07}.json"))?;
        }
    }
    if let Some(l) = logs.as_mut() {
        for (f, p) in [(&mut l.metrics, &l.metrics_path), (&mut l.steps, &l.steps_path)] {
            f.flush().map_err(|e| Error::io(p, e))?;
        }
    }
    checkpoint(&state, &window, "checkpoint_final.json")?;
    Ok(RunOutput { state, steps, evals })
}
