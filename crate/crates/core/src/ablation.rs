//! Named training variants and a runner that trains every variant × seed
//! combination, sharing the RGB-only stage between variants that agree on it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{AblationConfig, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{compare_runs, AblationTable, RunLog};
use crate::masking::MaskMode;
use crate::model::ModelParams;
use crate::numerics::Scalar;
use crate::uda::{pretrain, run_training, Datasets, EvalEvent, RunOptions, Scheduling};

/// A preset of ablation toggles applied on top of a base config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Everything on: fusion, depth gradients, all geometries, scheduled phases.
    Full,
    /// Supervised on the source domain only; no pseudo-labels, no masking.
    SourceOnly,
    NoFusion,
    /// Cross-attention fusion with the gradient channel zeroed.
    NoGradients,
    StochasticOnly,
    VerticalOnly,
    HorizontalOnly,
    NoMasking,
    /// Masking stays on source frames for the whole run.
    SourceMasking,
    /// Masking applies to target frames from the first step.
    TargetMasking,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Full,
        Variant::SourceOnly,
        Variant::NoFusion,
        Variant::NoGradients,
        Variant::StochasticOnly,
        Variant::VerticalOnly,
        Variant::HorizontalOnly,
        Variant::NoMasking,
        Variant::SourceMasking,
        Variant::TargetMasking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SourceOnly => "source_only",
            Variant::NoFusion => "no_fusion",
            Variant::NoGradients => "no_gradients",
            Variant::StochasticOnly => "stochastic_only",
            Variant::VerticalOnly => "vertical_only",
            Variant::HorizontalOnly => "horizontal_only",
            Variant::NoMasking => "no_masking",
            Variant::SourceMasking => "source_masking",
            Variant::TargetMasking => "target_masking",
        }
    }

    /// `base` with this variant's toggles. `Full` keeps `base` as given.
    pub fn apply(self, base: &AblationConfig) -> AblationConfig {
        let mut a = *base;
        match self {
            Variant::Full => {}
            Variant::SourceOnly => {
                a.enable_adaptation = false;
                a.mask_mode = MaskMode::None;
            }
            Variant::NoFusion => a.enable_fusion = false,
            Variant::NoGradients => a.enable_depth_gradients = false,
            Variant::StochasticOnly => a.mask_mode = MaskMode::StochasticOnly,
            Variant::VerticalOnly => a.mask_mode = MaskMode::VerticalOnly,
            Variant::HorizontalOnly => a.mask_mode = MaskMode::HorizontalOnly,
            Variant::NoMasking => a.mask_mode = MaskMode::None,
            Variant::SourceMasking => a.scheduling = Scheduling::SourceOnly,
            Variant::TargetMasking => a.scheduling = Scheduling::TargetOnly,
        }
        a
    }

    pub fn configure(self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut c = base.clone();
        c.seed = seed;
        c.ablation = self.apply(&base.ablation);
        c
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Final state and log of one variant × seed run.
pub struct AblationRun<T> {
    pub variant: Variant,
    pub seed: u64,
    pub evals: Vec<EvalEvent>,
    pub model: ModelParams<T>,
}

impl<T> AblationRun<T> {
    pub fn log(&self) -> RunLog {
        RunLog {
            variant: self.variant.name().into(),
            seed: self.seed,
            evals: self.evals.iter().map(EvalEvent::metrics).collect(),
        }
    }
}

/// Worker count from `MASKADAPT_THREADS`, default 1.
pub fn thread_budget() -> Result<usize> {
    match std::env::var("MASKADAPT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("MASKADAPT_THREADS: expected an integer >= 1, got {v:?}"))),
        },
    }
}

/// Runs `jobs` on up to `threads` workers; results keep job order.
fn parallel_map<J: Sync, R: Send>(jobs: &[J], threads: usize, f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Directory of one run under an ablation output root.
pub fn run_dir(root: &Path, variant: Variant, seed: u64) -> PathBuf {
    root.join(variant.name()).join(format!("seed_{seed}"))
}

/// Trains every variant for every seed. The RGB-only stage depends only on
/// the seed and on whether adaptation is enabled, so it runs once per such
/// pair. With `out`, each run logs to [`run_dir`] and the tables are written
/// to `out` as `ablation_runs.csv`, `ablation_summary.csv` and `ablation.txt`.
pub fn run_ablation<T: Scalar>(
    base: &RunConfig,
    data: &Datasets<T>,
    variants: &[Variant],
    seeds: &[u64],
    out: Option<&Path>,
    threads: usize,
) -> Result<(Vec<AblationRun<T>>, AblationTable)> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one variant and one seed".into()));
    }
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    for &(v, s) in &jobs {
        v.configure(base, s).validate()?;
    }

    let mut pretrained: BTreeMap<(u64, bool), ModelParams<T>> = BTreeMap::new();
    if base.train.two_stage {
        let mut keys: Vec<(u64, bool)> = jobs
            .iter()
            .map(|&(v, s)| (s, v.apply(&base.ablation).enable_adaptation))
            .collect();
        keys.sort();
        keys.dedup();
        let models = parallel_map(&keys, threads, |&(s, adapt)| {
            let mut c = base.clone();
            c.seed = s;
            c.ablation.enable_adaptation = adapt;
            if !adapt {
                c.ablation.mask_mode = MaskMode::None;
            }
            pretrain(&c, data)
        })?;
        pretrained.extend(keys.into_iter().zip(models));
    }

    let runs = parallel_map(&jobs, threads, |&(variant, seed)| {
        let config = variant.configure(base, seed);
        let dir = out.map(|o| run_dir(o, variant, seed));
        let key = (seed, config.ablation.enable_adaptation);
        let output = run_training(
            &config,
            data,
            RunOptions {
                out_dir: dir.as_deref(),
                resume: None,
                pretrained: pretrained.get(&key).cloned(),
            },
        )?;
        let model = match config.train.eval_model {
            crate::config::EvalModel::Teacher => output.state.teacher.params().clone(),
            crate::config::EvalModel::Student => output.state.student,
        };
        Ok(AblationRun {
            variant,
            seed,
            evals: output.evals,
            model,
        })
    })?;

    let logs: Vec<RunLog> = runs.iter().map(AblationRun::log).collect();
    let table = compare_runs(&logs)?;
    if let Some(root) = out {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for (name, text) in [
            ("ablation_runs.csv", table.runs_csv()),
            ("ablation_summary.csv", table.summary_csv()),
            ("ablation.txt", table.to_text()),
        ] {
            let p = root.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok((runs, table))
}
