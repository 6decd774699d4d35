//! Confusion matrices, per-class IoU, boundary F1 and ablation tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one label grid. Pixels whose truth equals `ignore_index` are
    /// skipped; every other label must be a class id. Fails without
    /// modifying `self`.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore_index: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::dim("accumulate", &[pred.len()], &[truth.len()]));
        }
        let k = self.k;
        let bad = pred
            .iter()
            .zip(truth)
            .position(|(&p, &t)| t != ignore_index && (p as usize >= k || t as usize >= k));
        if let Some(i) = bad {
            return Err(Error::arg(format!(
                "label out of range at pixel {i}: pred {} truth {} with {k} classes",
                pred[i], truth[i]
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != ignore_index {
                self.counts[t as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim("merge", &[self.k, self.k], &[other.k, other.k]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `None` marks classes with an empty union; they are left out of the mean.
    pub fn iou(&self) -> Result<IouReport> {
        if self.total() == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let k = self.k;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        Ok(IouReport {
            miou: defined.iter().sum::<f64>() / defined.len() as f64,
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Pixels with a 4-neighbour of a different label.
pub fn boundary_mask(labels: &[u8], height: usize, width: usize) -> Vec<bool> {
    let mut out = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            let l = labels[y * width + x];
            let right = x + 1 < width && labels[y * width + x + 1] != l;
            let down = y + 1 < height && labels[(y + 1) * width + x] != l;
            if right {
                out[y * width + x] = true;
                out[y * width + x + 1] = true;
            }
            if down {
                out[y * width + x] = true;
                out[(y + 1) * width + x] = true;
            }
        }
    }
    out
}

/// Fraction of `from` boundary pixels lying at Euclidean distance strictly
/// below `radius` from some `to` boundary pixel.
fn matched_fraction(from: &[bool], to: &[bool], height: usize, width: usize, radius: usize) -> Option<f64> {
    let total = from.iter().filter(|&&b| b).count();
    if total == 0 {
        return None;
    }
    let r = radius as isize;
    let r2 = r * r;
    let mut hit = 0;
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !from[(y * width as isize + x) as usize] {
                continue;
            }
            let found = (-r + 1..r).any(|dy| {
                (-r + 1..r).any(|dx| {
                    let (yy, xx) = (y + dy, x + dx);
                    dy * dy + dx * dx < r2
                        && (0..height as isize).contains(&yy)
                        && (0..width as isize).contains(&xx)
                        && to[(yy * width as isize + xx) as usize]
                })
            });
            hit += found as usize;
        }
    }
    Some(hit as f64 / total as f64)
}

/// F1 between predicted and true class boundaries. A boundary pixel counts
/// as matched when the other map has a boundary pixel at distance `< radius`,
/// so `radius = 1` demands exact overlap. Two boundary-free maps score 1.
pub fn boundary_f1(pred: &[u8], truth: &[u8], height: usize, width: usize, radius: usize) -> Result<f64> {
    if radius < 1 {
        return Err(Error::arg("boundary radius must be at least 1"));
    }
    if pred.len() != height * width || truth.len() != height * width {
        return Err(Error::dim("boundary_f1", &[pred.len(), truth.len()], &[height, width]));
    }
    let bp = boundary_mask(pred, height, width);
    let bt = boundary_mask(truth, height, width);
    Ok(
        match (
            matched_fraction(&bp, &bt, height, width, radius),
            matched_fraction(&bt, &bp, height, width, radius),
        ) {
            (None, None) => 1.0,
            (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
            _ => 0.0,
        },
    )
}

/// Scores from one evaluation event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub iteration: usize,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub boundary_f1: f64,
}

/// Evaluation history of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub variant: String,
    pub seed: u64,
    pub evals: Vec<EvalMetrics>,
}

impl RunLog {
    pub fn final_eval(&self) -> Option<&EvalMetrics> {
        self.evals.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: usize,
    pub miou_mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub miou_std: f64,
    pub boundary_f1_mean: f64,
}

/// Variants in lexicographic order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<(String, u64, EvalMetrics)>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Summarizes the final evaluation of every run, grouped by variant.
pub fn compare_runs(logs: &[RunLog]) -> Result<AblationTable> {
    let mut errs = Vec::new();
    let schedule = |l: &RunLog| l.evals.iter().map(|e| e.iteration).collect::<Vec<_>>();
    let reference = logs.first().map(schedule).unwrap_or_default();
    for l in logs {
        if l.evals.is_empty() {
            errs.push(format!("{} seed {}: no evaluations", l.variant, l.seed));
        } else if schedule(l) != reference {
            errs.push(format!(
                "{} seed {}: eval schedule {:?} differs from {:?}",
                l.variant,
                l.seed,
                schedule(l),
                reference
            ));
        }
    }
    if logs.is_empty() {
        errs.push("no runs to compare".into());
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }

    let mut by_variant: BTreeMap<&str, Vec<(u64, &EvalMetrics)>> = BTreeMap::new();
    for l in logs {
        by_variant.entry(&l.variant).or_default().push((l.seed, l.final_eval().unwrap()));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (variant, mut entries) in by_variant {
        entries.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.miou.total_cmp(&b.1.miou)));
        let mious: Vec<f64> = entries.iter().map(|e| e.1.miou).collect();
        let bf1: Vec<f64> = entries.iter().map(|e| e.1.boundary_f1).collect();
        let (miou_mean, miou_std) = mean_std(&mious);
        rows.push(AblationRow {
            variant: variant.to_string(),
            runs: entries.len(),
            miou_mean,
            miou_std,
            boundary_f1_mean: mean_std(&bf1).0,
        });
        runs.extend(entries.into_iter().map(|(s, e)| (variant.to_string(), s, e.clone())));
    }
    Ok(AblationTable { rows, runs })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// One line per run; undefined IoU cells are empty.
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("variant,seed,iou_background,iou_crop,iou_weed,miou,boundary_f1\n");
        for (variant, seed, e) in &self.runs {
            let class = |c: usize| opt(e.iou.get(c).copied().flatten());
            writeln!(
                out,
                "{variant},{seed},{},{},{},{:.6},{:.6}",
                class(0),
                class(1),
                class(2),
                e.miou,
                e.boundary_f1
            )
            .unwrap();
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("variant,runs,miou_mean,miou_std,boundary_f1_mean\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                r.variant, r.runs, r.miou_mean, r.miou_std, r.boundary_f1_mean
            )
            .unwrap();
        }
        out
    }

    /// Percent-scaled aligned table.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let mut out = String::from("# mIoU averages classes with a nonempty union; mean ± sample std over seeds\n");
        writeln!(out, "{:<width$}  {:>4}  {:>16}  {:>11}", "variant", "runs", "mIoU", "boundary F1").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<width$}  {:>4}  {:>7.2} ± {:>6.2}  {:>11.2}",
                r.variant,
                r.runs,
                100.0 * r.miou_mean,
                100.0 * r.miou_std,
                100.0 * r.boundary_f1_mean
            )
            .unwrap();
        }
        out
    }
}
