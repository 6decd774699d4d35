//! Complementary block masks for RGB/depth inputs and their schedules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// Whole block-rows.
    Horizontal,
    /// Whole block-columns.
    Vertical,
    /// Independent `block × block` patches.
    Stochastic,
}

impl Geometry {
    pub const ALL: [Geometry; 3] = [Geometry::Horizontal, Geometry::Vertical, Geometry::Stochastic];
}

/// Which geometries a run may draw from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    None,
    StochasticOnly,
    VerticalOnly,
    HorizontalOnly,
    #[default]
    All,
}

impl MaskMode {
    pub fn geometries(self) -> &'static [Geometry] {
        match self {
            MaskMode::None => &[],
            MaskMode::StochasticOnly => &[Geometry::Stochastic],
            MaskMode::VerticalOnly => &[Geometry::Vertical],
            MaskMode::HorizontalOnly => &[Geometry::Horizontal],
            MaskMode::All => &Geometry::ALL,
        }
    }

    /// Uniform draw among the allowed geometries; `None` when masking is off.
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> Option<Geometry> {
        let g = self.geometries();
        if g.is_empty() {
            None
        } else {
            Some(g[rng.random_range(0..g.len())])
        }
    }
}

/// `h × w` grid of 0/1 values, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryGrid {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<u8>,
}

impl BinaryGrid {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            cells: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.cells[y * self.width + x]
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            cells: self.cells.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Fraction of zero (masked) cells.
    pub fn masked_fraction(&self) -> f64 {
        self.cells.iter().filter(|&&v| v == 0).count() as f64 / self.cells.len() as f64
    }
}

/// RGB/depth masks for one image; 1 = visible, 0 = masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub rgb: BinaryGrid,
    pub depth: BinaryGrid,
    pub geometry: Geometry,
    pub ratio: f64,
    pub block: usize,
}

/// Draws one mask. A block is hidden from RGB when `γ ≤ m_t` for
/// `γ ~ Uniform(0, 1]`; the depth mask is the exact complement.
pub fn sample_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    geometry: Geometry,
    ratio: f64,
    block: usize,
    rng: &mut R,
) -> Result<MaskPair> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::arg(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let divides = |n: usize| block > 0 && n % block == 0;
    let ok = match geometry {
        Geometry::Horizontal => divides(height),
        Geometry::Vertical => divides(width),
        Geometry::Stochastic => divides(height) && divides(width),
    };
    if !ok {
        return Err(Error::arg(format!(
            "block {block} does not tile a {height}x{width} image for {geometry:?} masking"
        )));
    }
    let mut hidden = || {
        let gamma = 1.0 - rng.random::<f64>();
        gamma <= ratio
    };
    let mut rgb = BinaryGrid::filled(height, width, 1);
    match geometry {
        Geometry::Horizontal => {
            for by in 0..height / block {
                if hidden() {
                    rgb.cells[by * block * width..(by + 1) * block * width].fill(0);
                }
            }
        }
        Geometry::Vertical => {
            for bx in 0..width / block {
                if hidden() {
                    for y in 0..height {
                        rgb.cells[y * width + bx * block..y * width + (bx + 1) * block].fill(0);
                    }
                }
            }
        }
        Geometry::Stochastic => {
            for by in 0..height / block {
                for bx in 0..width / block {
                    if hidden() {
                        for y in by * block..(by + 1) * block {
                            rgb.cells[y * width + bx * block..y * width + (bx + 1) * block].fill(0);
                        }
                    }
                }
            }
        }
    }
    let depth = rgb.complement();
    Ok(MaskPair {
        rgb,
        depth,
        geometry,
        ratio,
        block,
    })
}

/// Replaces masked pixels of an `[h, w, c]` image with the per-channel mean
/// of the masked region, leaving visible pixels untouched. The image mean is
/// preserved.
pub fn apply_mask<T: Scalar>(image: &Tensor<T>, mask: &BinaryGrid) -> Result<Tensor<T>> {
    let (h, w, c) = image.hwc()?;
    if (h, w) != (mask.height, mask.width) {
        return Err(Error::dim("apply_mask", image.shape(), &[mask.height, mask.width]));
    }
    let hidden = mask.cells.iter().filter(|&&v| v == 0).count();
    if hidden == 0 {
        return Ok(image.clone());
    }
    let mut fill = vec![T::zero(); c];
    for (px, &m) in image.data().chunks_exact(c).zip(&mask.cells) {
        if m == 0 {
            fill.iter_mut().zip(px).for_each(|(f, &v)| *f += v);
        }
    }
    let n = T::from_usize(hidden).unwrap();
    fill.iter_mut().for_each(|f| *f /= n);
    let mut out = image.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(c).zip(&mask.cells) {
        if m == 0 {
            px.copy_from_slice(&fill);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainPhase {
    Source,
    Target,
}

/// Time-dependent mask ratio and the source→target masking switch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub m_start: f64,
    pub m_end: f64,
    pub t_total: usize,
    pub warm_frac: f64,
    pub conf_threshold: f64,
    pub phase: DomainPhase,
}

impl MaskSchedule {
    pub fn new(t_total: usize) -> Self {
        Self {
            m_start: 0.15,
            m_end: 0.80,
            t_total,
            warm_frac: 0.1,
            conf_threshold: 0.9,
            phase: DomainPhase::Source,
        }
    }
}

/// `m_start` until `warm_frac · t_total`, then linear up to `m_end` at `t_total`.
pub fn ratio_at(t: usize, sched: &MaskSchedule) -> Result<f64> {
    if t > sched.t_total {
        return Err(Error::arg(format!("iteration {t} beyond schedule length {}", sched.t_total)));
    }
    let warm = sched.warm_frac * sched.t_total as f64;
    let t = t as f64;
    if t < warm {
        return Ok(sched.m_start);
    }
    let span = sched.t_total as f64 - warm;
    if span <= 0.0 {
        return Ok(sched.m_end);
    }
    Ok(sched.m_start + (sched.m_end - sched.m_start) * (t - warm) / span)
}

/// Latches the phase to `Target` once confidence reaches the threshold.
pub fn update_phase(confidence: f64, sched: &MaskSchedule) -> MaskSchedule {
    let mut next = *sched;
    if sched.phase == DomainPhase::Source && confidence >= sched.conf_threshold {
        next.phase = DomainPhase::Target;
    }
    next
}
