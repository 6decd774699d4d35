//! Procedural crop-row scenes with exact labels.
//!
//! A scene is a tilted soil plane with textured soil, rows of round crop
//! plants and irregular weed clumps. Crops and weeds share a base hue and
//! nearly the same height, so they are told apart by shape and row layout;
//! depth jumps sharply at every plant boundary. Each [`DomainSpec`] fixes
//! one field/camera/growth-stage condition.

mod io;
pub mod pnm;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use io::{read_dataset, write_dataset, DatasetManifest, DEPTH_SCALE_M};

pub const CLASS_NAMES: [&str; 3] = ["background", "crop", "weed"];
pub const SOIL: u8 = 0;
pub const CROP: u8 = 1;
pub const WEED: u8 = 2;

/// One labelled RGB-D example.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[H, W, 3]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `[H, W, 1]` camera-to-surface distance in meters.
    pub depth: Tensor<f32>,
    /// Row-major class ids, `H * W` entries.
    pub labels: Vec<u8>,
    pub domain: String,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }
}

/// Parameters of one acquisition domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub name: String,
    pub height: usize,
    pub width: usize,
    /// Row direction, degrees from the image x axis.
    pub row_orientation_deg: f64,
    pub row_spacing_px: f64,
    pub plant_radius_px: f64,
    pub plant_radius_std_px: f64,
    /// Expected weed clumps per 1000 pixels.
    pub weed_density: f64,
    pub soil_texture_amplitude: f64,
    /// Global brightness multiplier.
    pub illumination: f64,
    pub hue_shift_deg: f64,
    pub depth_noise_m: f64,
    /// Probability that a weed grows against a crop plant.
    pub occlusion_prob: f64,
    pub camera_height_m: f64,
    pub crop_height_m: f64,
    /// Weeds are up to this much lower than crops.
    pub weed_height_delta_m: f64,
}

/// Field name, valid range, accessor. Also drives [`domain_gap`].
type Axis = (&'static str, f64, f64, fn(&DomainSpec) -> f64);

pub const AXES: [Axis; 13] = [
    ("row_orientation_deg", -90.0, 90.0, |s| s.row_orientation_deg),
    ("row_spacing_px", 8.0, 48.0, |s| s.row_spacing_px),
    ("plant_radius_px", 1.5, 8.0, |s| s.plant_radius_px),
    ("plant_radius_std_px", 0.0, 3.0, |s| s.plant_radius_std_px),
    ("weed_density", 0.0, 5.0, |s| s.weed_density),
    ("soil_texture_amplitude", 0.0, 0.5, |s| s.soil_texture_amplitude),
    ("illumination", 0.3, 1.6, |s| s.illumination),
    ("hue_shift_deg", -180.0, 180.0, |s| s.hue_shift_deg),
    ("depth_noise_m", 0.0, 0.02, |s| s.depth_noise_m),
    ("occlusion_prob", 0.0, 1.0, |s| s.occlusion_prob),
    ("camera_height_m", 0.5, 3.0, |s| s.camera_height_m),
    ("crop_height_m", 0.02, 0.3, |s| s.crop_height_m),
    ("weed_height_delta_m", 0.0, 0.1, |s| s.weed_height_delta_m),
];

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: "source".into(),
            height: 64,
            width: 64,
            row_orientation_deg: 0.0,
            row_spacing_px: 16.0,
            plant_radius_px: 3.0,
            plant_radius_std_px: 0.4,
            weed_density: 3.0,
            soil_texture_amplitude: 0.12,
            illumination: 1.0,
            hue_shift_deg: 0.0,
            depth_noise_m: 0.003,
            occlusion_prob: 0.4,
            camera_height_m: 1.0,
            crop_height_m: 0.10,
            weed_height_delta_m: 0.03,
        }
    }
}

impl DomainSpec {
    /// Every out-of-range field, one message each.
    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = AXES
            .iter()
            .filter_map(|&(name, lo, hi, get)| {
                let v = get(self);
                (!(lo..=hi).contains(&v)).then(|| format!("{}.{name} = {v} outside [{lo}, {hi}]", self.name))
            })
            .collect();
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v < 8 || v % 8 != 0 || v > 1024 {
                errs.push(format!("{}.{name} = {v} must be a multiple of 8 in [8, 1024]", self.name));
            }
        }
        if self.name.is_empty() {
            errs.push("domain name must not be empty".into());
        }
        errs
    }
}

/// Named source/target pairs with increasing domain shift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    Small,
    Medium,
    Large,
}

pub fn benchmark_pair(shift: Shift) -> (DomainSpec, DomainSpec) {
    let source = DomainSpec::default();
    let mut target = DomainSpec {
        name: "target".into(),
        ..source.clone()
    };
    match shift {
        Shift::Small => {
            target.illumination = 0.9;
            target.hue_shift_deg = 10.0;
            target.row_orientation_deg = 5.0;
        }
        Shift::Medium => {
            target.illumination = 0.75;
            target.hue_shift_deg = 35.0;
            target.soil_texture_amplitude = 0.22;
            target.row_orientation_deg = 15.0;
            target.plant_radius_px = 3.5;
            target.camera_height_m = 1.3;
            target.depth_noise_m = 0.005;
        }
        Shift::Large => {
            target.illumination = 0.6;
            target.hue_shift_deg = 60.0;
            target.soil_texture_amplitude = 0.3;
            target.row_orientation_deg = 30.0;
            target.row_spacing_px = 20.0;
            target.plant_radius_px = 4.0;
            target.camera_height_m = 1.6;
            target.depth_noise_m = 0.008;
        }
    }
    (source, target)
}

/// Per-axis `|a - b| / range` for every numeric domain parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GapReport {
    pub axes: Vec<(&'static str, f64)>,
}

impl GapReport {
    pub fn nonzero_axes(&self) -> usize {
        self.axes.iter().filter(|(_, v)| *v != 0.0).count()
    }

    pub fn get(&self, axis: &str) -> Option<f64> {
        self.axes.iter().find(|(n, _)| *n == axis).map(|&(_, v)| v)
    }
}

pub fn domain_gap(a: &DomainSpec, b: &DomainSpec) -> GapReport {
    GapReport {
        axes: AXES
            .iter()
            .map(|&(name, lo, hi, get)| (name, (get(a) - get(b)).abs() / (hi - lo)))
            .collect(),
    }
}

/// Seeded stream for sample `index` of a generation run.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Smooth noise in `[-1, 1]`: bilinear interpolation of a random lattice.
struct ValueNoise {
    grid: Vec<f64>,
    cells: usize,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = cells + 1;
        Self {
            grid: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            cells,
        }
    }

    /// `u`, `v` in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> f64 {
        let n = self.cells + 1;
        let (fx, fy) = (u * self.cells as f64, v * self.cells as f64);
        let (x0, y0) = ((fx as usize).min(self.cells - 1), (fy as usize).min(self.cells - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let g = |x: usize, y: usize| self.grid[y * n + x];
        let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
        let bottom = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

struct Disc {
    x: f64,
    y: f64,
    r: f64,
    height: f64,
}

impl Disc {
    /// Relative height in `[0.85, 1]` inside the disc, `None` outside.
    fn profile(&self, px: f64, py: f64) -> Option<f64> {
        let d2 = (px - self.x).powi(2) + (py - self.y).powi(2);
        let r2 = self.r * self.r;
        (d2 <= r2).then(|| 0.85 + 0.15 * (1.0 - d2 / r2).sqrt())
    }
}

/// Rotates hue in YIQ space.
fn hue_rotate(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    if degrees == 0.0 {
        return rgb;
    }
    let [r, g, b] = rgb;
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let i = 0.596 * r - 0.274 * g - 0.322 * b;
    let q = 0.211 * r - 0.523 * g + 0.312 * b;
    let (s, c) = (degrees * PI / 180.0).sin_cos();
    let (i, q) = (i * c - q * s, i * s + q * c);
    [
        y + 0.956 * i + 0.621 * q,
        y - 0.272 * i - 0.647 * q,
        y - 1.106 * i + 1.703 * q,
    ]
}

const SOIL_RGB: [f64; 3] = [0.50, 0.38, 0.26];
const CROP_RGB: [f64; 3] = [0.24, 0.54, 0.18];
const WEED_RGB: [f64; 3] = [0.27, 0.52, 0.20];
const GROUND_TILT_M: f64 = 0.01;
const PIXEL_NOISE: f64 = 0.01;

fn render(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> SceneSample {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);

    // crops along rows
    let theta = (spec.row_orientation_deg + rng.random_range(-3.0..3.0)) * PI / 180.0;
    let dir = (theta.cos(), theta.sin());
    let normal = (-theta.sin(), theta.cos());
    let (cx, cy) = (wf / 2.0, hf / 2.0);
    let reach = (hf.hypot(wf) / 2.0) + spec.plant_radius_px * 2.0;
    let spacing = spec.row_spacing_px;
    let offset = rng.random_range(0.0..spacing);
    let radius = Normal::new(spec.plant_radius_px, spec.plant_radius_std_px.max(1e-9)).unwrap();
    let mut crops = Vec::new();
    let rows = (reach / spacing).ceil() as i64 + 1;
    for k in -rows..=rows {
        let across = k as f64 * spacing + offset - spacing / 2.0;
        let step = 2.8 * spec.plant_radius_px * rng.random_range(0.9..1.1);
        let mut along = -reach + rng.random_range(0.0..step);
        while along < reach {
            let r = radius.sample(rng).clamp(1.2, spec.plant_radius_px * 2.0);
            let x = cx + normal.0 * across + dir.0 * along + rng.random_range(-0.6..0.6);
            let y = cy + normal.1 * across + dir.1 * along + rng.random_range(-0.6..0.6);
            if x > -r && x < wf + r && y > -r && y < hf + r {
                crops.push(Disc {
                    x,
                    y,
                    r,
                    height: spec.crop_height_m * rng.random_range(0.95..1.05),
                });
            }
            along += step * rng.random_range(0.85..1.15);
        }
    }

    // weed clumps: a few small overlapping lobes each
    let mut weeds = Vec::new();
    let expected = spec.weed_density * hf * wf / 1000.0;
    let count = if expected > 0.0 {
        Poisson::new(expected).unwrap().sample(rng) as usize
    } else {
        0
    };
    for _ in 0..count {
        let lobe_r = spec.plant_radius_px * rng.random_range(0.45..0.6);
        let (x, y) = if !crops.is_empty() && rng.random::<f64>() < spec.occlusion_prob {
            let c = &crops[rng.random_range(0..crops.len())];
            let a = rng.random_range(0.0..2.0 * PI);
            let d = c.r + lobe_r * 0.6;
            (c.x + d * a.cos(), c.y + d * a.sin())
        } else {
            (rng.random_range(0.0..wf), rng.random_range(0.0..hf))
        };
        let height = (spec.crop_height_m - rng.random_range(0.0..=spec.weed_height_delta_m)).max(0.005);
        let lobes = rng.random_range(3..=5);
        for _ in 0..lobes {
            let a = rng.random_range(0.0..2.0 * PI);
            let d = lobe_r * rng.random_range(0.5..1.3);
            weeds.push(Disc {
                x: x + d * a.cos(),
                y: y + d * a.sin(),
                r: lobe_r * rng.random_range(0.6..1.0),
                height,
            });
        }
    }

    let soil_coarse = ValueNoise::new(rng, 4);
    let soil_fine = ValueNoise::new(rng, 16);
    let ground = ValueNoise::new(rng, 3);
    let leaf = ValueNoise::new(rng, 24);
    let depth_noise = Normal::new(0.0, spec.depth_noise_m.max(1e-12)).unwrap();
    let pixel_noise = Normal::new(0.0, PIXEL_NOISE).unwrap();

    let mut rgb = vec![0f32; h * w * 3];
    let mut depth = vec![0f32; h * w];
    let mut labels = vec![SOIL; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (u, v) = (px / wf, py / hf);
            let soil_depth =
                spec.camera_height_m + GROUND_TILT_M * (v - 0.5) + 0.003 * ground.at(u, v);

            let hit = |discs: &[Disc]| {
                discs
                    .iter()
                    .filter_map(|d| d.profile(px, py).map(|p| (p * d.height, p)))
                    .fold(None, |acc: Option<(f64, f64)>, z| Some(acc.map_or(z, |a| if z.0 > a.0 { z } else { a })))
            };
            let ((lift, profile), label, base) = if let Some(z) = hit(&weeds) {
                (z, WEED, WEED_RGB)
            } else if let Some(z) = hit(&crops) {
                (z, CROP, CROP_RGB)
            } else {
                ((0.0, 0.0), SOIL, SOIL_RGB)
            };

            let shade = if label == SOIL {
                1.0 + spec.soil_texture_amplitude * (0.6 * soil_coarse.at(u, v) + 0.4 * soil_fine.at(u, v))
            } else {
                // canopy tops catch more light
                0.85 + 1.2 * (profile - 0.85) + 0.08 * leaf.at(u, v)
            };
            let color = hue_rotate(base.map(|c| c * shade), spec.hue_shift_deg);
            let i = y * w + x;
            for (c, &val) in color.iter().enumerate() {
                let v = val * spec.illumination + pixel_noise.sample(rng);
                rgb[i * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
            let d = soil_depth - lift + depth_noise.sample(rng);
            depth[i] = d.max(0.01) as f32;
            labels[i] = label;
        }
    }

    SceneSample {
        rgb: Tensor::new(vec![h, w, 3], rgb).unwrap(),
        depth: Tensor::new(vec![h, w, 1], depth).unwrap(),
        labels,
        domain: spec.name.clone(),
    }
}

/// `n` scenes, each a pure function of `(spec, seed, index)`.
pub fn generate(spec: &DomainSpec, n: usize, seed: u64) -> Result<Vec<SceneSample>> {
    let mut errs = spec.validate();
    if n == 0 {
        errs.push("sample count must be at least 1".into());
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    Ok((0..n).map(|i| render(spec, &mut sample_rng(seed, i))).collect())
}

/// Fraction of soil/crop/weed pixels over a set of scenes.
pub fn class_shares(samples: &[SceneSample]) -> [f64; 3] {
    let mut counts = [0usize; 3];
    let mut total = 0;
    for s in samples {
        for &l in &s.labels {
            counts[l as usize] += 1;
        }
        total += s.labels.len();
    }
    counts.map(|c| c as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = DomainSpec::default();
        let a = generate(&spec, 3, 9).unwrap();
        let b = generate(&spec, 3, 9).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 3, 10).unwrap();
        assert_ne!(a[0].labels, c[0].labels);
    }

    #[test]
    fn no_weeds_at_zero_density() {
        let spec = DomainSpec {
            weed_density: 0.0,
            ..DomainSpec::default()
        };
        for s in generate(&spec, 20, 1).unwrap() {
            assert!(!s.labels.contains(&WEED));
        }
    }

    #[test]
    fn validation_lists_every_field() {
        let spec = DomainSpec {
            illumination: 9.0,
            occlusion_prob: -1.0,
            height: 60,
            ..DomainSpec::default()
        };
        match generate(&spec, 1, 0) {
            Err(Error::Validation(errs)) => assert_eq!(errs.len(), 3, "{errs:?}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn gap_axes() {
        let (a, _) = benchmark_pair(Shift::Medium);
        assert_eq!(domain_gap(&a, &a).nonzero_axes(), 0);
        let b = DomainSpec {
            hue_shift_deg: 20.0,
            ..a.clone()
        };
        let gap = domain_gap(&a, &b);
        assert_eq!(gap.nonzero_axes(), 1);
        assert!(gap.get("hue_shift_deg").unwrap() > 0.0);
    }

    #[test]
    fn hue_rotation_is_identity_at_zero_and_full_turn() {
        let c = [0.3, 0.5, 0.2];
        assert_eq!(hue_rotate(c, 0.0), c);
        let full = hue_rotate(c, 360.0);
        for (a, b) in full.iter().zip(c) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
