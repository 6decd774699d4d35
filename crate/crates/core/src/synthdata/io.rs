use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::Pnm;
use super::{DomainSpec, SceneSample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Meters per unit of the 16-bit depth rasters.
pub const DEPTH_SCALE_M: f64 = 1e-4;

const FORMAT: &str = "maskadapt-dataset";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleFiles {
    pub rgb: String,
    pub depth: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub depth_scale_m: f64,
    pub classes: Vec<String>,
    pub seed: u64,
    pub domain: DomainSpec,
    pub samples: Vec<SampleFiles>,
}

fn quantize(v: f32, scale: f64) -> u16 {
    (v as f64 * scale).round().clamp(0.0, scale) as u16
}

/// Writes `manifest.json` and three rasters per sample into `dir`.
pub fn write_dataset(dir: &Path, domain: &DomainSpec, seed: u64, samples: &[SceneSample]) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = (s.height(), s.width());
        let entry = SampleFiles {
            rgb: format!("{i:05}_rgb.ppm"),
            depth: format!("{i:05}_depth.pgm"),
            labels: format!("{i:05}_labels.pgm"),
        };
        let raster = |channels, maxval, samples| Pnm {
            width: w,
            height: h,
            channels,
            maxval,
            samples,
        };
        raster(3, 255, s.rgb.data().iter().map(|&v| quantize(v, 255.0)).collect()).write(&dir.join(&entry.rgb))?;
        raster(
            1,
            u16::MAX,
            s.depth
                .data()
                .iter()
                .map(|&v| (v as f64 / DEPTH_SCALE_M).round().clamp(0.0, u16::MAX as f64) as u16)
                .collect(),
        )
        .write(&dir.join(&entry.depth))?;
        raster(1, 255, s.labels.iter().map(|&l| l as u16).collect()).write(&dir.join(&entry.labels))?;
        files.push(entry);
    }
    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: VERSION,
        height: domain.height,
        width: domain.width,
        depth_scale_m: DEPTH_SCALE_M,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        seed,
        domain: domain.clone(),
        samples: files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn expect_shape(img: &Pnm, path: &Path, manifest: &DatasetManifest, channels: usize) -> Result<()> {
    if (img.height, img.width, img.channels) != (manifest.height, manifest.width, channels) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: format!(
                "raster is {}x{}x{}, manifest expects {}x{}x{channels}",
                img.height, img.width, img.channels, manifest.height, manifest.width
            ),
        });
    }
    Ok(())
}

/// Reads every sample listed in `dir/manifest.json`. Any malformed file
/// fails the whole read.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported dataset format {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let k = manifest.classes.len() as u16;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let at = |name: &str| -> PathBuf { dir.join(name) };
        let (rp, dp, lp) = (at(&entry.rgb), at(&entry.depth), at(&entry.labels));
        let rgb = Pnm::read(&rp)?;
        expect_shape(&rgb, &rp, &manifest, 3)?;
        let depth = Pnm::read(&dp)?;
        expect_shape(&depth, &dp, &manifest, 1)?;
        let labels = Pnm::read(&lp)?;
        expect_shape(&labels, &lp, &manifest, 1)?;
        if let Some(i) = labels.samples.iter().position(|&l| l >= k && l != 255) {
            return Err(Error::Parse {
                path: lp,
                offset: labels.encode().len() - labels.samples.len() + i,
                message: format!("label {} is not a class id", labels.samples[i]),
            });
        }
        let (h, w) = (manifest.height, manifest.width);
        let rmax = rgb.maxval as f32;
        samples.push(SceneSample {
            rgb: Tensor::new(vec![h, w, 3], rgb.samples.iter().map(|&v| v as f32 / rmax).collect())?,
            depth: Tensor::new(
                vec![h, w, 1],
                depth
                    .samples
                    .iter()
                    .map(|&v| (v as f64 * manifest.depth_scale_m) as f32)
                    .collect(),
            )?,
            labels: labels.samples.iter().map(|&l| l as u8).collect(),
            domain: manifest.domain.name.clone(),
        });
    }
    Ok((manifest, samples))
}
