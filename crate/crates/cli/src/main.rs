use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use maskadapt::ablation::{run_ablation, thread_budget, Variant};
use maskadapt::config::{describe_keys, RunConfig};
use maskadapt::depth_features::depth_gradient;
use maskadapt::masking::{apply_mask, sample_mask, BinaryGrid, Geometry};
use maskadapt::synthdata::pnm::Pnm;
use maskadapt::synthdata::{generate, read_dataset, write_dataset, SceneSample};
use maskadapt::uda::{
    evaluate, load_checkpoint, run_training, segment, stage_settings, Datasets, InputPair, RunOptions, Splits, Stage,
};
use maskadapt::{Error, Graph, Result, Tensor, IGNORE_INDEX};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "maskadapt", version, about = "RGB-D crop/weed segmentation with depth-guided fusion and masked domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the source, target and validation datasets.
    Generate,
    /// Train and write checkpoints plus metric logs.
    Train {
        /// Continue from an adaptation-stage checkpoint.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory (default: the validation split of its config).
    Eval {
        /// Checkpoint written by `train`; its embedded config is used.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Dataset directory written by `generate`; default: the validation split of the checkpoint's config.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Train every variant for every seed and tabulate final mIoU.
    Ablate {
        /// Comma-separated: full, source_only, no_fusion, no_gradients, stochastic_only,
        /// vertical_only, horizontal_only, no_masking, source_masking, target_masking.
        #[arg(long, value_delimiter = ',', default_value = "no_fusion,no_gradients,full")]
        variants: Vec<String>,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Write inputs, masks, depth-gradient maps and predictions as netpbm images.
    Render {
        /// Adds prediction images from this checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory; default: the validation split of the config.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Number of frames, taken from the start of the dataset.
        #[arg(long, default_value_t = 4)]
        samples: usize,
        /// stochastic | vertical | horizontal
        #[arg(long, default_value = "stochastic")]
        geometry: String,
        /// Masked fraction of RGB; 0 leaves the RGB image unmodified.
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
    },
}

/// `kind` tag of the one-line error report.
fn kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension { .. } => "dimension",
        Error::Argument(_) => "argument",
        Error::Config(_) => "config",
        Error::Contract(_) => "contract",
        Error::Validation(_) => "validation",
        Error::Parse { .. } => "parse",
        Error::NonFinite { .. } => "non_finite",
        Error::EmptyEvaluation => "empty_evaluation",
        Error::Io { .. } => "io",
        Error::Json { .. } => "json",
    }
}

fn one_line(e: &Error) -> String {
    let message = match e {
        Error::Validation(v) => v.join("; "),
        other => other.to_string().split_whitespace().collect::<Vec<_>>().join(" "),
    };
    format!("error[{}]: {message}", kind(e))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    if cfg.data.uses_directories() {
        return Err(Error::Config("generate needs domain specs, not dataset directories".into()));
    }
    let splits = Splits::from_config(cfg)?;
    let (source, target) = cfg.data.domains();
    let [s, t, v] = cfg.data.split_seeds();
    for (name, spec, seed, scenes) in [
        ("source", &source, s, &splits.source),
        ("target", &target, t, &splits.target),
        ("val", &target, v, &splits.val),
    ] {
        let dir = cfg.output_dir.join(name);
        write_dataset(&dir, spec, seed, scenes)?;
        println!("{name}\t{}\t{}", scenes.len(), dir.display());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let data = Datasets::<f32>::from_config(cfg)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let out = run_training(
        cfg,
        &data,
        RunOptions {
            out_dir: Some(&cfg.output_dir),
            resume,
            pretrained: None,
        },
    )?;
    if let Some(e) = out.evals.last() {
        println!("{}", json!({"iteration": e.iteration, "miou": e.miou, "boundary_f1": e.boundary_f1}));
    }
    Ok(())
}

fn frames(samples: &[SceneSample], gradient_channel: bool) -> Result<(Vec<InputPair<f32>>, Vec<Vec<u8>>)> {
    let inputs = samples
        .iter()
        .map(|s| InputPair::from_sample(s, gradient_channel))
        .collect::<Result<Vec<_>>>()?;
    Ok((inputs, samples.iter().map(|s| s.labels.clone()).collect()))
}

/// Validation scenes of `cfg`, or the scenes stored in `dir`.
fn scenes(cfg: &RunConfig, dir: Option<&Path>, limit: Option<usize>) -> Result<Vec<SceneSample>> {
    let mut out = match dir {
        Some(d) => read_dataset(d)?.1,
        None if cfg.data.val_dir.is_some() => read_dataset(cfg.data.val_dir.as_deref().unwrap())?.1,
        None => {
            let n = limit.unwrap_or(cfg.data.target_val).min(cfg.data.target_val);
            generate(&cfg.data.domains().1, n, cfg.data.split_seeds()[2])?
        }
    };
    if let Some(n) = limit {
        out.truncate(n);
    }
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = ckpt.eval_params::<f32>();
    let scenes = scenes(&ckpt.config, data, None)?;
    let (inputs, labels) = frames(&scenes, ckpt.config.model.depth_map_gradient_input)?;
    let (settings, _, _) = stage_settings(&ckpt.config, Stage::Adapt);
    let (iou, bf1) = evaluate(&model, &inputs, &labels, &settings, ckpt.config.train.boundary_radius)?;
    let report = json!({
        "checkpoint": checkpoint,
        "iteration": ckpt.state.t,
        "frames": inputs.len(),
        "iou": iou.per_class,
        "miou": iou.miou,
        "boundary_f1": bf1,
    });
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write(&cfg.output_dir.join("eval_report.json"), format!("{report}\n"))?;
    println!("{report}");
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, variants: &[String], seeds: &[u64]) -> Result<()> {
    let variants = variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?;
    let data = Datasets::<f32>::from_config(cfg)?;
    let (_, table) = run_ablation(cfg, &data, &variants, seeds, Some(&cfg.output_dir), thread_budget()?)?;
    print!("{}", table.to_text());
    Ok(())
}

const PALETTE: [[u16; 3]; 3] = [[121, 85, 61], [46, 170, 64], [214, 52, 118]];

fn raster(w: usize, h: usize, channels: usize, samples: Vec<u16>) -> Pnm {
    Pnm {
        width: w,
        height: h,
        channels,
        maxval: 255,
        samples,
    }
}

fn to_byte(v: f32) -> u16 {
    (v as f64 * 255.0).round().clamp(0.0, 255.0) as u16
}

/// Min–max stretch to 8 bits; a constant map renders black.
fn stretch(values: &[f32]) -> Vec<u16> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().map(|&v| to_byte((v - lo) / span)).collect()
}

fn labels_image(w: usize, h: usize, labels: &[u8]) -> Pnm {
    let samples = labels
        .iter()
        .flat_map(|&l| if l == IGNORE_INDEX { [0; 3] } else { PALETTE[l as usize % 3] })
        .collect();
    raster(w, h, 3, samples)
}

fn mask_image(m: &BinaryGrid) -> Pnm {
    raster(m.width, m.height, 1, m.cells.iter().map(|&c| c as u16 * 255).collect())
}

fn cmd_render(cfg: &RunConfig, checkpoint: Option<&Path>, data: Option<&Path>, n: usize, geometry: &str, ratio: f64) -> Result<()> {
    let geometry = match geometry {
        "stochastic" => Geometry::Stochastic,
        "vertical" => Geometry::Vertical,
        "horizontal" => Geometry::Horizontal,
        g => return Err(Error::Argument(format!("unknown geometry {g:?}; expected stochastic | vertical | horizontal"))),
    };
    let ckpt = checkpoint.map(load_checkpoint).transpose()?;
    let run_cfg = ckpt.as_ref().map_or(cfg, |c| &c.config);
    let scenes = scenes(run_cfg, data, Some(n))?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (i, s) in scenes.iter().enumerate() {
        let (h, w) = (s.height(), s.width());
        let path = |name: &str| out.join(format!("{i:03}_{name}"));
        let rgb = raster(w, h, 3, s.rgb.data().iter().map(|&v| to_byte(v)).collect());
        rgb.write(&path("rgb.ppm"))?;
        raster(w, h, 1, stretch(s.depth.data())).write(&path("depth.pgm"))?;
        let mut g = Graph::<f32>::new();
        let d = g.constant(s.depth.clone());
        let grad = depth_gradient(&mut g, d)?;
        raster(w, h, 1, stretch(g.value(grad.0).data())).write(&path("depth_gradient.pgm"))?;
        labels_image(w, h, &s.labels).write(&path("labels.ppm"))?;

        let mask = sample_mask(h, w, geometry, ratio, cfg.masking.block_size, &mut rng)?;
        mask_image(&mask.rgb).write(&path("mask_rgb.pgm"))?;
        mask_image(&mask.depth).write(&path("mask_depth.pgm"))?;
        // quantize first so an all-visible mask reproduces rgb.ppm byte for byte
        let quantized: Tensor<f32> = s.rgb.map(|v| to_byte(v) as f32 / 255.0);
        let masked = apply_mask(&quantized, &mask.rgb)?;
        raster(w, h, 3, masked.data().iter().map(|&v| to_byte(v)).collect()).write(&path("masked_rgb.ppm"))?;

        if let Some(c) = &ckpt {
            let (settings, _, _) = stage_settings(&c.config, Stage::Adapt);
            let frame = InputPair::<f32>::from_sample(s, c.config.model.depth_map_gradient_input)?;
            let pred = segment(&c.eval_params::<f32>(), &frame, &settings)?;
            labels_image(w, h, &pred).write(&path("prediction.ppm"))?;
        }
    }
    println!("{}\t{}", scenes.len(), out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train { resume } => cmd_train(&cfg, resume.as_deref()),
        Command::Eval { checkpoint, data } => cmd_eval(&cfg, checkpoint, data.as_deref()),
        Command::Ablate { variants, seeds } => cmd_ablate(&cfg, variants, seeds),
        Command::Render {
            checkpoint,
            data,
            samples,
            geometry,
            ratio,
        } => cmd_render(&cfg, checkpoint.as_deref(), data.as_deref(), *samples, geometry, *ratio),
    }
}

fn main() -> ExitCode {
    let command = Cli::command().after_help(format!("Config keys (JSON, strict; unknown keys are rejected):\n{}", describe_keys()));
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
