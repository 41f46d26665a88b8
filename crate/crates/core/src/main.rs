use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;

use faceparse::backbone::BackboneConfig;
use faceparse::decoder::DecoderConfig;
use faceparse::gradcheck;
use faceparse::metrics::{evaluate_dataset, EvalConfig};
use faceparse::pipeline::dataset::image_tensor;
use faceparse::pipeline::{load_dataset, predict_tta, prediction_path, train, TTAConfig, TrainConfig};
use faceparse::{Error, FaceParser, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "faceparse", version, about = "Video face parsing: train, predict, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Segment every manifest frame and write one mask PNG per frame.
    Predict {
        /// One or more checkpoints; several form an ensemble.
        #[arg(long, num_args = 1.., required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated test scales.
        #[arg(long, value_delimiter = ',', default_values_t = [0.75, 1.0, 1.25])]
        scales: Vec<f64>,
        /// Add horizontally mirrored passes.
        #[arg(long)]
        flip: bool,
        /// Class pair `a:b` exchanged on mirrored passes; repeatable.
        #[arg(long = "swap", value_parser = parse_swap)]
        swaps: Vec<(u8, u8)>,
    },
    /// Score predictions against a manifest's ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Also score the background class with J and F.
        #[arg(long)]
        include_background: bool,
        /// Boundary matching tolerance in pixels (default: 0.8% of the diagonal).
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

fn parse_swap(s: &str) -> std::result::Result<(u8, u8), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected `a:b`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<u8>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// `train --config` file. Relative paths resolve against the file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    manifest: PathBuf,
    output_dir: PathBuf,
    #[serde(default)]
    backbone: BackboneConfig,
    #[serde(default)]
    decoder: DecoderConfig,
    #[serde(default)]
    train: TrainConfig,
}

fn run_train(config: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| Error::Io { path: config.into(), source: e })?;
    let run: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json { path: config.into(), source: e })?;
    let base = config.parent().unwrap_or(Path::new("."));
    let model_cfg = ModelConfig { backbone: run.backbone, decoder: run.decoder };
    let ds = load_dataset(&base.join(&run.manifest))?;
    let outcome = train(&ds, &model_cfg, &run.train, &base.join(&run.output_dir))?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("steps {}  loss {:.4} -> {:.4}", outcome.losses.len(), first.loss, last.loss);
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    println!("loss curve {}", outcome.loss_curve_path.display());
    Ok(())
}

fn run_predict(checkpoints: &[PathBuf], manifest: &Path, out: &Path, tta: TTAConfig) -> Result<()> {
    let models = checkpoints.iter().map(|p| FaceParser::load(p)).collect::<Result<Vec<_>>>()?;
    let ds = load_dataset(manifest)?;
    let mut written = 0;
    for (video, frame) in ds.frames() {
        let (mask, _) = predict_tta(&image_tensor(&frame.image)?, &models, &tta)?;
        let path = prediction_path(out, &video.id, &frame.image_path);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
        }
        mask.write_png(&path)?;
        written += 1;
    }
    println!("wrote {written} masks under {}", out.display());
    Ok(())
}

fn run_evaluate(pred: &Path, manifest: &Path, report: &Path, cfg: EvalConfig) -> Result<()> {
    let ds = load_dataset(manifest)?;
    let cfg = EvalConfig { num_classes: ds.num_classes(), ..cfg };
    let r = evaluate_dataset(pred, &ds, &cfg)?;
    r.write_json(report)?;
    println!(
        "mIoU {:.4}  J&F {:.4}  J-decay {:.4}  F-decay {:.4}",
        r.miou, r.jf_mean, r.j_decay, r.f_decay
    );
    Ok(())
}

fn run_gradcheck(seed: u64, seeds: usize) -> Result<bool> {
    let suite = gradcheck::run_suite(seed, seeds)?;
    for c in &suite.checks {
        println!(
            "{:<36} {:>5} probes ({:>3} non-smooth)  max rel err {:.3e}  {}",
            c.name,
            c.probes,
            c.non_smooth,
            c.max_rel_err,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    println!(
        "max relative error {:.3e} over {} seeds in {:.1?}",
        suite.max_rel_err(),
        seeds,
        suite.elapsed
    );
    Ok(suite.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config } => run_train(&config).map(|_| true),
        Command::Predict { checkpoint, manifest, out, scales, flip, swaps } => {
            let tta = TTAConfig { scales, hflip: flip, flip_label_swaps: swaps, checkpoints: checkpoint.clone() };
            run_predict(&checkpoint, &manifest, &out, tta).map(|_| true)
        }
        Command::Evaluate { pred, manifest, report, include_background, tolerance } => {
            let cfg = EvalConfig { include_background, boundary_tolerance: tolerance, ..Default::default() };
            run_evaluate(&pred, &manifest, &report, cfg).map(|_| true)
        }
        Command::Gradcheck { seed, seeds } => run_gradcheck(seed, seeds),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
