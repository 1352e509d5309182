//! `dauhst`: simulate, train, reconstruct, verify and score CASSI
//! reconstructions from the command line.
//!
//! Exit codes: 0 on success, 1 when inputs fail validation or the oracle
//! suite reports a failure, 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dauhst::cassi::{add_shot_noise, HsiCube, Mask, Measurement, SensingOperator};
use dauhst::metrics::{psnr, ssim};
use dauhst::model::Model;
use dauhst::train::{train, Precision, TrainConfig};
use dauhst::verify::{run_verification, Property, VerifyOptions, CAP_ENV};

#[derive(Parser, Debug)]
#[command(name = "dauhst", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a snapshot measurement from a spectral cube and a mask.
    Simulate(SimulateArgs),
    /// Reconstruct a cube from a measurement with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Train a model on synthetic scenes.
    Train(TrainArgs),
    /// Run the oracle suite and report the worst error per property.
    Verify(VerifyArgs),
    /// PSNR and SSIM between two cubes.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scene cube (HSC1, H×W×N).
    #[arg(long)]
    cube: PathBuf,
    /// Coded aperture (HSC1, H×W×1).
    #[arg(long)]
    mask: PathBuf,
    /// Dispersion step in pixels per band.
    #[arg(long, default_value_t = 1)]
    shift: usize,
    /// Add shot noise at this detector bit depth.
    #[arg(long)]
    noise_bits: Option<u32>,
    /// Seed for the noise draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measurement output (HSC1, H×Ŵ×1).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    measurement: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// `model.dta`; the sidecar `model.json` must sit next to it.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reconstructed cube (HSC1, H×W×N).
    #[arg(long)]
    out: PathBuf,
    /// Print the per-stage parameters as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Single => Precision::Single,
            PrecisionArg::Double => Precision::Double,
        }
    }
}

/// Every field overrides the config file, which overrides the defaults.
#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON file with any subset of the training configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint, mask and metrics log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    shift: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    scene_size: Option<usize>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
    #[arg(long)]
    mask_density: Option<f64>,
    #[arg(long)]
    noise_bits: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    /// Use one denoiser for every stage.
    #[arg(long)]
    share_denoiser_weights: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Instances per property instead of each property's default.
    #[arg(long)]
    instances: Option<usize>,
    /// Flip the sign of the projection update; the projection check must
    /// then fail.
    #[arg(long)]
    fault_inject: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    #[arg(long)]
    json: bool,
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!("{what} file {} does not exist", path.display());
    }
    Ok(())
}

/// The output's directory must exist and the path must not be a directory.
fn require_output(path: &Path) -> anyhow::Result<()> {
    if path.is_dir() {
        bail!("output {} is a directory", path.display());
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = parent {
        if !dir.is_dir() {
            bail!("output directory {} does not exist", dir.display());
        }
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> anyhow::Result<ExitCode> {
    require_file(&a.cube, "cube")?;
    require_file(&a.mask, "mask")?;
    require_output(&a.out)?;
    let cube = HsiCube::read(&a.cube)?;
    let mask = Mask::read(&a.mask)?;
    if (mask.height(), mask.width()) != (cube.height(), cube.width()) {
        bail!(
            "mask is {}x{} but the cube is {}x{}",
            mask.height(),
            mask.width(),
            cube.height(),
            cube.width()
        );
    }
    let op = SensingOperator::new(mask, cube.bands(), a.shift)?;
    let mut y = op.measure(&cube)?;
    if let Some(bits) = a.noise_bits {
        y = add_shot_noise(&y, bits, a.seed)?;
    }
    y.write(&a.out)?;
    println!("n = {}", op.measurement_len());
    println!(
        "wrote {}x{} measurement to {}",
        y.height(),
        y.width(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn reconstruct(a: ReconstructArgs) -> anyhow::Result<ExitCode> {
    require_file(&a.measurement, "measurement")?;
    require_file(&a.mask, "mask")?;
    require_file(&a.checkpoint, "checkpoint")?;
    require_output(&a.out)?;
    let y = Measurement::read(&a.measurement)?;
    let mask = Mask::read(&a.mask)?;
    let model = Model::load(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let op = SensingOperator::new(mask, model.config.bands, model.config.shift)?;
    model.config.check_operator(&op)?;
    if (y.height(), y.width()) != (op.height(), op.shifted_width()) {
        bail!(
            "measurement is {}x{} but the mask and checkpoint imply {}x{}",
            y.height(),
            y.width(),
            op.height(),
            op.shifted_width()
        );
    }
    let (x, params) = model.reconstruct(&y, &op)?;
    x.write(&a.out)?;
    if a.json {
        let stages: Vec<_> = params
            .alpha()
            .iter()
            .zip(params.beta())
            .map(|(a, b)| serde_json::json!({ "alpha": a, "beta": b }))
            .collect();
        println!("{}", serde_json::json!({ "stages": stages }));
    } else {
        for (k, (al, be)) in params.alpha().iter().zip(params.beta()).enumerate() {
            println!("stage {} alpha {al:.6e} beta {be:.6e}", k + 1);
        }
        let (h, w, n) = x.dims();
        println!("wrote {h}x{w}x{n} cube to {}", a.out.display());
    }
    Ok(ExitCode::SUCCESS)
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                require_file(path, "config")?;
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v.into();
                }
            )*};
        }
        apply!(
            stages,
            channels,
            window,
            shift,
            bands,
            epochs,
            lr,
            lr_min,
            batch_size,
            patch_size,
            scene_size,
            train_scenes,
            val_scenes,
            mask_density,
            seed,
            precision
        );
        if self.noise_bits.is_some() {
            cfg.noise_bits = self.noise_bits;
        }
        if self.share_denoiser_weights {
            cfg.share_denoiser_weights = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let cfg = a.resolve()?;
    if a.out.exists() && !a.out.is_dir() {
        bail!("output {} exists and is not a directory", a.out.display());
    }
    std::fs::create_dir_all(&a.out)?;
    let data = cfg.dataset()?;
    let outcome = train(&cfg, &data, Some(&a.out), |e| {
        println!(
            "epoch {:>3} loss {:.5} lr {:.2e} val psnr {:.2} dB ssim {:.4} (adjoint {:.2} dB) {:.1}s",
            e.epoch, e.loss, e.lr, e.val_psnr, e.val_ssim, e.val_baseline_psnr, e.wall_time
        );
    })?;
    println!(
        "wrote {}-stage checkpoint to {}",
        outcome.model.config.stages,
        a.out.join("model.dta").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let cap = match std::env::var(CAP_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{CAP_ENV} must be a positive integer, got {v:?}"))?,
        Err(_) => VerifyOptions::default().cap,
    };
    let opts = VerifyOptions {
        seed: a.seed,
        instances: a.instances,
        cap,
        fault_inject: a.fault_inject,
        properties: Property::ALL.to_vec(),
    };
    let report = run_verification(&opts)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for r in &report.results {
            let mut line = format!(
                "{} {:<34} instances {:>3}  worst {:.3e}  tol {:.0e}  {:.2}s",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.instances,
                r.worst_error,
                r.tolerance,
                r.seconds
            );
            if let Some(seed) = r.failing_seed {
                line.push_str(&format!("  failing seed {seed}"));
            }
            println!("{line}");
        }
        let passed = report.results.iter().filter(|r| r.passed).count();
        println!("{passed}/{} property groups passed", report.results.len());
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn metrics(a: MetricsArgs) -> anyhow::Result<ExitCode> {
    require_file(&a.pred, "prediction")?;
    require_file(&a.truth, "truth")?;
    let pred = HsiCube::read(&a.pred)?;
    let truth = HsiCube::read(&a.truth)?;
    let p = psnr(&pred, &truth, a.peak)?;
    let s = ssim(&pred, &truth)?;
    if a.json {
        println!("{}", serde_json::json!({ "psnr": p, "ssim": s }));
    } else {
        println!("PSNR {p:.4} dB");
        println!("SSIM {s:.4}");
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Train(a) => run_train(a),
        Command::Verify(a) => verify(a),
        Command::Metrics(a) => metrics(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}
