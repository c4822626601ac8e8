//! Batch front end for the plunet engine: cost tables, training runs,
//! evaluation, single-image prediction, gradient checks, and synthetic
//! dataset generation. One command per process; `PLUNET_THREADS=0`
//! (the default) keeps every run single-threaded and deterministic.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use plunet::analysis;
use plunet::arch::{ArchConfig, Model, Variant};
use plunet::codec;
use plunet::data;
use plunet::gradcheck;
use plunet::metrics;
use plunet::tensor::{dims, Dims, Tensor};
use plunet::train::{self, TrainConfig, TrainOutcome};

#[derive(Parser)]
#[command(name = "plunet", version, about = "Segmentation networks on a desk: describe, train, eval, predict")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-stage parameter and FLOP accounting
    Describe(DescribeArgs),
    /// Train from a JSON config, writing checkpoints and a log
    Train(TrainArgs),
    /// Score a checkpoint against a dataset directory
    Eval(EvalArgs),
    /// Run one image through a checkpoint and write the mask
    Predict(PredictArgs),
    /// Compare analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic PPM/PGM dataset
    Synth(SynthArgs),
}

#[derive(Args)]
struct DescribeArgs {
    /// Preset name: unet, lunet, punet, plunet
    #[arg(long)]
    arch: Option<String>,
    /// Architecture config JSON file (overrides --arch)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input dims as N,C,H,W
    #[arg(long, default_value = "1,3,96,96")]
    input: String,
    /// Emit JSON instead of a table
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON file
    #[arg(long)]
    config: PathBuf,
    /// Resume from this checkpoint
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Override the configured epoch count
    #[arg(long)]
    epochs: Option<u32>,
    /// Override the configured batch size
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Emit the run summary as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of <id>.ppm / <id>_mask.pgm pairs
    #[arg(long)]
    data: PathBuf,
    /// Binarization threshold
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Emit JSON instead of text
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Input image (binary PPM, 8-bit RGB)
    image: PathBuf,
    /// Checkpoint holding the weights
    #[arg(long)]
    ckpt: PathBuf,
    /// Output mask path (default: <image>_pred.pgm next to the input)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Binarization threshold
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Single op or block name (see --all for the full list)
    #[arg(conflicts_with = "all")]
    target: Option<String>,
    /// Check every op and block
    #[arg(long)]
    all: bool,
    /// Derive fresh check problems from this seed (0 = pinned fixtures)
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Emit JSON instead of text
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of image/mask pairs
    #[arg(long)]
    count: usize,
    /// Frame size as H,W
    #[arg(long, default_value = "64,64")]
    size: String,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    plunet::runtime::init_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Describe(args) => describe(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Predict(args) => predict_cmd(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
        Command::Synth(args) => synth_cmd(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn parse_dims(text: &str) -> Result<Dims> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!("--input must be four integers N,C,H,W, got {text:?}"))?;
    if parts.len() != 4 {
        bail!("--input must be four integers N,C,H,W, got {text:?}");
    }
    Ok(dims(parts[0], parts[1], parts[2], parts[3]))
}

fn parse_size(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!("--size must be two integers H,W, got {text:?}"))?;
    if parts.len() != 2 {
        bail!("--size must be two integers H,W, got {text:?}");
    }
    Ok((parts[0], parts[1]))
}

fn resolve_arch(arch: &Option<String>, config: &Option<PathBuf>) -> Result<ArchConfig> {
    if let Some(path) = config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        return Ok(ArchConfig::from_json(&text)?);
    }
    if let Some(name) = arch {
        return Ok(ArchConfig::preset(Variant::parse(name)?));
    }
    bail!("pass --arch <preset> or --config <file>");
}

fn describe(args: DescribeArgs) -> Result<()> {
    let arch = resolve_arch(&args.arch, &args.config)?;
    let model = Model::new(arch)?;
    let input = parse_dims(&args.input)?;
    let report = analysis::count_flops(&model, input)?;
    if args.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = TrainConfig::from_json(&text)?;
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(batch_size) = args.batch_size {
        config.batch_size = batch_size;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;

    let outcome = train::train::<f32>(&config, args.ckpt.as_deref())?;
    if args.json {
        print_train_json(&outcome)?;
    } else {
        for r in &outcome.records {
            println!(
                "epoch {:4}  train_loss {:.6}  val pc {:.4} se {:.4} f1 {:.4} js {:.4}",
                r.epoch, r.train_loss, r.val_pc, r.val_se, r.val_f1, r.val_js
            );
        }
        match outcome.best_val_f1 {
            Some(f1) => println!("best epoch {} (val F1 {:.4})", outcome.best_epoch, f1),
            None => println!("no epochs ran"),
        }
        println!("last checkpoint: {}", outcome.last_path.display());
        println!("best checkpoint: {}", outcome.best_path.display());
        println!("log: {}", outcome.log_path.display());
    }
    Ok(())
}

fn print_train_json(outcome: &TrainOutcome) -> Result<()> {
    let summary = serde_json::json!({
        "records": outcome.records,
        "best_epoch": outcome.best_epoch,
        "best_val_f1": outcome.best_val_f1,
        "last": outcome.last_path,
        "best": outcome.best_path,
        "log": outcome.log_path,
    });
    println!("{summary}");
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    let ckpt = codec::load_checkpoint::<f32>(&args.ckpt)
        .with_context(|| format!("loading {}", args.ckpt.display()))?;
    let samples = data::load_dir::<f32>(&args.data)?;
    let report = train::evaluate(&ckpt, &samples, args.threshold)?;
    if args.json {
        println!("{}", report.to_json());
    } else {
        println!("images: {} ({})", report.n_images, report.mode);
        println!("pc {:.4}  se {:.4}  f1 {:.4}  js {:.4}", report.pc, report.se, report.f1, report.js);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, plunet::params::ParamSet<f32>)> {
    let ckpt = codec::load_checkpoint::<f32>(path)
        .with_context(|| format!("loading {}", path.display()))?;
    let model = Model::new(ckpt.meta.config.clone())?;
    let mut params = model.init_params::<f32>(0)?;
    train::restore_checkpoint(&mut params, None, &ckpt)?;
    Ok((model, params))
}

fn predict_cmd(args: PredictArgs) -> Result<()> {
    let (model, mut params) = load_model(&args.ckpt)?;
    let image: Tensor<f32> = data::load_image_ppm(&args.image)?;
    let probs = model.forward_probs(&mut params, &image)?;
    let mask = metrics::binarize(&probs, args.threshold as f32)?;
    let out = match args.out {
        Some(path) => path,
        None => {
            let stem = args
                .image
                .file_stem()
                .ok_or_else(|| anyhow!("{} has no file stem", args.image.display()))?
                .to_string_lossy()
                .into_owned();
            args.image.with_file_name(format!("{stem}_pred.pgm"))
        }
    };
    data::write_mask_pgm(&out, &mask)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<()> {
    let reports = if args.all {
        gradcheck::check_all_seeded(args.seed)?
    } else if let Some(target) = &args.target {
        vec![gradcheck::check_seeded(target, args.seed)?]
    } else {
        bail!("pass a target name or --all");
    };
    if args.json {
        println!("{}", serde_json::to_string(&reports)?);
    } else {
        for r in &reports {
            println!(
                "{:28} max rel err {:.3e}  {}",
                r.target,
                r.max_rel_err,
                if r.passed { "pass" } else { "FAIL" }
            );
        }
    }
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.target.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed for: {}", failed.join(", "));
    }
    Ok(())
}

fn synth_cmd(args: SynthArgs) -> Result<()> {
    let (h, w) = parse_size(&args.size)?;
    let samples = data::synth_generate::<f32>(args.count, h, w, args.seed)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for sample in &samples {
        data::save_sample(sample, &args.out)?;
    }
    println!(
        "wrote {} samples ({} files) to {}",
        samples.len(),
        2 * samples.len(),
        args.out.display()
    );
    Ok(())
}
