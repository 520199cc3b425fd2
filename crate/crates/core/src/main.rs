use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use scribblediff::io;
use scribblediff::metrics::image_fd;
use scribblediff::pipeline::{self, ExperimentConfig, Lab};
use scribblediff::{Error, ImageGrid, Result};

#[derive(Parser)]
#[command(name = "scribblediff", version, about = "Scribble-conditioned diffusion augmentation lab")]
struct Cli {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as JSON.
    PrintConfig,
    /// Generate the training and validation scenes.
    GenData,
    /// Train the denoiser on a training split.
    TrainDenoiser {
        /// Split size in scenes (default: the full training set).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Build the synthetic bank for a split.
    Synthesize {
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train one segmentor for a scheme listed in the config.
    TrainSegmentor {
        #[arg(long)]
        size: Option<usize>,
        /// Scheme label, e.g. `none`, `fixed(1)`, `adaptive`.
        #[arg(long, default_value = "none")]
        scheme: String,
        #[arg(long, default_value_t = 0)]
        seed_index: usize,
    },
    /// Score a segmentor checkpoint on the validation scenes and, with
    /// `--bank`, the bank's Fréchet distance to them.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Full study: every scheme × split × seed.
    Study,
    /// FD against guidance scale at λ = 1.
    SweepW,
    /// FD and distance to the reference against encode ratio.
    SweepLambda,
    /// FD under different condition encodings.
    AblateCond,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default"))
}

fn ensure_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

fn split_size(cfg: &ExperimentConfig, size: Option<usize>) -> Result<usize> {
    let s = size.unwrap_or(cfg.data.train_size);
    if s == 0 || s > cfg.data.train_size {
        return Err(Error::InvalidArgument(format!("split size {s} outside 1..={}", cfg.data.train_size)));
    }
    Ok(s)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = load_config(cli)?;
    let root = out_dir(&cfg);
    match &cli.command {
        Command::PrintConfig => Ok(serde_json::to_value(&cfg).expect("config serializes")),
        Command::GenData => pipeline::with_jobs(cli.jobs, || {
            let lab = Lab::new(cfg.clone(), &root)?;
            let data = lab.data()?;
            Ok(json!({"train": data.train.len(), "val": data.val.len(), "dir": root.join("data")}))
        })?,
        Command::TrainDenoiser { size } => {
            let size = split_size(&cfg, *size)?;
            pipeline::with_jobs(cli.jobs, || {
                let lab = Lab::new(cfg.clone(), &root)?;
                let data = lab.data()?;
                let den = lab.denoiser(&data, size)?;
                Ok(json!({
                    "size": size,
                    "model_hash": den.model_hash,
                    "final_loss": den.loss_curve.last(),
                }))
            })?
        }
        Command::Synthesize { size } => {
            let size = split_size(&cfg, *size)?;
            pipeline::with_jobs(cli.jobs, || {
                let lab = Lab::new(cfg.clone(), &root)?;
                let data = lab.data()?;
                let den = lab.denoiser(&data, size)?;
                let bank = lab.bank(&data, &den, size)?;
                Ok(json!({
                    "size": size,
                    "lambdas": bank.bank.lambdas(),
                    "images": bank.bank.num_images(),
                }))
            })?
        }
        Command::TrainSegmentor { size, scheme, seed_index } => {
            let size = split_size(&cfg, *size)?;
            let spec = cfg
                .schemes
                .iter()
                .find(|s| s.label() == *scheme)
                .cloned()
                .ok_or_else(|| {
                    let known: Vec<String> = cfg.schemes.iter().map(|s| s.label()).collect();
                    Error::InvalidArgument(format!("scheme `{scheme}` is not in the config (known: {})", known.join(", ")))
                })?;
            pipeline::with_jobs(cli.jobs, || {
                let lab = Lab::new(cfg.clone(), &root)?;
                let data = lab.data()?;
                let needs_bank = !spec.resolve(cfg.segmentor_train.epochs)?.required_lambdas().is_empty();
                let bank = if needs_bank {
                    let den = lab.denoiser(&data, size)?;
                    Some(lab.bank(&data, &den, size)?)
                } else {
                    None
                };
                let r = lab.segmentor(&data, bank.as_ref(), size, &spec, *seed_index)?;
                Ok(serde_json::to_value(r).expect("result serializes"))
            })?
        }
        Command::Evaluate { checkpoint, bank } => {
            ensure_exists(checkpoint)?;
            if let Some(b) = bank {
                ensure_exists(b)?;
            }
            pipeline::with_jobs(cli.jobs, || {
                let (seg, hash) = io::load_segmentor(checkpoint)?;
                let lab = Lab::new(cfg.clone(), &root)?;
                let data = lab.data()?;
                let val_miou = scribblediff::segmentor::evaluate_miou(&seg, &data.val)?;
                let mut out = json!({"checkpoint": checkpoint, "model_hash": hash, "val_miou": val_miou});
                if let Some(b) = bank {
                    let bank = io::load_bank(b, None)?;
                    let val: Vec<&ImageGrid> = data.val.items.iter().map(|i| &i.scene.image).collect();
                    let mut fd = Vec::new();
                    for (&lambda, col) in bank.lambdas().iter().zip(bank.columns()) {
                        let synth: Vec<&ImageGrid> = col.iter().collect();
                        fd.push(json!({"lambda": lambda, "fd_val": image_fd(&synth, &val, cfg.eval.extractor)?}));
                    }
                    out["bank_fd"] = json!(fd);
                }
                Ok(out)
            })?
        }
        Command::Study => {
            let outcome = pipeline::run_experiment(&cfg, &root, cli.jobs)?;
            let hits = outcome.cache.iter().filter(|e| e.hit).count();
            Ok(json!({
                "report": root.join("report.json"),
                "rows": outcome.report.rows.len(),
                "median_miou": pipeline::summarize(&outcome.report),
                "notes": outcome.report.notes,
                "stages_cached": hits,
                "stages_run": outcome.cache.len() - hits,
            }))
        }
        Command::SweepW => Ok(json!({"rows": pipeline::sweep_w(&cfg, &root, cli.jobs)?})),
        Command::SweepLambda => {
            let (rows, rho) = pipeline::sweep_lambda(&cfg, &root, cli.jobs)?;
            Ok(json!({"rows": rows, "spearman_lambda_l2": rho}))
        }
        Command::AblateCond => Ok(json!({"rows": pipeline::ablate_conditioning(&cfg, &root, cli.jobs)?})),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
