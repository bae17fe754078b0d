use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use magnet::config::ExperimentConfig;
use magnet::datagen::{export_dataset, generate_dataset};
use magnet::harness::{self, Variant};
use magnet::MagnetError;

#[derive(Parser)]
#[command(name = "magnet", version, about = "Toy referring segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic split and export samples.jsonl plus PNGs.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Which split of the configured data to export.
        #[arg(long, default_value = "train", value_parser = ["train", "val"])]
        split: String,
        /// Export directory.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Train a model; writes metrics.jsonl, checkpoint, model card and plots.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue an existing run with an identical configuration.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the configured validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val", value_parser = ["train", "val"])]
        split: String,
        /// Number of image/ground-truth/prediction panels to write.
        #[arg(long, default_value_t = 0)]
        triptychs: usize,
    },
    /// Train the component ablation matrix over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Fit the language-to-image linear probe on a checkpoint's features.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    train_count: Option<String>,
    #[arg(long)]
    val_count: Option<String>,
    /// on | off
    #[arg(long)]
    grounding: Option<String>,
    #[arg(long)]
    mask_rate: Option<String>,
    #[arg(long)]
    predictor_depth: Option<String>,
    /// center | average | none
    #[arg(long)]
    mask_input: Option<String>,
    #[arg(long)]
    tau1: Option<String>,
    #[arg(long)]
    tau2: Option<String>,
    /// log | literal
    #[arg(long)]
    cal_form: Option<String>,
    /// off | p2p | p2t | both
    #[arg(long)]
    cal: Option<String>,
    /// on | off
    #[arg(long)]
    cam: Option<String>,
}

impl Common {
    fn load(&self) -> magnet::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("out", &self.out),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("batch-size", &self.batch_size),
            ("lr", &self.lr),
            ("train-count", &self.train_count),
            ("val-count", &self.val_count),
            ("grounding", &self.grounding),
            ("mask-rate", &self.mask_rate),
            ("predictor-depth", &self.predictor_depth),
            ("mask-input", &self.mask_input),
            ("tau1", &self.tau1),
            ("tau2", &self.tau2),
            ("cal-form", &self.cal_form),
            ("cal", &self.cal),
            ("cam", &self.cam),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.apply_flag(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn split(cfg: &ExperimentConfig, name: &str) -> magnet::Result<Vec<magnet::datagen::Sample>> {
    let d = &cfg.data;
    let (seed, count) = if name == "train" {
        (d.train_seed, d.train_count)
    } else {
        (d.val_seed, d.val_count)
    };
    generate_dataset(seed, count, d.grid, cfg.model.image_size)
}

fn run(cli: Cli) -> magnet::Result<()> {
    match cli.command {
        Command::GenData { common, split: s, dir } => {
            let cfg = common.load()?;
            let samples = split(&cfg, &s)?;
            export_dataset(&samples, &dir)?;
            println!("wrote {} samples to {}", samples.len(), dir.display());
        }
        Command::Train { common, resume } => {
            let cfg = common.load()?;
            let run = harness::run_train(&cfg, resume)?;
            print!("{}", run.final_report);
            println!("run directory: {}", run.dir.display());
        }
        Command::Eval {
            common,
            checkpoint,
            split: s,
            triptychs,
        } => {
            let cfg = common.load()?;
            let samples = split(&cfg, &s)?;
            let report = harness::run_eval(&checkpoint, &samples, Some(&cfg.out_dir), triptychs)?;
            print!("{report}");
        }
        Command::Ablate { common, seeds } => {
            let cfg = common.load()?;
            let table = harness::run_ablation(&cfg, &Variant::ALL, &seeds)?;
            print!("{}", table.to_text());
        }
        Command::Probe { common, checkpoint } => {
            let cfg = common.load()?;
            let samples = split(&cfg, "val")?;
            let r = harness::run_probe(&checkpoint, &samples, &cfg.probe, Some(&cfg.out_dir))?;
            println!(
                "matching {:.4}  non-matching {:.4}  gap {:.4}",
                r.matching_sim, r.nonmatching_sim, r.gap
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                MagnetError::Config(_) => 2,
                MagnetError::NonFinite { .. } => 3,
                _ => 1,
            })
        }
    }
}
