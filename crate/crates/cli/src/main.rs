use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;
use posetrans::pipeline::{self, BaselineMode, PipelineConfig, PipelineError};

#[derive(Parser, Debug)]
#[command(name = "posetrans", version, about = "Limb-level pose augmentation with pose clustering")]
struct Cli {
    /// TOML pipeline config. Without one, paths default to the current directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's rng seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the pose clustering mixture and write a cluster report.
    FitPcm,
    /// Train the plausibility discriminator.
    TrainDisc,
    /// Build candidate pools and write the augmented dataset.
    Augment {
        /// Pick candidates uniformly at random instead of by rarity.
        #[arg(long)]
        random_selection: bool,
        /// Skip refitting the mixture afterwards.
        #[arg(long)]
        no_refit: bool,
    },
    /// Evaluate COCO-format keypoint predictions.
    Evaluate {
        predictions: PathBuf,
    },
    /// Cluster-based resampling baselines.
    Baselines {
        #[arg(value_enum)]
        mode: Mode,
    },
    /// Cluster report for an already fitted mixture.
    ClusterReport,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Oversample,
    Reweight,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let cwd = std::env::current_dir().map_err(|e| PipelineError::Validation(e.to_string()))?;
            PipelineConfig::for_dataset(&cwd, &cwd.join("out"))
        }
    };
    if let Some(s) = cli.seed {
        cfg.augment.rng_seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.run.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.run.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::FitPcm => {
            let out = pipeline::cmd_fit_pcm(&cfg)?;
            println!("model: {}", out.model_path.display());
            for row in &out.report.clusters {
                println!(
                    "cluster {:>3}  count {:>7}  fraction {:.4}  weight {:.4}",
                    row.cluster, row.count, row.fraction, row.weight
                );
            }
        }
        Command::TrainDisc => {
            let out = pipeline::cmd_train_discriminator(&cfg)?;
            println!("checkpoint: {}", out.checkpoint.display());
            println!("curve: {}", out.curve.display());
        }
        Command::Augment {
            random_selection,
            no_refit,
        } => {
            if *random_selection {
                cfg.run.selection = pipeline::Selection::Random;
            }
            if *no_refit {
                cfg.run.refit = false;
            }
            let out = pipeline::cmd_augment(&cfg)?;
            let skipped = out.records.iter().filter(|r| r.skipped.is_some()).count();
            println!("annotations: {}", out.annotations.display());
            println!("ledger: {}", out.ledger.display());
            println!("selected {} of {} instances ({skipped} skipped)", out.selected_poses.len(), out.records.len());
            if let Some(p) = out.refit_model {
                println!("refit model: {}", p.display());
            }
        }
        Command::Evaluate { predictions } => {
            let out = pipeline::cmd_evaluate(&cfg, predictions)?;
            print!("{}", out.report.to_table());
            println!("ignored predictions: {}", out.ignored_predictions);
        }
        Command::Baselines { mode } => {
            let mode = match mode {
                Mode::Oversample => BaselineMode::Oversample,
                Mode::Reweight => BaselineMode::Reweight,
            };
            let out = pipeline::cmd_baselines(&cfg, mode)?;
            println!("wrote {}", out.path.display());
        }
        Command::ClusterReport => {
            let report = pipeline::cmd_cluster_report(&cfg)?;
            println!("{} samples in {} clusters", report.n_samples, report.n_components);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
