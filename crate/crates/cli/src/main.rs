use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rtf_forge_cli::commands::*;
use rtf_forge_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "rtf-forge", version, about = "Pose-to-RTF regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the grid dataset and write train/dev/test files.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the configured model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding train.rtfd and dev.rtfd (default: out_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model on off-lattice poses or on a dataset file.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset file to score instead of random poses.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Refit on decimated training lattices.
    SweepDistance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        factors: Option<Vec<usize>>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate noisy training data per SNR and refit.
    SweepSnr {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        snrs: Option<Vec<f64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the noise-excited measurement of one pose.
    RepeatMeasure {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a dataset's ILD block as CSV.
    ExportFeatures {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = resolve_out(Some(&cfg), out);
            let s = cmd_gen(&cfg, &out)?;
            println!("train {} dev {} test {} -> {}", s.train, s.dev, s.test, out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = data.unwrap_or_else(|| cfg.out_dir.clone());
            let out = resolve_out(Some(&cfg), out);
            let s = cmd_train(&cfg, &data, &out)?;
            match s.best_epoch {
                Some(e) => println!("{} trained on {} rows, best epoch {e}", s.kind, s.n_train),
                None => println!("{} fitted on {} rows", s.kind, s.n_train),
            }
        }
        Command::Eval { config, model, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = resolve_out(Some(&cfg), out);
            let r = cmd_eval(&cfg, model.as_deref(), data.as_deref(), &out)?;
            println!(
                "ild {:.4} ± {:.4} dB, ipd {:.4} ± {:.4} rad over {} poses",
                r.ild_mae_mean, r.ild_ci_mean, r.ipd_mae_mean, r.ipd_ci_mean, r.n_samples
            );
        }
        Command::SweepDistance { config, factors, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let factors = factors.unwrap_or_else(|| cfg.sweep.factors.clone());
            let out = resolve_out(Some(&cfg), out);
            let rows = cmd_sweep_distance(&cfg, &factors, data.as_deref(), Some(&out))?;
            print!("{}", table_csv(&rows));
        }
        Command::SweepSnr { config, snrs, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let snrs = snrs.unwrap_or_else(|| cfg.sweep.snrs.clone());
            let out = resolve_out(Some(&cfg), out);
            let rows = cmd_sweep_snr(&cfg, &snrs, Some(&out))?;
            print!("{}", table_csv(&rows));
        }
        Command::RepeatMeasure { config, repeats, duration, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let repeats = repeats.unwrap_or(cfg.sweep.repeats);
            let out = resolve_out(Some(&cfg), out);
            let r = cmd_repeat_measure(&cfg, repeats, duration, Some(&out))?;
            println!("ild {:.4} ± {:.4} dB, ipd {:.4} ± {:.4} rad", r.ild_mae_mean, r.ild_ci_mean, r.ipd_mae_mean, r.ipd_ci_mean);
        }
        Command::ExportFeatures { config, data, out } => {
            if let Some(c) = config {
                ExperimentConfig::load(&c)?;
            }
            let n = cmd_export_features(&data, &out)?;
            println!("{n} rows -> {}", out.display());
        }
    }
    Ok(())
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("RTF_FORGE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("RTF_FORGE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
