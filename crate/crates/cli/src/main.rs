//! `halt`: featurize traces, train and evaluate detectors, run the synthetic
//! lab and the attribution analyses from one binary.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, Preset};
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "halt", version, about = "Hallucination detection from token log-probability traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that resolves a run configuration.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated feature columns to withhold from the model.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset,
            seed: self.seed,
            mask: self.mask.clone(),
            max_epochs: self.epochs,
            manifest: self.manifest.clone(),
            out: self.out.clone(),
            ..Overrides::default()
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert every trace file of a manifest into a feature cache.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split, selecting on the validation split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a split with a model and/or tuned statistic detectors.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Serialized statistic detector; may be repeated.
        #[arg(long = "detector")]
        detectors: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also report the constant and random baselines.
        #[arg(long)]
        trivial: bool,
    },
    /// Tune a statistic's threshold and direction on the validation split.
    Tune {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Statistic name (ppl, h_overall, h_alts, dh_dec, rank_proxy) or `all`.
        #[arg(long, default_value = "all")]
        statistic: String,
    },
    /// Write per-trace scores and labels as JSON lines.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        traces: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate labelled traces from an emulator spec.
    Synth {
        /// Emulator spec JSON; the built-in emulator A when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        n_train: usize,
        #[arg(long, default_value_t = 100)]
        n_val: usize,
        #[arg(long, default_value_t = 400)]
        n_test: usize,
        /// Comma-separated family names; all families when absent.
        #[arg(long)]
        families: Option<String>,
    },
    /// Train on two families of each emulator and cross-evaluate on the third.
    Hypothesis {
        #[arg(long)]
        spec_a: Option<PathBuf>,
        #[arg(long)]
        spec_b: Option<PathBuf>,
        /// Suite sizes and model settings as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient x input importances of a model over a split.
    Attribute {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Retrain without selected columns and report the macro-F1 deltas.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Column groups separated by `;`, columns within a group by `,`.
        /// Defaults to each engineered column on its own.
        #[arg(long)]
        columns: Option<String>,
    },
    /// Mean probability mass captured by the top-k log-probabilities.
    Topk {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Split to analyse; every split when absent.
        #[arg(long)]
        split: Option<String>,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("HALT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("HALT_THREADS must be a non-negative integer, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Featurize { manifest, out } => commands::featurize(&manifest, &out),
        Command::Train { cfg } => commands::train(cfg.config.as_deref(), cfg.overrides()),
        Command::Eval {
            cfg,
            model,
            detectors,
            split,
            threshold,
            trivial,
        } => commands::eval(
            cfg.config.as_deref(),
            Overrides {
                model_path: model,
                threshold,
                ..cfg.overrides()
            },
            &detectors,
            &split,
            trivial,
        ),
        Command::Tune { cfg, statistic } => commands::tune(cfg.config.as_deref(), cfg.overrides(), &statistic),
        Command::Predict {
            model,
            traces,
            threshold,
            out,
        } => commands::predict(&model, &traces, threshold, out.as_deref()),
        Command::Synth {
            spec,
            out,
            seed,
            n_train,
            n_val,
            n_test,
            families,
        } => commands::synth(spec.as_deref(), &out, seed, [n_train, n_val, n_test], families.as_deref()),
        Command::Hypothesis {
            spec_a,
            spec_b,
            config,
            seed,
            out,
        } => commands::hypothesis(spec_a.as_deref(), spec_b.as_deref(), config.as_deref(), seed, &out),
        Command::Attribute { cfg, model, split } => commands::attribute(
            cfg.config.as_deref(),
            Overrides {
                model_path: model,
                ..cfg.overrides()
            },
            &split,
        ),
        Command::Ablate { cfg, columns } => commands::ablate(cfg.config.as_deref(), cfg.overrides(), columns.as_deref()),
        Command::Topk { cfg, split, k } => commands::topk(
            cfg.config.as_deref(),
            Overrides { k, ..cfg.overrides() },
            split.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("halt: error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
