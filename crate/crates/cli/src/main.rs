use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "imageflow", version, about = "Forecast future images of longitudinal series with latent flow fields")]
struct Cli {
    /// Root for run directories when --out is not given.
    #[arg(long, env = "IMAGEFLOW_RUNS_DIR", default_value = "runs", global = true)]
    runs_dir: PathBuf,
    /// Log level (error, warn, info, debug).
    #[arg(long, default_value = "info", global = true)]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by commands that read a run configuration.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the top-level seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and split a synthetic dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Affinely register every series of a dataset to its first visit.
    Register {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model (variant from the config or --variant).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; a synthetic dataset is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// ode, sde or t_unet.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast one image from t_i to t_j (times in dataset units).
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        t_i: f64,
        #[arg(long)]
        t_j: f64,
        /// Seed of the stochastic variant.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Permit t_j < t_i.
        #[arg(long)]
        allow_backward: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score baselines and trained checkpoints on identical test pairs.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Extrapolation baselines: linear, cubic. Repeatable.
        #[arg(long = "method")]
        methods: Vec<String>,
        /// Trained model as NAME=PATH; `{seed}` in PATH is replaced by the
        /// run seed. Repeatable.
        #[arg(long = "ckpt")]
        ckpts: Vec<String>,
        /// Number of independent runs (seeds seed..seed+N).
        #[arg(long)]
        seeds: Option<usize>,
        /// Pre-trained segmenter; trained on the training split otherwise.
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-time optimization on the observed history of one series.
    Tto {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory containing the series.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        series: String,
        #[arg(long, default_value_t = 1)]
        iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Adapt every parameter group, not only the flow fields.
        #[arg(long)]
        full_model: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw several stochastic trajectories and their pixelwise dispersion.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        t_i: f64,
        #[arg(long)]
        t_j: f64,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every setting of one ablation axis.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// field_param, latent_scope, lambda_v, lambda_c or lambda_s.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export pooled bottleneck latents with PCA coordinates.
    Latents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Skip the scatter plot.
        #[arg(long)]
        no_plot: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Register { .. } => "register",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Tto { .. } => "tto",
            Command::Sample { .. } => "sample",
            Command::Ablate { .. } => "ablate",
            Command::Latents { .. } => "latents",
        }
    }

    fn out(&self) -> Option<&PathBuf> {
        match self {
            Command::Synth { out, .. }
            | Command::Register { out, .. }
            | Command::Train { out, .. }
            | Command::Predict { out, .. }
            | Command::Evaluate { out, .. }
            | Command::Tto { out, .. }
            | Command::Sample { out, .. }
            | Command::Ablate { out, .. }
            | Command::Latents { out, .. } => out.as_ref(),
        }
    }
}

/// Log sink writing every record to stderr and to `run.log` in the run
/// directory.
#[derive(Clone)]
struct Tee(Arc<Mutex<File>>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.lock().expect("log file lock").flush()
    }
}

fn init_logging(level: log::LevelFilter, run_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(run_dir).with_context(|| format!("cannot create {}", run_dir.display()))?;
    let file = File::create(run_dir.join("run.log"))?;
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Pipe(Box::new(Tee(Arc::new(Mutex::new(file))))))
        .init();
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let run_dir = cli.command.out().cloned().unwrap_or_else(|| cli.runs_dir.join(cli.command.name()));
    init_logging(cli.log_level, &run_dir)?;
    match cli.command {
        Command::Synth { cfg, .. } => commands::synth(&cfg, &run_dir),
        Command::Register { cfg, input, .. } => commands::register(&cfg, &input, &run_dir),
        Command::Train { cfg, data, variant, .. } => commands::train(&cfg, data.as_deref(), variant.as_deref(), &run_dir),
        Command::Predict { ckpt, image, t_i, t_j, seed, allow_backward, .. } => {
            commands::predict(&ckpt, &image, t_i, t_j, seed, allow_backward, &run_dir)
        }
        Command::Evaluate { cfg, data, methods, ckpts, seeds, segmenter, .. } => {
            commands::evaluate(&cfg, &data, &methods, &ckpts, seeds, segmenter.as_deref(), &run_dir)
        }
        Command::Tto { ckpt, data, series, iters, lr, full_model, .. } => {
            commands::tto(&ckpt, &data, &series, iters, lr, full_model, &run_dir)
        }
        Command::Sample { ckpt, image, t_i, t_j, n, seed, .. } => {
            if n == 0 {
                bail!("--n must be at least 1");
            }
            commands::sample(&ckpt, &image, t_i, t_j, n, seed, &run_dir)
        }
        Command::Ablate { cfg, data, axis, segmenter, .. } => {
            commands::ablate(&cfg, data.as_deref(), &axis, segmenter.as_deref(), &run_dir)
        }
        Command::Latents { ckpt, data, no_plot, .. } => commands::latents(&ckpt, &data, !no_plot, &run_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
