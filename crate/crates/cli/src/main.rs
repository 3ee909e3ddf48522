//! `ndfield`: fit, query and evaluate temporally parameterized displacement
//! fields from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndfield::diffengine::Precision;
use ndfield::trainer::Optimizer;

use crate::config::CliConfig;

/// Exit codes.
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ndfield", version, about = "Spatiotemporal neural displacement fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed of every random source.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for dense evaluation; 1 is the reproducibility mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct FitFlags {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_points: Option<usize>,
    #[arg(long)]
    reg_points: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    optimizer: Option<Optimizer>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    omega0: Option<f64>,
    #[arg(long)]
    reg_time_grid_size: Option<usize>,
    #[arg(long)]
    time_horizon: Option<f64>,
    #[arg(long)]
    t_extrap: Option<f64>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Sample training points near the baseline labels.
    #[arg(long)]
    sample_labels: bool,
    #[arg(long)]
    mask_dilation: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model to the scans listed in a manifest.
    Fit {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        fit: FitFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Displacement and |J| volumes at one time; optionally warp a scan.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Months since baseline.
        #[arg(long, allow_negative_numbers = true)]
        time: Option<f64>,
        /// Grid as `X,Y,Z`; taken from `--warp` when omitted.
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Scan to warp into the baseline frame.
        #[arg(long)]
        warp: Option<PathBuf>,
        #[arg(long)]
        jacdet_dt: bool,
        #[arg(long)]
        chunk: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// |J| volume and slice image at one time.
    Jacobian {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        time: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long)]
        chunk: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-structure trajectories, Dice and sign consistency.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Label ids, comma separated.
        #[arg(long, value_delimiter = ',')]
        labels: Option<Vec<i32>>,
        /// Months, comma separated.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long)]
        dead_band: Option<f64>,
        /// Refit without the scan at this time and compare against the model.
        #[arg(long)]
        holdout: Option<f64>,
        #[command(flatten)]
        fit: FitFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic growing-sphere series with its manifest.
    Phantom {
        /// Grid size per axis.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Months, comma separated.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long)]
        rate: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Verify every analytic derivative against finite differences.
    Gradcheck {
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        precision: Option<Precision>,
        /// Perturb one named check (fault injection).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

fn dims3(v: &[usize]) -> ndfield::Result<[usize; 3]> {
    <[usize; 3]>::try_from(v).map_err(|_| ndfield::Error::Invalid(format!("--dims needs 3 values, got {}", v.len())))
}

impl FitFlags {
    fn apply(&self, c: &mut CliConfig) {
        let f = &mut c.fit;
        macro_rules! set {
            ($($flag:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $dst = v; })*
            };
        }
        set!(
            iterations => f.iterations,
            batch_points => f.batch_points,
            reg_points => f.reg_points,
            learning_rate => f.learning_rate,
            optimizer => f.optimizer,
            lambda => f.weights.lambda,
            alpha => f.weights.alpha,
            beta => f.weights.beta,
            gamma => f.weights.gamma,
            hidden_width => f.network.hidden_width,
            omega0 => f.network.omega0,
            reg_time_grid_size => f.reg_time_grid_size,
            t_extrap => f.t_extrap,
            precision => f.precision,
            log_every => f.log_every,
            checkpoint_every => f.checkpoint_every,
            mask_dilation => c.sampling.dilation,
        );
        if let Some(h) = self.time_horizon {
            f.time_horizon = Some(h);
        }
        if self.sample_labels {
            c.sampling.use_labels = true;
        }
    }
}

impl Common {
    fn load(&self) -> ndfield::Result<CliConfig> {
        let mut c = CliConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            c.set_seed(s);
        }
        if let Some(t) = self.threads {
            c.threads = t;
        }
        Ok(c)
    }
}
