use std::path::PathBuf;
use std::process::ExitCode;

use awe_upset::Error;
use awe_upset::campaign::{
    Campaign, CampaignConfig, SimulateOptions, SubsimOptions, cmd_evaluate, cmd_features, cmd_loss, cmd_pipeline,
    cmd_report, cmd_simulate, cmd_subsim, cmd_train, write_config_copy,
};
use clap::{Parser, Subcommand};

/// Tether-rupture upset campaigns for a pumping-cycle airborne wind energy system.
#[derive(Parser)]
#[command(name = "awe-upset", version)]
struct Cli {
    /// Campaign configuration (TOML). Missing sections take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Campaign directory; overrides `output_dir` of the configuration.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Validate the configuration and arguments, then stop.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Worker threads for parallel simulations.
    #[arg(long, env = "AWE_WORKERS", global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo pumping cycles without a predictor.
    Simulate {
        /// Number of cycles; defaults to `simulate.runs`.
        #[arg(long)]
        runs: Option<usize>,
        /// Seed of the run streams; defaults to the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Zero turbulence.
        #[arg(long)]
        calm: bool,
        /// Replay one stored noise vector (little-endian f64).
        #[arg(long, conflicts_with_all = ["runs", "calm"])]
        theta: Option<PathBuf>,
    },
    /// Subset simulation of the rupture probability.
    Subsim {
        /// Run id; train and evaluate need two different runs.
        #[arg(long)]
        run: String,
        /// Continue from the checkpoint of an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Stop after this level has been checkpointed.
        #[arg(long)]
        stop_after_level: Option<usize>,
        /// Overrides `subsim.n_samples`.
        #[arg(long)]
        n_samples: Option<usize>,
        /// Overrides `subsim.p0`.
        #[arg(long)]
        p0: Option<f64>,
        /// Overrides the critical value of the active limit function.
        #[arg(long)]
        gstar: Option<f64>,
        /// Overrides the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment, label and extract features of a data set.
    Features {
        #[arg(long)]
        run: String,
    },
    /// SMOTE, greedy feature selection and SVM training.
    Train {
        #[arg(long)]
        run: String,
    },
    /// Classification and closed-loop avoidance on a held-out data set.
    Evaluate {
        #[arg(long)]
        train: String,
        #[arg(long)]
        eval: String,
    },
    /// Loss rate curves and predictor ranking over downtime.
    Loss,
    /// Markdown summary from stored artifacts.
    Report,
    /// All stages from subset simulation to the report, cached by content hash.
    Pipeline {
        #[arg(long)]
        train: String,
        #[arg(long)]
        eval: String,
    },
}

fn run(cli: Cli) -> awe_upset::Result<()> {
    let mut config = match &cli.config {
        Some(p) => CampaignConfig::load(p)?,
        None => CampaignConfig::default(),
    };
    if let Command::Subsim { n_samples, p0, gstar, seed, .. } = &cli.command {
        if let Some(n) = n_samples {
            config.subsim.n_samples = *n;
        }
        if let Some(p) = p0 {
            config.subsim.p0 = *p;
        }
        if let Some(g) = gstar {
            if config.benchmark.enabled {
                config.benchmark.g_star = *g;
            } else {
                config.simulation.g_star = *g;
            }
        }
        if let Some(s) = seed {
            config.seed = *s;
        }
        config.validate()?;
    }
    let root = cli.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir));
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::config("worker count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(e.to_string()))?;
    }
    let campaign = Campaign::new(root, config);
    if let Command::Subsim { run, .. } | Command::Features { run } | Command::Train { run } = &cli.command {
        awe_upset::campaign::validate_run_id(run)?;
    }
    if let Command::Evaluate { train, eval } | Command::Pipeline { train, eval } = &cli.command {
        awe_upset::campaign::validate_run_id(train)?;
        awe_upset::campaign::validate_run_id(eval)?;
        if train == eval {
            return Err(Error::config(format!(
                "training and evaluation must use different data sets (both are '{train}')"
            )));
        }
    }
    if cli.dry_run {
        println!("configuration valid, hash {}", campaign.config_hash);
        return Ok(());
    }
    write_config_copy(&campaign)?;
    match cli.command {
        Command::Simulate { runs, seed, calm, theta } => {
            let counts = cmd_simulate(&campaign, &SimulateOptions { runs, seed, calm, theta })?;
            println!(
                "completed {} rupture {} incomplete {} invalid {}",
                counts.completed, counts.rupture, counts.incomplete, counts.invalid
            );
        }
        Command::Subsim { run, resume, stop_after_level, .. } => {
            match cmd_subsim(&campaign, &run, &SubsimOptions { resume, stop_after_level })? {
                Some(s) => println!(
                    "p_f {:e} over {} levels, {} distinct failures",
                    s.p_f, s.level_count, s.distinct_failures
                ),
                None => println!("stopped; continue with --resume"),
            }
        }
        Command::Features { run } => println!("{} segments", cmd_features(&campaign, &run)?),
        Command::Train { run } => {
            let m = cmd_train(&campaign, &run)?;
            println!("selected {}", m.selected_names().join(", "));
        }
        Command::Evaluate { train, eval } => {
            for e in cmd_evaluate(&campaign, &train, &eval)? {
                println!(
                    "{}: missed {}/{} upsets, false trigger probability {:e}",
                    e.name,
                    e.n_fn,
                    e.n_tp + e.n_fn,
                    e.fp_probability
                );
            }
        }
        Command::Loss => {
            cmd_loss(&campaign)?;
            println!("{}", campaign.path("reports/loss.csv").display());
        }
        Command::Report => print!("{}", cmd_report(&campaign)?),
        Command::Pipeline { train, eval } => {
            cmd_pipeline(&campaign, &train, &eval)?;
            println!("{}", campaign.path("reports/report.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
