use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use volpi::experiment::{
    cmd_calibrate, cmd_evaluate, cmd_gen, cmd_run_all, cmd_sweep_gamma, cmd_train, ExperimentConfig, VARIANTS,
};
use volpi::calibration::CalibrationMode;
use volpi::{Error, Result};

/// Predictive intervals for segmented lesion volumes on synthetic phantoms.
#[derive(Debug, Parser)]
#[command(name = "volpi", version)]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the phantom dataset and its train/calibration/test split.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one model variant, or every variant the methods need.
    Train {
        #[command(flatten)]
        common: Common,
        /// baseline, dropout, triad, regcnn or all.
        #[arg(long, default_value = "all")]
        variant: String,
    },
    /// Fit calibration factors on the calibration fold.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// A single method; defaults to every configured method.
        #[arg(long)]
        method: Option<String>,
    },
    /// Evaluate calibrated methods on the test fold and write the reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Train, calibrate and evaluate the three-head net for several gammas.
    SweepGamma {
        #[command(flatten)]
        common: Common,
        /// Comma-separated gamma values; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// gen, train, calibrate and evaluate in one go.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Comma-separated subset of triad, ct, mc, tta, regcnn.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, seed_required: bool) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(m) = &self.methods {
            cfg.methods = m.iter().map(|s| s.trim().to_string()).collect();
        }
        match self.seed {
            Some(s) => cfg.seed = s,
            None if seed_required => return Err(Error::Config("--seed is required for this command".into())),
            None => {}
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, force } => {
            let cfg = common.resolve(true)?;
            let m = cmd_gen(&cfg, force)?;
            println!(
                "generated {} cases ({} train / {} calibration / {} test) in {}",
                m.ids.len(),
                m.split.train_ids.len(),
                m.split.calibration_ids.len(),
                m.split.test_ids.len(),
                cfg.data_dir().display()
            );
        }
        Command::Train { common, variant } => {
            let cfg = common.resolve(true)?;
            let variants: Vec<String> = if variant == "all" {
                cfg.required_variants().iter().map(|v| v.to_string()).collect()
            } else if VARIANTS.contains(&variant.as_str()) {
                vec![variant]
            } else {
                return Err(Error::Config(format!("unknown variant `{variant}`, expected one of {VARIANTS:?} or all")));
            };
            for v in &variants {
                for o in cmd_train(&cfg, v)? {
                    println!(
                        "{} run {}: {} epochs in {:.1}s, final loss {:.5} -> {}",
                        o.variant,
                        o.run,
                        o.loss_trace.len(),
                        o.seconds,
                        o.loss_trace.last().copied().unwrap_or(f64::NAN),
                        o.dir.display()
                    );
                }
            }
        }
        Command::Calibrate { common, method } => {
            let cfg = common.resolve(false)?;
            let methods = match method {
                Some(m) => vec![m],
                None => cfg.methods.clone(),
            };
            for m in &methods {
                for o in cmd_calibrate(&cfg, m)? {
                    let qs: Vec<String> = o.factor.classes.iter().map(|c| format!("{:.4}", c.q)).collect();
                    let cov: Vec<String> = o
                        .coverage
                        .iter()
                        .map(|c| c.map_or("unbounded".into(), |v| format!("{v:.3}")))
                        .collect();
                    let mode = match o.factor.mode {
                        CalibrationMode::AdditiveMl => "additive, mL",
                        CalibrationMode::Multiplicative => "multiplicative",
                    };
                    println!(
                        "{} run {} ({mode}): q = [{}], calibration coverage = [{}]",
                        o.method_id,
                        o.run,
                        qs.join(", "),
                        cov.join(", ")
                    );
                }
            }
        }
        Command::Evaluate { common } => {
            let cfg = common.resolve(false)?;
            let out = cmd_evaluate(&cfg)?;
            print!("{}", out.report.to_table());
            println!("reports written to {}", out.dir.display());
        }
        Command::SweepGamma { common, gammas } => {
            let cfg = common.resolve(false)?;
            let gammas = gammas.unwrap_or_else(|| cfg.gammas.clone());
            let out = cmd_sweep_gamma(&cfg, &gammas)?;
            print!("{}", out.report.to_table());
            println!("reports written to {}", out.dir.display());
        }
        Command::Run { common, force } => {
            let cfg = common.resolve(true)?;
            let out = cmd_run_all(&cfg, force)?;
            print!("{}", out.evaluation.report.to_table());
            println!("reports written to {}", out.evaluation.dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => {
            info!("done");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
