use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bithrust_core::actuator::{fit_steady_state, read_thrust_samples};
use bithrust_core::env::{Method, Transition};
use bithrust_core::eval::{compare, run_experiment, run_rollout, ExperimentConfig, MetricsReport};
use bithrust_core::policy::PolicyNetwork;
use bithrust_core::ppo::train;
use bithrust_core::sim::write_trace_csv;
use bithrust_core::Config;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "bithrust", version, about = "Bidirectional-thrust quadrotor inversion toolkit")]
struct Cli {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one rollout and write its dynamics-rate trace.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Rollout index within the seed.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Run n rollouts of one method and report metrics.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate several methods on identical rollouts and rank them.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Methods to compare; defaults to all, or all baselines without --weights.
        #[arg(long = "methods", value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Train an inversion policy.
    Train {
        #[arg(long, default_value = "nti")]
        transition: Transition,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        envs: Option<usize>,
        /// Hidden widths, e.g. 64,64.
        #[arg(long, value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the steady-state thrust model to thrust-stand samples.
    FitThrust {
        /// CSV with columns omega, thrust, torque.
        #[arg(long)]
        input: PathBuf,
        /// Write the fit as JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "step-hfca-oca")]
    method: Method,
    #[arg(long, default_value = "nti")]
    transition: Transition,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    /// Episode length (s).
    #[arg(long)]
    duration: Option<f64>,
    /// Settling cone half-angle (deg).
    #[arg(long)]
    cone_deg: Option<f64>,
    /// Policy weights for the policy method.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, e: impl std::fmt::Display) -> Self {
        CliError {
            kind,
            message: e.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn experiment(cfg: &Config, run: &RunArgs, method: Method) -> ExperimentConfig {
    let mut e = cfg.experiment(method, run.transition);
    if let Some(s) = run.seed {
        e.seed = s;
    }
    if let Some(n) = run.n {
        e.n = n;
    }
    if let Some(d) = run.duration {
        e.env.duration = d;
    }
    if let Some(c) = run.cone_deg {
        e.cone_deg = c;
    }
    e
}

fn load_policy(path: Option<&Path>) -> Result<Option<PolicyNetwork>> {
    path.map(|p| PolicyNetwork::load(p).map_err(|e| CliError::new("weights", e)))
        .transpose()
}

fn out_dir(out: Option<&Path>) -> Result<Option<&Path>> {
    if let Some(d) = out {
        fs::create_dir_all(d).map_err(|e| CliError::new("io", format!("{}: {e}", d.display())))?;
    }
    Ok(out)
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))
}

fn report_json(r: &MetricsReport) -> serde_json::Value {
    let a = r.aggregate();
    json!({
        "method": r.method.to_string(),
        "transition": r.transition.to_string(),
        "seed": r.seed,
        "n": r.n(),
        "pooled_rmse": a.pooled_rmse,
        "mean_rmse": a.mean_rmse,
        "settling_time": a.settling_time,
        "settled": a.settled,
        "max_dev": [a.max_dev.x, a.max_dev.y, a.max_dev.z],
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| CliError::new("config", e))?,
        None => Config::default(),
    };
    match cli.command {
        Command::Simulate { run, index } => {
            let e = experiment(&cfg, &run, run.method);
            e.validate().map_err(|e| CliError::new("config", e))?;
            let policy = load_policy(run.weights.as_deref())?;
            let trace = run_rollout(&e, policy.as_ref(), index).map_err(|e| CliError::new("simulate", e))?;
            let path = match out_dir(run.out.as_deref())? {
                Some(d) => d.join("trace.csv"),
                None => PathBuf::from("trace.csv"),
            };
            write_trace_csv(create(&path)?, &trace).map_err(|e| CliError::new("io", e))?;
            let last = trace.last().expect("trace holds the initial row");
            println!(
                "{}",
                json!({"trace": path.display().to_string(), "rows": trace.len(), "final_time": last.t})
            );
        }
        Command::Evaluate { run } => {
            let e = experiment(&cfg, &run, run.method);
            let policy = load_policy(run.weights.as_deref())?;
            let outcome = run_experiment(&e, policy.as_ref(), false).map_err(|e| CliError::new("evaluate", e))?;
            if let Some(d) = out_dir(run.out.as_deref())? {
                outcome
                    .report
                    .write_csv(create(&d.join("metrics.csv"))?)
                    .map_err(|e| CliError::new("io", e))?;
            }
            println!("{}", report_json(&outcome.report));
        }
        Command::Compare { run, methods } => {
            let policy = load_policy(run.weights.as_deref())?;
            let methods = if !methods.is_empty() {
                methods
            } else if policy.is_some() {
                Method::ALL.to_vec()
            } else {
                Method::ALL
                    .into_iter()
                    .filter(|m| *m != Method::PolicyHfcaOca)
                    .collect()
            };
            let reports = methods
                .iter()
                .map(|m| {
                    run_experiment(&experiment(&cfg, &run, *m), policy.as_ref(), false)
                        .map(|o| o.report)
                        .map_err(|e| CliError::new("evaluate", e))
                })
                .collect::<Result<Vec<_>>>()?;
            let table = compare(&reports).map_err(|e| CliError::new("compare", e))?;
            if let Some(d) = out_dir(run.out.as_deref())? {
                table
                    .write_csv(create(&d.join("comparison.csv"))?)
                    .map_err(|e| CliError::new("io", e))?;
                for r in &reports {
                    r.write_csv(create(&d.join(format!("metrics_{}.csv", r.method)))?)
                        .map_err(|e| CliError::new("io", e))?;
                }
            }
            print!("{}", table.to_text());
        }
        Command::Train {
            transition,
            seed,
            epochs,
            envs,
            hidden,
            out,
        } => {
            let mut t = cfg.training(transition);
            if let Some(s) = seed {
                t.seed = s;
            }
            if let Some(e) = epochs {
                t.ppo.epochs = e;
            }
            if let Some(n) = envs {
                t.ppo.num_envs = n;
            }
            if !hidden.is_empty() {
                t.hidden = hidden;
            }
            let outcome = train(&t, Some(&out), |row| {
                eprintln!(
                    "{}",
                    json!({
                        "epoch": row.epoch,
                        "mean_cost": row.mean_cost,
                        "clip_fraction": row.clip_fraction,
                        "approx_kl": row.approx_kl,
                        "entropy": row.entropy,
                    })
                );
            })
            .map_err(|e| CliError::new("train", e))?;
            let first = outcome.curve.first().map(|r| r.mean_cost);
            let best = outcome.curve.get(outcome.best_epoch - 1).map(|r| r.mean_cost);
            println!(
                "{}",
                json!({
                    "out": out.display().to_string(),
                    "epochs": outcome.curve.len(),
                    "best_epoch": outcome.best_epoch,
                    "first_cost": first,
                    "best_cost": best,
                })
            );
        }
        Command::FitThrust { input, out } => {
            let file = fs::File::open(&input).map_err(|e| CliError::new("io", format!("{}: {e}", input.display())))?;
            let samples = read_thrust_samples(file).map_err(|e| CliError::new("fit", e))?;
            let nominal = cfg.vehicle.actuator.steady.rotors[0];
            let fit = fit_steady_state(&samples, &nominal).map_err(|e| CliError::new("fit", e))?;
            let regime = |f: Option<bithrust_core::actuator::RegimeFit>| {
                f.map(|f| json!({"samples": f.samples, "thrust_rms": f.thrust_rms, "torque_rms": f.torque_rms}))
            };
            let value = json!({
                "model": fit.model,
                "forward": regime(fit.forward),
                "reverse": regime(fit.reverse),
                "partial": fit.is_partial(),
            });
            let text = serde_json::to_string_pretty(&value).map_err(|e| CliError::new("io", e))?;
            match out {
                Some(p) => fs::write(&p, text).map_err(|e| CliError::new("io", format!("{}: {e}", p.display())))?,
                None => println!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind, "message": e.message}));
            ExitCode::FAILURE
        }
    }
}
