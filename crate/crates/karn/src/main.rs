use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use karn::commands::{self, Split};
use karn::config::{parse_override, RunConfig};
use karn::synth::Profile;
use karn::{Error, Result};
use karn_core::loss::Objective;
use karn_core::ModelFamily;

/// Load forecasting with Kolmogorov-Arnold recurrent networks and RNN baselines.
#[derive(Debug, Parser)]
#[command(name = "karn", version)]
struct Cli {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (default: config `out`, then $KARN_OUT, then ./karn-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set hidden_size=128`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct PreparedArg {
    /// Prepared-data directory (default: <out>/prepared).
    #[arg(long)]
    prepared: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic load CSV.
    GenSynthetic {
        #[arg(long, default_value = "clean")]
        profile: String,
        /// Length in hours.
        #[arg(long, default_value_t = 24 * 182)]
        hours: usize,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Ingest a CSV and cache scaled, windowed splits.
    Prepare {
        /// Input CSV.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        prepared: PreparedArg,
    },
    /// Train one model on prepared data.
    Train {
        #[arg(long)]
        model: Option<ModelFamily>,
        #[command(flatten)]
        prepared: PreparedArg,
    },
    /// Evaluate a checkpoint and emit the forecast series.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Also write an SVG line chart.
        #[arg(long)]
        svg: bool,
        /// Output directory (default: <out>/eval).
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        prepared: PreparedArg,
    },
    /// Grid search; resumes trials already completed under <out>/search.
    Search {
        /// Cap the number of trials (seeded random subset).
        #[arg(long)]
        budget: Option<usize>,
        /// Worker threads.
        #[arg(long)]
        jobs: Option<usize>,
        /// Families to search, comma separated.
        #[arg(long, value_delimiter = ',')]
        models: Vec<ModelFamily>,
        #[command(flatten)]
        prepared: PreparedArg,
    },
    /// Refine a KARN checkpoint's spline grids.
    ExtendGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        grid_points: usize,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        prepared: PreparedArg,
    },
    /// Compare analytic gradients with central differences.
    CheckGradients {
        /// One family, or every family when omitted.
        #[arg(long)]
        model: Option<ModelFamily>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "mse")]
        objective: Objective,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn load_config(cli: &Cli, extra: Vec<(String, toml::Value)>) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for s in &cli.overrides {
        overrides.push(parse_override(s)?);
    }
    overrides.extend(extra);
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), toml::Value::Integer(seed as i64)));
    }
    if let Some(out) = &cli.out {
        overrides.push(("out".into(), toml::Value::String(out.display().to_string())));
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

fn prepared_override(p: &PreparedArg) -> Vec<(String, toml::Value)> {
    p.prepared.iter().map(|d| ("prepared".to_string(), path_value(d))).collect()
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic { profile, hours, output } => {
            let profile: Profile = profile.parse()?;
            let seed = cli.seed.unwrap_or(0);
            let g = commands::gen_synthetic(profile, *hours, seed, output)?;
            println!(
                "wrote {} ({} hours, profile {profile}, seed {seed}, {} spikes, {} level shifts)",
                output.display(),
                g.series.len(),
                g.spike_hours.len(),
                g.shift_hours.len()
            );
        }
        Command::Prepare { data, prepared } => {
            let mut extra = prepared_override(prepared);
            extra.extend(data.iter().map(|d| ("data".to_string(), path_value(d))));
            let cfg = load_config(cli, extra)?;
            let prep = commands::prepare(&cfg)?;
            println!("{}", json(&prep.manifest));
            println!("prepared data in {}", cfg.prepared_dir().display());
        }
        Command::Train { model, prepared } => {
            let mut extra = prepared_override(prepared);
            extra.extend(model.iter().map(|m| ("model".to_string(), toml::Value::String(m.to_string()))));
            let cfg = load_config(cli, extra)?;
            let out = commands::train(&cfg)?;
            let r = &out.report;
            let t = r.test.expect("test metrics");
            println!(
                "{} best epoch {} of {} (val loss {:.6}); test MAE {:.4} RMSE {:.4} SMAPE {:.3}% (persistence SMAPE {:.3}%)",
                r.model_id, r.best_epoch, r.epochs_run, r.best_val_loss, t.mae, t.rmse, t.smape, out.persistence.smape
            );
            println!("checkpoint {}", out.checkpoint.display());
            println!("report {}", out.dir.join("report.json").display());
        }
        Command::Evaluate {
            checkpoint,
            split,
            svg,
            output,
            prepared,
        } => {
            let cfg = load_config(cli, prepared_override(prepared))?;
            let prep = karn::prepare::Prepared::load(&cfg.prepared_dir())?;
            let dir = output.clone().unwrap_or_else(|| cfg.out_dir().join("eval"));
            let out = commands::evaluate_checkpoint(checkpoint, &prep, *split, &dir, *svg)?;
            println!("{}", json(&out.report));
            println!("forecast series {}", out.csv.display());
            if let Some(p) = out.svg {
                println!("chart {}", p.display());
            }
        }
        Command::Search {
            budget,
            jobs,
            models,
            prepared,
        } => {
            let mut extra = prepared_override(prepared);
            if let Some(b) = budget {
                extra.push(("budget".into(), toml::Value::Integer(*b as i64)));
            }
            if let Some(j) = jobs {
                extra.push(("jobs".into(), toml::Value::Integer(*j as i64)));
            }
            if !models.is_empty() {
                let list = models.iter().map(|m| toml::Value::String(m.to_string())).collect();
                extra.push(("search_models".into(), toml::Value::Array(list)));
            }
            let cfg = load_config(cli, extra)?;
            let s = commands::search(&cfg)?;
            let failed = s.trials.iter().filter(|t| t.error.is_some()).count();
            println!(
                "{} trials ({} run, {} resumed, {failed} failed)",
                s.trials.len(),
                s.ran,
                s.resumed
            );
            match s.winner {
                Some(w) => {
                    let r = s.trials[w].report.as_ref().unwrap();
                    println!(
                        "winner: trial {} {} val loss {:.6}, test SMAPE {:.3}%",
                        s.trials[w].index,
                        r.model_id,
                        r.best_val_loss,
                        r.test.map(|m| m.smape).unwrap_or(f64::NAN)
                    );
                    println!("ranking {}", s.out_dir.join("ranking.csv").display());
                    println!("best checkpoint {}", s.out_dir.join("best.ckpt").display());
                }
                None => return Err(Error::Data("every search trial failed".into())),
            }
        }
        Command::ExtendGrid {
            checkpoint,
            grid_points,
            output,
            prepared,
        } => {
            let cfg = load_config(cli, prepared_override(prepared))?;
            let prep = karn::prepare::Prepared::load(&cfg.prepared_dir())?;
            let report = commands::extend_grid(checkpoint, *grid_points, &prep, output)?;
            println!("{}", json(&report));
            println!("wrote {}", output.display());
        }
        Command::CheckGradients {
            model,
            seeds,
            objective,
            tolerance,
        } => {
            let families = match model {
                Some(m) => vec![*m],
                None => ModelFamily::ALL.to_vec(),
            };
            let base = cli.seed.unwrap_or(0);
            let mut failed = Vec::new();
            for f in families {
                for seed in base..base + seeds {
                    let o = commands::gradient_check(f, seed, *objective, *tolerance)?;
                    let worst = o.report.max_rel_error();
                    let verdict = if o.report.passed() { "pass" } else { "FAIL" };
                    println!("{f:<5} seed {seed}: max relative error {worst:.3e} {verdict}");
                    if !o.report.passed() {
                        for t in o.report.tensors.iter().filter(|t| t.max_rel_error >= *tolerance) {
                            println!(
                                "    {} [{}]: analytic {:e} numeric {:e} (rel {:.3e})",
                                t.name, t.worst_index, t.analytic, t.numeric, t.max_rel_error
                            );
                        }
                        failed.push(format!("{f} seed {seed}"));
                    }
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class() as u8)
        }
    }
}
