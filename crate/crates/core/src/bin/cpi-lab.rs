use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cpi_lab::data::{BehaviorKind, Dataset, Restart};
use cpi_lab::dp::UnvisitedFallback;
use cpi_lab::experiment::{
    build_dataset, oracle_report, run_checks, run_grid, run_percentile, write_grid, CheckConfig,
    DatasetPart, DatasetRecipe, DatasetStats, Environment, ExperimentSpec, PercentileSpec,
    DEFAULT_DISCOUNT,
};
use cpi_lab::Error;

#[derive(Parser)]
#[command(name = "cpi-lab", version, about = "Tabular offline RL experiments")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads [default: all processors].
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// JSON config for the subcommand (an experiment spec for `run`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset.
    Collect(CollectArgs),
    /// Optimal and in-sample optimal values.
    Oracle(OracleArgs),
    /// Run an experiment grid.
    Run(RunArgs),
    /// Percentile-cloned reference study.
    Percentile(PercentileArgs),
    /// Randomized theory checks.
    Check(CheckArgs),
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long, default_value = "grid7x7")]
    env: String,
    /// Dataset preset (inferior, expert, random, mixed, missing-action,
    /// expert-inferior).
    #[arg(long, conflicts_with = "behavior")]
    preset: Option<String>,
    /// Behavior policy; repeat to concatenate parts.
    #[arg(long)]
    behavior: Vec<BehaviorKind>,
    /// Transitions per behavior part.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 30)]
    cap: usize,
    /// fixed or random; defaults to fixed for the expert, random otherwise.
    #[arg(long)]
    restart: Option<Restart>,
    /// e.g. missing-action:upper-left:down
    #[arg(long)]
    filter: Vec<String>,
    /// Redraw until an optimal start-to-goal path is covered.
    #[arg(long)]
    require_optimal_path: bool,
    /// Dataset file [default: <out>/dataset.jsonl].
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the transitions as CSV next to the dataset.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value = "grid7x7")]
    env: String,
    /// Dataset for the in-sample oracle.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Fail when the data support reaches a state with no observed action.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 30)]
    cap: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Built-in grid (grid7x7-inferior, fourroom-expert, fourroom-random,
    /// fourroom-missing-action, grid7x7-ensemble).
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct PercentileArgs {
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Number of seeds, starting at --seed.
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Args)]
struct CheckArgs {
    /// Small trial counts for a fast smoke run.
    #[arg(long)]
    quick: bool,
    /// Flip the sign of the KL update to exercise failure reporting.
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> cpi_lab::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidSpec(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> cpi_lab::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Ok(true) on success, Ok(false) on a reported failure.
fn dispatch(cli: Cli) -> cpi_lab::Result<bool> {
    let out = cli.out.clone();
    let out_dir = || out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match cli.command {
        Command::Collect(args) => {
            let recipe = if let Some(path) = &cli.config {
                read_json(path)?
            } else if let Some(name) = &args.preset {
                DatasetRecipe::preset(name)?
            } else {
                let behaviors = if args.behavior.is_empty() {
                    vec![BehaviorKind::Inferior]
                } else {
                    args.behavior.clone()
                };
                DatasetRecipe {
                    parts: behaviors
                        .into_iter()
                        .map(|b| DatasetPart {
                            restart: args.restart,
                            ..DatasetPart::new(b, args.n)
                        })
                        .collect(),
                    cap: args.cap,
                    seed: None,
                    filters: args.filter.iter().map(|f| f.parse()).collect::<Result<_, _>>()?,
                    require_optimal_path: args.require_optimal_path,
                }
            };
            let env = Environment::load(&args.env, DEFAULT_DISCOUNT)?;
            let ds = build_dataset(&env, &recipe, cli.seed.unwrap_or(0))?;
            let path = args.output.unwrap_or_else(|| out_dir().join("dataset.jsonl"));
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            ds.save(&path)?;
            if args.csv {
                ds.write_csv(fs::File::create(path.with_extension("csv"))?)?;
            }
            println!("{}", DatasetStats::of(&ds));
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::Oracle(args) => {
            let env = Environment::load(&args.env, DEFAULT_DISCOUNT)?;
            let dataset = args.dataset.as_ref().map(Dataset::load).transpose()?;
            let fallback = if args.strict {
                UnvisitedFallback::Error
            } else {
                UnvisitedFallback::Pessimistic
            };
            let report = oracle_report(&env, dataset.as_ref(), fallback, args.cap)?;
            println!("{report}");
            write_json(&out_dir().join("oracle.json"), &report)?;
            Ok(true)
        }
        Command::Run(args) => {
            let mut spec = match (&cli.config, &args.preset) {
                (Some(path), None) => ExperimentSpec::load(path)?,
                (None, Some(name)) => ExperimentSpec::preset(name)?,
                (Some(_), Some(_)) => {
                    return Err(Error::InvalidArgument("give either --config or --preset".into()))
                }
                (None, None) => {
                    return Err(Error::InvalidArgument("run needs --config FILE or --preset NAME".into()))
                }
            };
            if let Some(seed) = cli.seed {
                spec.seeds = vec![seed];
            }
            let dir = out
                .clone()
                .or_else(|| spec.output.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let outcome = run_grid(&spec, cli.jobs)?;
            let files = write_grid(&spec, &outcome, &dir)?;
            for r in &outcome.records {
                println!(
                    "{:<40} final return {:>8.3}  in-sample oracle {:>8.3}",
                    r.key.stem(),
                    r.final_return,
                    r.oracle.in_sample_return
                );
            }
            for f in &outcome.failures {
                eprintln!("run {:?} failed: {}", f.key, f.error);
            }
            println!("wrote {} files to {} (spec hash {})", files.len(), dir.display(), outcome.spec_hash);
            Ok(outcome.succeeded())
        }
        Command::Percentile(args) => {
            let mut spec: PercentileSpec = match &cli.config {
                Some(path) => read_json(path)?,
                None => PercentileSpec::default(),
            };
            if let Some(f) = args.fraction {
                spec.fraction = f;
            }
            if let Some(t) = args.tau {
                spec.tau = t;
            }
            if let Some(i) = args.iterations {
                spec.iterations = i;
            }
            let base = cli.seed.unwrap_or(0);
            if let Some(n) = args.seeds {
                spec.seeds = (base..base + n).collect();
            } else if cli.seed.is_some() {
                spec.seeds = vec![base];
            }
            let report = run_percentile(&spec, cli.jobs)?;
            print!("{report}");
            let dir = out_dir();
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("percentile.csv"), report.to_csv())?;
            write_json(&dir.join("percentile.json"), &report)?;
            Ok(true)
        }
        Command::Check(args) => {
            let mut config: CheckConfig = match &cli.config {
                Some(path) => read_json(path)?,
                None => CheckConfig::default(),
            };
            if args.quick {
                config.improvement_trials = 10;
                config.bound_trials = 5;
                config.horizon = 100;
                config.softmax_trials = 10;
            }
            if let Some(seed) = cli.seed {
                config.seed = seed;
            }
            config.flip_kl_sign |= args.inject_sign_flip;
            let report = run_checks(&config, cli.jobs)?;
            println!("{report}");
            write_json(&out_dir().join("check.json"), &report)?;
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) | Error::InvalidSpec(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
