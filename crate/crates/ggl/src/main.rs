use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ggl::persist::{Store, STORE_ENV};
use ggl::run::{preset, preset_names, RunConfig};
use ggl::trainer::{run_sweep, train, TrainOutcome};
use ggl::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ggl",
    version,
    about = "Training and geometry laboratory for modular-arithmetic grokking"
)]
struct Cli {
    /// Run store root (defaults to $GGL_STORE, then ./store).
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a preset or a TOML config file.
    Train(TrainArgs),
    /// Train every point of a preset-by-seed grid, isolating failures.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Built-in starting point; see --list-presets.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML file with a [run] table.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the available presets and exit.
    #[arg(long, exclusive = true)]
    list_presets: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Overrides {
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the weight decay.
    #[arg(long, allow_negative_numbers = true)]
    wd: Option<f64>,
    /// Override the step budget.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Measure update commutators inline every 100 steps.
    #[arg(long)]
    defect_inline: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(wd) = self.wd {
            cfg.weight_decay = wd;
        }
        if let Some(m) = self.max_steps {
            cfg.max_steps = m;
        }
        if self.defect_inline {
            cfg.defect_inline = true;
        }
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep name; the report lands at <store>/sweeps/<name>.toml.
    name: String,
    /// Presets to include (repeatable).
    #[arg(long, required = true)]
    preset: Vec<String>,
    /// Seeds to cross with each preset (defaults to each preset's own).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Measure update commutators inline on every run of the sweep.
    #[arg(long)]
    defect_inline: bool,
}

fn open_store(cli_root: &Option<PathBuf>) -> Result<Store> {
    match cli_root {
        Some(root) => Store::open(root.clone()),
        None => Store::open_default(),
    }
}

fn load_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            RunConfig::from_toml(&text)?
        }
        _ => {
            return Err(Error::config(
                "exactly one of --preset or --config is required",
            ))
        }
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn print_outcome(out: &TrainOutcome) {
    if out.already_complete {
        println!("{}: already complete at step {}", out.run_id, out.last_step);
    } else if let Some(reason) = &out.aborted {
        println!("{}: aborted at step {} ({reason})", out.run_id, out.last_step);
    } else {
        println!(
            "{}: complete at step {} in {:.0}s",
            out.run_id, out.last_step, out.wall_seconds
        );
    }
    for g in &out.grok {
        let grokked = match g.grok_step {
            Some(s) => format!("grokked at step {s}"),
            None => "did not grok".to_string(),
        };
        let confirmed = match g.confirm_step {
            Some(s) => format!(", confirmed from step {s}"),
            None => String::new(),
        };
        println!(
            "  {}: {grokked}{confirmed} (final test acc {:.4})",
            g.task, g.final_test_accuracy
        );
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            if args.list_presets {
                for name in preset_names() {
                    println!("{name}");
                }
                return Ok(());
            }
            let store = open_store(&cli.store)?;
            let cfg = load_config(&args)?;
            log::info!("store: {}", store.root().display());
            let out = train(&store, &cfg)?;
            print_outcome(&out);
            Ok(())
        }
        Command::Sweep(args) => {
            let store = open_store(&cli.store)?;
            let mut grid = Vec::new();
            for name in &args.preset {
                let base = preset(name)?;
                let seeds: Vec<u64> = if args.seeds.is_empty() {
                    vec![base.seed]
                } else {
                    args.seeds.clone()
                };
                for seed in seeds {
                    let mut cfg = base.clone();
                    cfg.seed = seed;
                    cfg.defect_inline = args.defect_inline;
                    cfg.validate()?;
                    grid.push(cfg);
                }
            }
            let report = run_sweep(&store, &args.name, &grid)?;
            for e in &report.entries {
                println!("{}: {}", e.run_id, e.status);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

// Referenced so the env var name stays part of the public contract even
// before any analyze subcommand reads it explicitly.
const _: &str = STORE_ENV;
