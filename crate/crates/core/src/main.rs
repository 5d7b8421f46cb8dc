use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spikeshort::checkpoint::strip_checkpoint;
use spikeshort::config::RunConfig;
use spikeshort::experiment::{diagnose_dir, run_diagnose, run_eval, run_training, thread_cap};
use spikeshort::network::Mode;
use spikeshort::oracle::{op_suite, proxy_net_suite, CheckOutcome, Mutation, OPS};
use spikeshort::{Error, Result};

#[derive(Parser)]
#[command(name = "spikeshort", version, about = "Spiking network training with shortcut back-propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured mode.
    #[arg(long)]
    mode: Option<Mode>,
    /// Overrides the configured number of timesteps.
    #[arg(long)]
    timesteps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Print the accuracy of a checkpoint as one JSON line.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset container or dataset configuration JSON (test split).
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        timesteps: Option<usize>,
    },
    /// Compare per-layer gradients of vanilla and shortcut networks.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        /// Random configurations per op.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, value_enum, hide = true)]
        mutate: Option<MutateArg>,
    },
    /// Write a copy of a checkpoint without the side heads.
    Strip {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scope {
    Op,
    ProxyNet,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MutateArg {
    Surrogate,
}

fn load_config(path: &Path, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(out) = &o.out {
        cfg.out = out.clone();
    }
    if let Some(m) = o.mode {
        cfg.mode = m;
    }
    if let Some(t) = o.timesteps {
        cfg.network.timesteps = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn json_line<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("value serializes")
}

fn train(config: &Path, overrides: &Overrides, quiet: bool) -> Result<u8> {
    let cfg = load_config(config, overrides)?;
    let run = run_training(&cfg, true, &mut |e| {
        if !quiet {
            eprintln!(
                "epoch {} loss {:.4} lambda {:.4} acc {:.4}",
                e.epoch, e.mean_loss, e.lambda, e.acc
            );
        }
    })?;
    let dir = run.dir.expect("training wrote a run directory");
    eprintln!("run directory {}", dir.display());
    println!("{}", json_line(&run.summary));
    Ok(0)
}

fn diagnose(config: &Path, seeds: &[u64], overrides: &Overrides) -> Result<u8> {
    let cfg = load_config(config, overrides)?;
    let dir = diagnose_dir(&cfg);
    let summary = run_diagnose(&cfg, seeds, Some(&dir), thread_cap()?)?;
    for s in &summary.seeds {
        eprintln!(
            "seed {} ratio vanilla {:.4e} shortcut {:.4e} near-zero vanilla {:.4} shortcut {:.4}",
            s.seed, s.vanilla_ratio, s.shortcut_ratio, s.vanilla_first_near_zero, s.shortcut_first_near_zero
        );
    }
    eprintln!("reports in {}", dir.display());
    println!(
        "{}",
        serde_json::json!({
            "ratio_wins": summary.ratio_wins,
            "near_zero_wins": summary.near_zero_wins,
            "seeds": summary.seeds.len(),
        })
    );
    Ok(0)
}

fn report(name: &str, checks: &[&CheckOutcome]) -> bool {
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("at least one check");
    let ok = checks.iter().all(|c| c.passed());
    println!(
        "{name:<28} worst {:.3e} (seed {}) tol {:.0e} {}",
        worst.max_rel_err,
        worst.seed,
        worst.tol,
        if ok { "ok" } else { "FAIL" }
    );
    ok
}

fn gradcheck(scope: Scope, seeds: u64, mutate: Option<MutateArg>) -> Result<u8> {
    let mutation = match mutate {
        Some(MutateArg::Surrogate) => Mutation::Surrogate,
        None => Mutation::None,
    };
    let mut failures = Vec::new();
    if scope != Scope::ProxyNet {
        let results = op_suite(seeds.max(1), mutation)?;
        for op in OPS {
            let checks: Vec<&CheckOutcome> = results.iter().filter(|c| c.name == *op).collect();
            if !report(op, &checks) {
                failures.extend(checks.into_iter().filter(|c| !c.passed()).cloned());
            }
        }
    }
    if scope != Scope::Op {
        let results = proxy_net_suite(seeds.clamp(1, 10))?;
        let mut names: Vec<&str> = results.iter().map(|c| c.name.as_str()).collect();
        names.dedup();
        for name in names {
            let checks: Vec<&CheckOutcome> = results.iter().filter(|c| c.name == name).collect();
            if !report(name, &checks) {
                failures.extend(checks.into_iter().filter(|c| !c.passed()).cloned());
            }
        }
    }
    if let Some(first) = failures.first() {
        eprintln!(
            "gradient check failed: {} seed {} relative error {:.3e} exceeds {:.0e}",
            first.name, first.seed, first.max_rel_err, first.tol
        );
        return Ok(1);
    }
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train { config, overrides, quiet } => train(&config, &overrides, quiet),
        Command::Eval { checkpoint, dataset, timesteps } => {
            let r = run_eval(&checkpoint, &dataset, timesteps)?;
            println!("{}", json_line(&r));
            Ok(0)
        }
        Command::Diagnose { config, seeds, overrides } => diagnose(&config, &seeds, &overrides),
        Command::Gradcheck { scope, seeds, mutate } => gradcheck(scope, seeds, mutate),
        Command::Strip { checkpoint, out } => {
            if out.exists() {
                return Err(Error::State(format!("{} already exists", out.display())));
            }
            strip_checkpoint(&checkpoint, &out)?;
            Ok(0)
        }
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
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
