//! `loraroute`: train adapter streams, learn routers from memory, evaluate
//! compositions and emit plot-ready CSV tables.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use loraroute::composer::CompositionKind;
use loraroute::harness::{commands, RunConfig};
use loraroute::memory::Regime;
use loraroute::router::Relaxation;

#[derive(Parser)]
#[command(name = "loraroute", version, about = "Per-task low-rank adapters composed by memory-trained routers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the task stream and both router regimes, then evaluate every
    /// composition mode. Prints the run directory.
    Train(RunArgs),
    /// Re-evaluate persisted runs and print an accuracy table (rows are
    /// modes, columns are runs).
    Eval {
        /// Run directories written by `train`.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Composition modes to evaluate; repeat or comma-separate. Default: all.
        #[arg(long = "mode", value_delimiter = ',', value_parser = parse_kind)]
        modes: Vec<CompositionKind>,
        /// CIL or TIL.
        #[arg(long, default_value = "CIL", value_parser = parse_regime)]
        regime: Regime,
    },
    /// Retrain routers on memories of several sizes and record accuracy.
    SweepMemory {
        #[command(flatten)]
        run: RunArgs,
        /// Memory fractions in increasing order.
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.2,0.3")]
        fractions: Vec<f64>,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Compare Gumbel-sigmoid and softmax routers on the same trained streams.
    AblateRelaxation {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        seeds: SeedArgs,
    },
    /// Closed-form forward FLOPs per method at sequence length 128.
    Flops {
        #[command(flatten)]
        run: RunArgs,
        /// Number of adapters; defaults to the configured stream's task count.
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Write per-layer routing-score CSVs for a trained run.
    ExportRoutingScores {
        run_dir: PathBuf,
        /// CIL or TIL.
        #[arg(long, default_value = "CIL", value_parser = parse_regime)]
        regime: Regime,
        /// Target directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Configuration file plus flag overrides. Flags win over the file.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration. Without it the built-in defaults are used.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run seed; also reseeds the backbone and the synthetic generator.
    #[arg(long, env = "LORAROUTE_SEED")]
    seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, env = "LORAROUTE_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    /// wavg, merge-per-input, merge-static, lower-bound, upper-bound or centroid.
    #[arg(long, value_parser = parse_kind)]
    composition: Option<CompositionKind>,
    /// CIL or TIL.
    #[arg(long, value_parser = parse_regime)]
    regime: Option<Regime>,
    /// gumbel-sigmoid or softmax.
    #[arg(long, value_parser = parse_relaxation)]
    relaxation: Option<Relaxation>,
    /// Router temperature, positive.
    #[arg(long)]
    temperature: Option<f64>,
    /// Fraction of each task's training split kept in memory, in (0, 1].
    #[arg(long)]
    memory_fraction: Option<f64>,
    /// Index into the configured task orders.
    #[arg(long)]
    order: Option<usize>,
}

#[derive(Args)]
struct SeedArgs {
    /// Seeds to replicate over; each moves the run, backbone and data seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Worker threads; each seed runs in isolation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

fn parse_kind(s: &str) -> std::result::Result<CompositionKind, String> {
    s.parse()
}

fn parse_regime(s: &str) -> std::result::Result<Regime, String> {
    match s.to_ascii_uppercase().as_str() {
        "CIL" => Ok(Regime::Cil),
        "TIL" => Ok(Regime::Til),
        _ => Err(format!("unknown regime `{s}` (expected CIL or TIL)")),
    }
}

fn parse_relaxation(s: &str) -> std::result::Result<Relaxation, String> {
    [Relaxation::GumbelSigmoid, Relaxation::Softmax]
        .into_iter()
        .find(|r| r.name() == s)
        .ok_or_else(|| format!("unknown relaxation `{s}` (expected gumbel-sigmoid or softmax)"))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(root) = &self.output_root {
            cfg.output_root = root.clone();
        }
        if let Some(k) = self.composition {
            cfg.composition = k;
        }
        if let Some(r) = self.regime {
            cfg.regime = r;
        }
        if let Some(r) = self.relaxation {
            cfg.router.relaxation = r;
        }
        if let Some(t) = self.temperature {
            cfg.router.temperature = t;
        }
        if let Some(p) = self.memory_fraction {
            cfg.memory.fraction = p;
        }
        if let Some(o) = self.order {
            cfg.data.order = o;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_workers(workers: usize) -> Result<()> {
    if workers == 0 {
        bail!("--workers must be at least 1");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let dir = commands::train(&args.resolve()?)?;
            println!("{}", dir.display());
        }
        Command::Eval { run_dirs, modes, regime } => {
            let modes = if modes.is_empty() { CompositionKind::ALL.to_vec() } else { modes };
            print!("{}", commands::eval(&run_dirs, &modes, regime)?);
        }
        Command::SweepMemory { run, fractions, seeds } => {
            check_workers(seeds.workers)?;
            let (path, rows) = commands::sweep(&run.resolve()?, &fractions, &seeds.seeds, seeds.workers)?;
            for r in &rows {
                println!("seed {:>3}  fraction {:<5}  entries {:>5}  accuracy {:.4}", r.seed, r.fraction, r.memory_entries, r.average);
            }
            println!("{}", path.display());
        }
        Command::AblateRelaxation { run, seeds } => {
            check_workers(seeds.workers)?;
            let (path, report) = commands::ablate(&run.resolve()?, &seeds.seeds, seeds.workers)?;
            for r in [Relaxation::GumbelSigmoid, Relaxation::Softmax] {
                println!("{:<15} mean accuracy {:.4}", r.name(), report.mean(r));
            }
            println!("{}", path.display());
        }
        Command::Flops { run, tasks } => {
            let cfg = run.resolve()?;
            let tasks = match tasks {
                Some(t) => t,
                None => cfg.stream()?.num_tasks(),
            };
            let (path, estimates) = commands::flops(&cfg, tasks)?;
            for e in &estimates {
                println!("{:<9} {:>16} FLOPs  ({:.4} GFLOPs)", e.method.name(), e.flops, e.flops as f64 / 1e9);
            }
            println!("{}", path.display());
        }
        Command::ExportRoutingScores { run_dir, regime, out } => {
            for p in commands::export_routing_scores(&run_dir, regime, out.as_deref())? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
