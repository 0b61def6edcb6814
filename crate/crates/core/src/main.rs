use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use cfdt::experiment::{self, ExperimentConfig, RunDir, RunReport, Scenario, Variant};
use clap::{Args, Parser, Subcommand};

/// Counterfactual data augmentation for decision transformers on a
/// random-obstacle gridworld.
#[derive(Parser)]
#[command(name = "cfdt", version)]
struct Cli {
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON or TOML (by extension) experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenario: Option<Scenario>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Run directory created by `gen`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VariantArgs {
    #[arg(long)]
    out: PathBuf,
    /// Agent variant; all applicable variants when omitted.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw source, counterfactual and target layouts.
    Gen(ConfigArgs),
    /// Roll out the source policy and estimate per-layout effects.
    Collect(RunArgs),
    /// Train decision transformers.
    Train(VariantArgs),
    /// Evaluate agents on the target layouts.
    Eval(VariantArgs),
    /// Combine evaluation results into report.json and report.csv.
    Report(RunArgs),
    /// All stages in order.
    Run(ConfigArgs),
    /// Print the default configuration as JSON.
    DefaultConfig,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(s) = args.scenario {
        cfg = cfg.with_scenario(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &RunReport) {
    println!("{:<12} {:>12} {:>12} {:>10}", "agent", "mean_return", "mean_length", "goal_rate");
    for a in &report.agents {
        println!(
            "{:<12} {:>12.4} {:>12.2} {:>10.3}",
            a.variant.name(),
            a.mean_return,
            a.mean_length,
            a.goal_rate
        );
    }
    for o in &report.orderings {
        println!(
            "{} {} >= {} + {:.2}: {:.3} vs {:.3}",
            if o.passed { "PASS" } else { "FAIL" },
            o.lhs,
            o.rhs,
            o.margin,
            o.lhs_goal_rate,
            o.rhs_goal_rate
        );
    }
}

fn selected(variant: Option<Variant>, all: &[Variant]) -> Vec<Variant> {
    variant.map_or_else(|| all.to_vec(), |v| vec![v])
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Gen(args) => {
            let cfg = load_config(&args)?;
            let m = experiment::gen(&cfg, &RunDir::new(&args.out))?;
            println!(
                "source {} | {} counterfactual | {} target | overlap {}",
                m.source_layout, m.n_counterfactual_layouts, m.n_target_layouts, m.target_overlap
            );
        }
        Command::Collect(args) => {
            let d = experiment::collect(&RunDir::new(&args.out))?;
            println!(
                "{} factual, {} counterfactual trajectories, {} ATE rows",
                d.factual.len(),
                d.counterfactual.len(),
                d.ate.len()
            );
        }
        Command::Train(args) => {
            let run = RunDir::new(&args.out);
            for v in selected(args.variant, &Variant::TRAINED) {
                let start = Instant::now();
                experiment::train(&run, v).with_context(|| format!("training {v}"))?;
                eprintln!("trained {v} in {:.1}s", start.elapsed().as_secs_f64());
            }
        }
        Command::Eval(args) => {
            let run = RunDir::new(&args.out);
            for v in selected(args.variant, &Variant::ALL) {
                let s = experiment::eval(&run, v).with_context(|| format!("evaluating {v}"))?;
                println!(
                    "{v}: mean return {:.4}, mean length {:.2}, goal rate {:.3}",
                    s.mean_return, s.mean_length, s.goal_rate
                );
            }
        }
        Command::Report(args) => print_report(&experiment::report(&RunDir::new(&args.out))?),
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let start = Instant::now();
            let report = experiment::run_all(&cfg, &RunDir::new(&args.out), |stage| {
                eprintln!("[{:>7.1}s] {stage}", start.elapsed().as_secs_f64())
            })?;
            print_report(&report);
        }
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
        }
    }
    Ok(())
}
