use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pimaex_core::config::{RunConfig, RunMode};
use pimaex_core::env::oracle::{compare_with_reference, random_params};
use pimaex_core::env::EnvParams;
use pimaex_core::nn::gradcheck::check_network;
use pimaex_core::{report, rng, runtime, Error};

#[derive(Parser)]
#[command(name = "pimaex", version, about = "Multi-agent exploration with influence-based rewards")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed into a run directory.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint or of every seed of a run.
    Evaluate(EvalArgs),
    /// Comparison figures and tables over run directories.
    Report(ReportArgs),
    /// Compare the environment engine with its reference model.
    OracleCheck(OracleArgs),
    /// Finite-difference check of the network gradients.
    GradCheck(GradArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Episode length 500, 50 explores per level, 5e5 steps, 4 actors.
    #[arg(long)]
    desk_scale: bool,
    /// Train seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long, value_parser = ["async", "sync"])]
    mode: Option<String>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file, or a run directory whose seeds' final checkpoints are used.
    path: PathBuf,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// Output CSV.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, short, default_value = "report")]
    output: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 100_000)]
    steps: u64,
    /// Additional random parameter sets.
    #[arg(long, default_value_t = 20)]
    param_sets: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn resolve(a: &TrainArgs) -> Result<RunConfig, Error> {
    let mut cfg = match (&a.preset, &a.config) {
        (Some(p), None) => RunConfig::preset(p)?,
        (None, Some(path)) => RunConfig::load(path)?,
        (None, None) => return Err(Error::Usage("train needs --preset or --config".into())),
        (Some(_), Some(_)) => return Err(Error::Usage("--preset and --config are mutually exclusive".into())),
    };
    if a.desk_scale {
        cfg = cfg.desk_scale();
    }
    if let Some(n) = a.seeds {
        cfg.runtime.seeds = (0..n).collect();
    }
    if let Some(m) = &a.mode {
        cfg.runtime.mode = if m == "sync" { RunMode::Sync } else { RunMode::Async };
    }
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &a.output {
        cfg.output_dir = out.clone();
    } else if a.config.is_none() {
        cfg.output_dir = PathBuf::from("runs").join(&cfg.preset);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let cfg = resolve(&a)?;
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let s = runtime::run_experiment(&cfg)?;
    for seed in &s.seeds {
        let j = seed.final_eval.get("joint_return").copied().unwrap_or_default();
        println!(
            "seed {}: {} env steps, {} learner steps, final joint return {:.2} ± {:.2}",
            seed.seed, seed.env_steps, seed.learner_steps, j.mean, j.std
        );
    }
    println!("run directory: {}", cfg.output_dir.display());
    Ok(())
}

fn evaluate(a: EvalArgs) -> Result<(), Error> {
    let checkpoints: Vec<PathBuf> = if a.path.is_dir() {
        let cfg = RunConfig::load(&a.path.join("config.json"))?;
        cfg.runtime.seeds.iter().map(|s| a.path.join(format!("seed_{s}/checkpoints/final.json"))).collect()
    } else {
        vec![a.path.clone()]
    };
    let out = a.output.unwrap_or_else(|| {
        let base = if a.path.is_dir() { a.path.clone() } else { PathBuf::from(".") };
        base.join("evaluation.csv")
    });
    if out.exists() {
        std::fs::remove_file(&out)?;
    }
    let mut all = Vec::new();
    for ck in &checkpoints {
        let (eps, _) = runtime::evaluate_checkpoint(ck, a.episodes, &out)?;
        all.extend(eps);
    }
    let summary = pimaex_core::metrics::aggregate(&all);
    let summary_path = out.with_extension("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    for key in ["joint_return", "exploration_coverage", "final_yield"] {
        if let Some(s) = summary.get(key) {
            println!("{key}: {:.4} ± {:.4} (n = {})", s.mean, s.std, s.count);
        }
    }
    println!("{} episodes written to {}", all.len(), out.display());
    Ok(())
}

fn oracle(a: OracleArgs) -> Result<bool, Error> {
    let mut sets = vec![EnvParams::default()];
    let mut r = rng::stream(a.seed, rng::Stream::Init, 0, 0);
    sets.extend((0..a.param_sets).map(|_| random_params(&mut r)));
    let mut ok = true;
    for (k, p) in sets.iter().enumerate() {
        let rep = compare_with_reference(p, a.steps, a.seed + k as u64)?;
        match rep.mismatch {
            None => println!("param set {k}: {} steps, {} episodes, identical", rep.steps, rep.episodes),
            Some(m) => {
                ok = false;
                println!("param set {k}: MISMATCH {m}\n  params: {}", serde_json::to_string(p)?);
            }
        }
    }
    Ok(ok)
}

fn grad_check(a: GradArgs) -> Result<bool, Error> {
    let cfg = RunConfig::default().net_config();
    let mut ok = true;
    for sep in [false, true] {
        let c = pimaex_core::nn::NetConfig { separate_int_value: sep, ..cfg.clone() };
        for seed in 0..a.seeds {
            let g = check_network(&c, seed, a.batch, a.step)?;
            let worst = g.max_rel_err();
            let pass = worst < a.tolerance;
            ok &= pass;
            println!(
                "separate_int_value={sep} seed {seed}: max relative error {worst:.3e} over {} segments {}",
                g.segments.len(),
                if pass { "ok" } else { "FAIL" }
            );
            if !pass {
                for s in g.segments.iter().filter(|s| s.max_rel_err >= a.tolerance) {
                    println!("  {}: {:.3e}", s.segment, s.max_rel_err);
                }
            }
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Report(a) => report::report(&a.runs, &a.output).map(|files| {
            files.iter().for_each(|f| println!("{}", f.display()));
            true
        }),
        Command::OracleCheck(a) => oracle(a),
        Command::GradCheck(a) => grad_check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e @ (Error::Usage(_) | Error::Config(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
