use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use reds_core::adversary::Strategy;
use reds_core::analysis::{
    best_point, default_probabilistic_grid, one_threshold_grid, simulate_oscillation, sweep, two_threshold_grid,
    use_based_sim, OscillationModel, UseBasedConfig,
};
use reds_core::harness::{emit_csv, run_batch, run_continuous, write_csv, ExperimentConfig, HarnessError};
use reds_core::sharedrep::{expected_dropoff, Aggregation};

#[derive(Parser)]
#[command(name = "reds-sim", version, about = "Reputation-enhanced redundant DHT lookup simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Halo lookups over a Chord ring
    Halo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        redundancy: Option<String>,
        #[arg(long)]
        kbucket: Option<String>,
        #[arg(long)]
        successors: Option<String>,
    },
    /// Iterative Kademlia lookups
    Kad {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        alpha: Option<String>,
        #[arg(long)]
        beta: Option<String>,
        #[arg(long)]
        replicas: Option<String>,
        #[arg(long)]
        tolerance_bits: Option<String>,
        /// Training lookups per node before the first slot
        #[arg(long)]
        warmup: Option<String>,
    },
    /// Expected attacks of an oscillating attacker
    Oscillation(OscArgs),
    /// Closed-form Drop-off aggregation outcome
    Dropoff(DropArgs),
    /// Use-based attack against shared scores
    Usebased(UseArgs),
}

#[derive(Args)]
struct Common {
    /// key=value file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<String>,
    #[arg(long)]
    colluding: Option<String>,
    #[arg(long)]
    attack_rate: Option<String>,
    #[arg(long)]
    churn: Option<String>,
    /// regular, aboost, collaborative or shared
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    slots: Option<String>,
    #[arg(long)]
    training: Option<String>,
    #[arg(long)]
    probing: Option<String>,
    #[arg(long)]
    instantiations: Option<String>,
    /// Honest nodes injected at the midpoint slot
    #[arg(long)]
    fresh_nodes: Option<String>,
    /// Report mean and standard error over instantiations instead of per-slot rows
    #[arg(long)]
    batch: bool,
    /// CSV destination; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyKind {
    One,
    Two,
    Prob,
}

#[derive(Args)]
struct OscArgs {
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 10_000)]
    lookups: usize,
    #[arg(long, value_enum, default_value_t = StrategyKind::One)]
    strategy: StrategyKind,
    #[arg(long, default_value_t = 0.32)]
    tau: f64,
    #[arg(long, default_value_t = 0.2)]
    low: f64,
    #[arg(long, default_value_t = 0.4)]
    high: f64,
    #[arg(long, default_value_t = 1.0)]
    slope: f64,
    #[arg(long, default_value_t = 0.5)]
    offset: f64,
    /// Search the strategy's parameter grid for the most damaging setting
    #[arg(long)]
    sweep: bool,
}

#[derive(Args)]
struct DropArgs {
    #[arg(long, default_value_t = 5)]
    honest: u32,
    #[arg(long, default_value_t = 6)]
    malicious: u32,
    #[arg(long, default_value_t = 0.1)]
    r_honest: f64,
    #[arg(long, default_value_t = 1.0)]
    r_malicious: f64,
    #[arg(long, default_value_t = 0.3)]
    own: f64,
}

#[derive(Args)]
struct UseArgs {
    #[arg(long, default_value_t = 10_000)]
    nodes: usize,
    #[arg(long, default_value_t = 10_000)]
    lookups: usize,
    #[arg(long, default_value_t = 1)]
    victims: u32,
    #[arg(long, default_value_t = 0.8)]
    serve: f64,
    #[arg(long, default_value_t = 0.8)]
    fail: f64,
    #[arg(long, default_value = "dropoff")]
    aggregation: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::ChurnDomain => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Halo {
            common,
            redundancy,
            kbucket,
            successors,
        } => {
            let extra = [("redundancy", redundancy), ("kbucket", kbucket), ("successors", successors)];
            simulate("halo", common, extra)
        }
        Command::Kad {
            common,
            k,
            alpha,
            beta,
            replicas,
            tolerance_bits,
            warmup,
        } => {
            let extra = [
                ("k", k),
                ("alpha", alpha),
                ("beta", beta),
                ("replicas", replicas),
                ("tolerance_bits", tolerance_bits),
                ("warmup", warmup),
            ];
            simulate("kad", common, extra)
        }
        Command::Oscillation(args) => oscillation(&args),
        Command::Dropoff(args) => {
            let e = expected_dropoff(args.honest, args.malicious, args.r_honest, args.r_malicious, args.own)
                .map_err(|e| Failure::Config(e.to_string()))?;
            println!("p={:.4} q={:.4} expected={:.4}", e.p, e.q, e.expected);
            println!(
                "admitted honest={:.3} malicious={:.3}",
                e.honest_in_bin, e.malicious_in_bin
            );
            Ok(())
        }
        Command::Usebased(args) => {
            let method: Aggregation = args.aggregation.parse().map_err(Failure::Config)?;
            let r = use_based_sim(&UseBasedConfig {
                nodes: args.nodes,
                lookups: args.lookups,
                victims: args.victims,
                serve: args.serve,
                fail: args.fail,
                method,
                seed: args.seed,
                ..UseBasedConfig::default()
            })
            .map_err(|e| Failure::Config(e.to_string()))?;
            println!(
                "victim_overruled={:.2}% trials={} mean_knuckles={:.2}",
                r.percent, r.trials, r.mean_knuckles
            );
            Ok(())
        }
    }
}

fn build_config<const N: usize>(
    dht: &str,
    common: &Common,
    extra: [(&str, Option<String>); N],
) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_kv(&text)?;
    }
    cfg.set("dht", dht)?;
    let flags = [
        ("nodes", &common.nodes),
        ("colluding", &common.colluding),
        ("attack_rate", &common.attack_rate),
        ("churn", &common.churn),
        ("mode", &common.mode),
        ("seed", &common.seed),
        ("slots", &common.slots),
        ("training", &common.training),
        ("probing", &common.probing),
        ("instantiations", &common.instantiations),
        ("fresh_nodes", &common.fresh_nodes),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for (key, value) in &extra {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate<const N: usize>(dht: &str, common: Common, extra: [(&str, Option<String>); N]) -> Result<(), Failure> {
    let cfg = build_config(dht, &common, extra)?;
    if common.batch {
        let s = run_batch(&cfg)?;
        println!("failure {}", s.failure);
        println!("path_length {}", s.path_length);
        if let Some(p) = s.pollution {
            println!("pollution {p}");
        }
        if let Some(f) = s.fresh_failure {
            println!("fresh_failure {f}");
        }
        return Ok(());
    }
    let res = run_continuous(&cfg)?;
    match &common.out {
        Some(path) => emit_csv(&res.records, path)?,
        None => write_csv(&res.records, io::stdout().lock())?,
    }
    eprintln!(
        "steady-state failure {:.4}, path length {:.3}, departures {}, arrivals {}",
        res.steady_failure(),
        res.steady_path_length(),
        res.departures,
        res.arrivals
    );
    Ok(())
}

fn oscillation(args: &OscArgs) -> Result<(), Failure> {
    let model = OscillationModel {
        lookups: args.lookups,
        ..OscillationModel::new(args.alpha, args.beta)
    };
    let bad = |e: reds_core::analysis::AnalysisError| Failure::Config(e.to_string());
    if args.sweep {
        let grid = match args.strategy {
            StrategyKind::One => one_threshold_grid(0.05),
            StrategyKind::Two => two_threshold_grid(0.05),
            StrategyKind::Prob => default_probabilistic_grid(),
        };
        let best = best_point(&sweep(&model, &grid).map_err(bad)?).ok_or_else(|| Failure::Run("empty grid".into()))?;
        println!("best {:?} attacked_fraction={:.4}", best.strategy, best.attacked_fraction);
        return Ok(());
    }
    let strategy = match args.strategy {
        StrategyKind::One => Strategy::OneThreshold(args.tau),
        StrategyKind::Two => Strategy::TwoThreshold {
            low: args.low,
            high: args.high,
        },
        StrategyKind::Prob => Strategy::Probabilistic {
            slope: args.slope,
            offset: args.offset,
        },
    };
    let run = simulate_oscillation(&model, strategy).map_err(bad)?;
    let (score, pick) = run.settled();
    println!(
        "expected_attacks={:.4} attacked_fraction={:.4} settled_score={:.4} settled_pick={:.4}",
        run.expected_attacks,
        run.attacked_fraction(),
        score,
        pick
    );
    Ok(())
}
