use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hirl_core::baselines::PolicyKind;
use hirl_core::coordinator::{Ablations, Topology};
use hirl_core::harness::{
    self, ConfigFormat, ExperimentConfig, HarnessError, Regime, SWEEP_GAMMA_FAIL, SWEEP_LAMBDAS, SUMMARY_METRICS,
};
use hirl_core::perf::effective_gpu_flops;
use hirl_core::stats;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "hirl", version, about = "Two-tier edge-computing orchestration simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one or more algorithms over the configured regimes.
    Run(RunArgs),
    /// λ × γ_fail sensitivity grid.
    Sweep(SweepArgs),
    /// Confidence intervals of one episode CSV, or a paired test of two.
    Stats(StatsArgs),
    /// Parse and validate a config, printing the normalized form.
    ValidateConfig {
        path: PathBuf,
        /// Print JSON instead of TOML.
        #[arg(long)]
        json: bool,
    },
    /// Print the sampled topology of a seed.
    ScenarioInfo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced desk-scale preset instead of the defaults.
    #[arg(long)]
    desk: bool,
    /// Seeds to run (repeatable); replaces the configured list.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Evaluation episodes per seed.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    train_episodes: Option<usize>,
    /// Output directory; falls back to the config, then HIRL_OUT_DIR.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to named regimes (repeatable).
    #[arg(long = "regime")]
    regimes: Vec<String>,
    #[arg(long)]
    horizon: Option<u32>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_e: Option<f64>,
    #[arg(long)]
    gamma_fail: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Algorithms to run (repeatable); defaults to the configured one.
    #[arg(long = "algorithm")]
    algorithms: Vec<String>,
    /// Ablation to apply: no_coord, no_gpu, no_deadline, no_failure or none.
    #[arg(long = "ablation")]
    ablations: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Regime the grid is evaluated at.
    #[arg(long = "at", default_value = "medium")]
    at: String,
}

#[derive(Args)]
struct StatsArgs {
    /// Episode CSV(s): one for intervals, two for a paired comparison.
    #[arg(required = true, num_args = 1..=2)]
    files: Vec<PathBuf>,
    #[arg(long, default_value = "completion_rate")]
    metric: String,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
    Io(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn base_config(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => harness::load_config(p)?,
        None if c.desk => ExperimentConfig::desk(),
        None => ExperimentConfig::default(),
    };
    if !c.seeds.is_empty() {
        cfg.seeds = c.seeds.clone();
    }
    if let Some(n) = c.episodes {
        cfg.episodes = n;
    }
    if let Some(n) = c.train_episodes {
        cfg.train_episodes = n;
    }
    if let Some(h) = c.horizon {
        cfg.horizon = h;
    }
    if !c.regimes.is_empty() {
        let picked: Result<Vec<Regime>, CliError> = c
            .regimes
            .iter()
            .map(|n| {
                cfg.regime(n)
                    .cloned()
                    .ok_or_else(|| CliError::Config(format!("unknown regime {n:?}")))
            })
            .collect();
        cfg.regimes = picked?;
    }
    let o = &mut cfg.overrides;
    o.lambda = c.lambda.or(o.lambda);
    o.lambda_e = c.lambda_e.or(o.lambda_e);
    o.gamma_fail = c.gamma_fail.or(o.gamma_fail);
    o.beta = c.beta.or(o.beta);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    c.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os("HIRL_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let cfg = base_config(&args.common)?;
    let out = out_dir(&args.common, &cfg);
    let algorithms: Vec<PolicyKind> = if args.algorithms.is_empty() {
        vec![cfg.algorithm]
    } else {
        args.algorithms
            .iter()
            .map(|a| PolicyKind::parse(a).ok_or_else(|| CliError::Config(format!("unknown algorithm {a:?}"))))
            .collect::<Result<_, _>>()?
    };
    let ablations: Vec<Ablations> = if args.ablations.is_empty() {
        vec![cfg.ablations]
    } else {
        args.ablations
            .iter()
            .map(|a| Ablations::parse(a).ok_or_else(|| CliError::Config(format!("unknown ablation {a:?}"))))
            .collect::<Result<_, _>>()?
    };
    for &algorithm in &algorithms {
        for &abl in &ablations {
            let mut c = cfg.clone();
            c.algorithm = algorithm;
            c.ablations = abl;
            for rep in harness::run_matrix(&c, Some(&out))? {
                let s = |m: &str| rep.summary.iter().find(|x| x.metric == m).expect("summarized");
                println!(
                    "{:<16} {:<12} {:<7} completion {:.4} latency {:.3} s energy {:.3} J load {:.1}% ({})",
                    algorithm.label(),
                    abl.label(),
                    rep.regime.name,
                    s("completion_rate").mean,
                    s("cumulative_latency_s").mean,
                    s("total_energy_j").mean,
                    rep.mean_load * 100.0,
                    rep.band.label()
                );
                for f in &rep.files {
                    println!("  wrote {}", f.display());
                }
            }
        }
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let cfg = base_config(&args.common)?;
    let out = out_dir(&args.common, &cfg);
    let regime = cfg
        .regime(&args.at)
        .cloned()
        .ok_or_else(|| CliError::Config(format!("unknown regime {:?}", args.at)))?;
    let rep = harness::run_sweep(&cfg, &regime, &SWEEP_LAMBDAS, &SWEEP_GAMMA_FAIL, Some(&out))?;
    println!("lambda  gamma_fail  completion  latency_s  energy_j  schedules");
    for (i, c) in rep.cells.iter().enumerate() {
        println!(
            "{:<7} {:<11} {:<11.4} {:<10.3} {:<9.3} {}{}",
            c.lambda,
            c.gamma_fail,
            c.completion_rate,
            c.cumulative_latency_s,
            c.total_energy_j,
            if c.epsilon_monotone && c.learning_rate_monotone { "monotone" } else { "NOT monotone" },
            if i == rep.best { "  <- best" } else { "" }
        );
    }
    if let Some(f) = rep.file {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn stats_cmd(args: StatsArgs) -> Result<(), CliError> {
    if let [a, b] = args.files.as_slice() {
        let ma = harness::csv_seed_means(a, &args.metric)?;
        let mb = harness::csv_seed_means(b, &args.metric)?;
        let c = harness::compare(&ma, &mb, &args.metric)?;
        println!(
            "{}: {:.6} vs {:.6} over {} paired seeds (relative {:+.2}%), t = {:.4}, p = {:.6}{}",
            c.metric,
            c.mean_a,
            c.mean_b,
            c.seeds.len(),
            c.relative_diff * 100.0,
            c.test.t,
            c.test.p,
            if c.test.degenerate { " (constant differences)" } else { "" }
        );
        return Ok(());
    }
    let path = &args.files[0];
    let rows = harness::read_episode_csv(path)?;
    let metrics: Vec<&str> = if args.metric == "all" {
        SUMMARY_METRICS.to_vec()
    } else {
        vec![args.metric.as_str()]
    };
    for m in metrics {
        let xs: Vec<f64> = rows
            .iter()
            .map(|r| {
                r.get(m)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| CliError::Io(format!("{}: missing numeric column {m}", path.display())))
            })
            .collect::<Result<_, _>>()?;
        let (mean, half) = stats::ci95(&xs).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("{m}: {mean:.6} ± {half:.6} (95% CI, n = {})", xs.len());
    }
    Ok(())
}

fn validate(path: &Path, json: bool) -> Result<(), CliError> {
    let cfg = harness::load_config(path)?;
    print!("{}", cfg.to_text(if json { ConfigFormat::Json } else { ConfigFormat::Toml }));
    Ok(())
}

fn scenario_info(config: Option<PathBuf>, seed: u64) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => harness::load_config(&p)?,
        None => ExperimentConfig::default(),
    };
    let topo = Topology::sample(&cfg.scenario, seed).map_err(HarnessError::from)?;
    let eff = cfg.scenario.gpu_efficiency;
    println!("seed {seed}: {} devices, {} servers", topo.devices.len(), topo.servers.len());
    for d in &topo.devices {
        let flops = effective_gpu_flops(&d.gpu, eff).map_err(|e| CliError::Config(e.to_string()))?;
        let dist = d.distance_m.iter().map(|x| format!("{x:.0}")).collect::<Vec<_>>().join("/");
        println!(
            "  device {:>2}: cpu {:.2} GHz, p_max {:.2} W, mem {:.1} GB, gpu {:.0} cores ({:.1} TFLOP/s), distance {} m",
            d.id,
            d.cpu_f_max_hz / 1e9,
            d.p_max_w,
            d.mem_bytes / 1e9,
            d.gpu.cuda_cores,
            flops / 1e12,
            dist
        );
    }
    for s in &topo.servers {
        let flops = effective_gpu_flops(&s.gpu, eff).map_err(|e| CliError::Config(e.to_string()))?;
        println!(
            "  server {}: cpu {:.1} GHz, mem {:.0} GB, gpu {:.0} cores ({:.1} TFLOP/s)",
            s.id,
            s.cpu_f_hz / 1e9,
            s.mem_bytes / 1e9,
            s.gpu.cuda_cores,
            flops / 1e12
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Stats(a) => stats_cmd(a),
        Command::ValidateConfig { path, json } => validate(&path, json),
        Command::ScenarioInfo { config, seed } => scenario_info(config, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind, msg) = match e {
                CliError::Config(m) => (EXIT_CONFIG, "configuration error", m),
                CliError::Runtime(m) => (EXIT_RUNTIME, "runtime error", m),
                CliError::Io(m) => (EXIT_IO, "i/o error", m),
            };
            eprintln!("hirl: {kind}: {msg}");
            ExitCode::from(code)
        }
    }
}
