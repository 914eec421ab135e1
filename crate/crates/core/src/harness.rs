//! Experiment configuration, run matrices, CSV persistence and sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{PolicyKind, QpsoConfig};
use crate::coordinator::{Ablations, Agents, EpisodeMetrics, SimConfig, SimError, TaskStatus, Td3Cadence, Topology, World};
use crate::ddqn::{self, DdqnConfig};
use crate::environment::Scenario;
use crate::perf::{CostParams, Placement};
use crate::queueing::LoadWeights;
use crate::stats;
use crate::td3::Td3Config;

/// Version of every CSV layout written here. Bump on any column change.
pub const SCHEMA_VERSION: u32 = 1;

pub const EPISODE_COLUMNS: [&str; 38] = [
    "schema_version",
    "algorithm",
    "ablation",
    "regime",
    "rate",
    "seed",
    "episode",
    "generated",
    "completed",
    "failed",
    "completion_rate",
    "cumulative_latency_s",
    "mean_latency_s",
    "total_energy_j",
    "device_cpu_energy_j",
    "tx_energy_j",
    "gpu_energy_j",
    "mean_load",
    "sli_pct",
    "slots",
    "offload_fraction",
    "masking_violations",
    "risk_flags",
    "mean_cpu_frac",
    "mean_power_frac",
    "kind_cpu_generated",
    "kind_cpu_completed",
    "kind_cpu_latency_s",
    "kind_cpu_energy_j",
    "kind_gpu_generated",
    "kind_gpu_completed",
    "kind_gpu_latency_s",
    "kind_gpu_energy_j",
    "kind_io_generated",
    "kind_io_completed",
    "kind_io_latency_s",
    "kind_io_energy_j",
    "sli_band",
];

pub const TASK_COLUMNS: [&str; 16] = [
    "schema_version",
    "algorithm",
    "ablation",
    "regime",
    "seed",
    "episode",
    "task",
    "kind",
    "priority",
    "origin_device",
    "placement",
    "completed",
    "latency_s",
    "energy_j",
    "slack_s",
    "fail_risk",
];

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "schema_version",
    "algorithm",
    "ablation",
    "regime",
    "rate",
    "sli_band",
    "metric",
    "n",
    "mean",
    "std",
    "ci95_half",
];

pub const SWEEP_COLUMNS: [&str; 11] = [
    "schema_version",
    "regime",
    "lambda",
    "gamma_fail",
    "completion_rate",
    "cumulative_latency_s",
    "total_energy_j",
    "mean_load",
    "epsilon_monotone",
    "learning_rate_monotone",
    "best",
];

/// Metrics summarized per (algorithm, regime) file.
pub const SUMMARY_METRICS: [&str; 10] = [
    "completion_rate",
    "cumulative_latency_s",
    "mean_latency_s",
    "total_energy_j",
    "mean_load",
    "offload_fraction",
    "masking_violations",
    "risk_flags",
    "mean_cpu_frac",
    "mean_power_frac",
];

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{field} = {value} is out of range: {expected}")]
    Range {
        field: String,
        value: String,
        expected: &'static str,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv {path}: {message}")]
    Csv { path: String, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Stats(#[from] stats::StatsError),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Range { .. } | Self::Invalid(_) | Self::Parse { .. })
            || matches!(self, Self::Sim(SimError::Scenario(_) | SimError::Config(_)))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Self::Io { .. } | Self::Csv { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub name: String,
    pub rate: usize,
}

impl Regime {
    pub fn new(name: &str, rate: usize) -> Self {
        Self {
            name: name.into(),
            rate,
        }
    }
}

/// Optional single-value overrides used by sensitivity studies.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub lambda_e: Option<f64>,
    pub gamma_fail: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: PolicyKind,
    pub ablations: Ablations,
    /// Learning episodes run before evaluation (skipped by static policies).
    pub train_episodes: usize,
    /// Evaluation episodes per seed; one CSV row each.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub regimes: Vec<Regime>,
    pub horizon: u32,
    pub td3_cadence: Td3Cadence,
    /// Scenario file read at load time; its contents replace `scenario`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub write_tasks: bool,
    pub overrides: Overrides,
    pub cost: CostParams,
    pub load_weights: LoadWeights,
    pub td3: Td3Config,
    pub ddqn: DdqnConfig,
    pub qpso: QpsoConfig,
    pub scenario: Scenario,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: PolicyKind::Hirl,
            ablations: Ablations::default(),
            train_episodes: 150,
            episodes: 30,
            seeds: (0..5).collect(),
            regimes: vec![Regime::new("low", 4), Regime::new("medium", 8), Regime::new("high", 16)],
            horizon: 200,
            td3_cadence: Td3Cadence::PerDevice,
            scenario_file: None,
            output_dir: None,
            write_tasks: true,
            overrides: Overrides::default(),
            cost: CostParams::default(),
            load_weights: LoadWeights::default(),
            td3: Td3Config::default(),
            ddqn: DdqnConfig::default(),
            qpso: QpsoConfig::default(),
            scenario: Scenario::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl ConfigFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ConfigFormat::Json,
            _ => ConfigFormat::Toml,
        }
    }
}

fn range(field: &str, value: f64, ok: bool, expected: &'static str) -> Result<(), HarnessError> {
    if ok && !value.is_nan() {
        Ok(())
    } else {
        Err(HarnessError::Range {
            field: field.into(),
            value: value.to_string(),
            expected,
        })
    }
}

fn unit(field: &str, v: f64) -> Result<(), HarnessError> {
    range(field, v, (0.0..=1.0).contains(&v), "must lie in [0, 1]")
}

fn non_negative(field: &str, v: f64) -> Result<(), HarnessError> {
    range(field, v, v >= 0.0 && v.is_finite(), "must be finite and non-negative")
}

fn positive(field: &str, v: f64) -> Result<(), HarnessError> {
    range(field, v, v > 0.0 && v.is_finite(), "must be finite and positive")
}

fn at_least(field: &str, v: usize, min: usize) -> Result<(), HarnessError> {
    if v >= min {
        Ok(())
    } else {
        Err(HarnessError::Range {
            field: field.into(),
            value: v.to_string(),
            expected: if min == 1 { "must be at least 1" } else { "must be at least 2" },
        })
    }
}

fn hidden(field: &str, h: &[usize]) -> Result<(), HarnessError> {
    if h.is_empty() || h.contains(&0) {
        return Err(HarnessError::Range {
            field: field.into(),
            value: format!("{h:?}"),
            expected: "must list at least one positive layer width",
        });
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reduced desk-scale settings: smaller hidden layers.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.td3.hidden = vec![64, 64];
        c.ddqn.hidden = vec![64, 64];
        c
    }

    pub fn parse(text: &str, format: ConfigFormat, origin: &str) -> Result<Self, HarnessError> {
        let parsed = match format {
            ConfigFormat::Toml => toml::from_str::<Self>(text).map_err(|e| e.to_string()),
            ConfigFormat::Json => serde_json::from_str::<Self>(text).map_err(|e| e.to_string()),
        };
        let cfg = parsed.map_err(|message| HarnessError::Parse {
            path: origin.into(),
            message,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self, format: ConfigFormat) -> String {
        match format {
            ConfigFormat::Toml => toml::to_string(self).expect("config serializes to TOML"),
            ConfigFormat::Json => serde_json::to_string_pretty(self).expect("config serializes to JSON"),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        at_least("episodes", self.episodes, 1)?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Invalid("seeds must not be empty".into()));
        }
        if self.regimes.is_empty() {
            return Err(HarnessError::Invalid("regimes must not be empty".into()));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if r.name.is_empty() || !r.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(HarnessError::Invalid(format!("regime name {:?} must be a plain identifier", r.name)));
            }
            if self.regimes[..i].iter().any(|o| o.name == r.name) {
                return Err(HarnessError::Invalid(format!("duplicate regime {:?}", r.name)));
            }
        }
        if self.horizon < 5 {
            return Err(HarnessError::Range {
                field: "horizon".into(),
                value: self.horizon.to_string(),
                expected: "must be at least 5",
            });
        }
        let c = &self.cost;
        unit("cost.lambda", c.lambda)?;
        non_negative("cost.lambda_e", c.lambda_e)?;
        non_negative("cost.alpha_fail", c.alpha_fail)?;
        positive("cost.kappa", c.kappa)?;
        positive("cost.slot_s", c.slot_s)?;
        let o = &self.overrides;
        if let Some(v) = o.lambda {
            unit("overrides.lambda", v)?;
        }
        if let Some(v) = o.lambda_e {
            non_negative("overrides.lambda_e", v)?;
        }
        if let Some(v) = o.gamma_fail {
            non_negative("overrides.gamma_fail", v)?;
        }
        if let Some(v) = o.beta {
            non_negative("overrides.beta", v)?;
        }
        if !self.load_weights.is_valid() {
            return Err(HarnessError::Invalid(
                "load_weights must be non-negative and sum to 1".into(),
            ));
        }
        let d = &self.ddqn;
        hidden("ddqn.hidden", &d.hidden)?;
        unit("ddqn.eps_min", d.eps_min)?;
        unit("ddqn.eps_max", d.eps_max)?;
        range("ddqn.eps_max", d.eps_max, d.eps_max >= d.eps_min, "must not be below ddqn.eps_min")?;
        non_negative("ddqn.beta", d.beta)?;
        positive("ddqn.eta_base", d.eta_base)?;
        non_negative("ddqn.alpha_lr", d.alpha_lr)?;
        unit("ddqn.discount", d.discount)?;
        non_negative("ddqn.gamma_fail", d.gamma_fail)?;
        non_negative("ddqn.theta_min", d.theta_min)?;
        at_least("ddqn.batch", d.batch, 1)?;
        at_least("ddqn.buffer", d.buffer, d.batch.max(1))?;
        at_least("ddqn.hard_update", d.hard_update as usize, 1)?;
        let t = &self.td3;
        hidden("td3.hidden", &t.hidden)?;
        positive("td3.actor_lr", t.actor_lr)?;
        positive("td3.critic_lr", t.critic_lr)?;
        unit("td3.discount", t.discount)?;
        unit("td3.tau", t.tau)?;
        non_negative("td3.sigma_base", t.sigma_base)?;
        non_negative("td3.noise_alpha", t.noise_alpha)?;
        non_negative("td3.target_noise", t.target_noise)?;
        non_negative("td3.target_noise_clip", t.target_noise_clip)?;
        non_negative("td3.gamma_fail", t.gamma_fail)?;
        at_least("td3.batch", t.batch, 1)?;
        at_least("td3.buffer", t.buffer, t.batch.max(1))?;
        at_least("td3.policy_delay", t.policy_delay as usize, 1)?;
        at_least("qpso.particles", self.qpso.particles, 2)?;
        self.scenario
            .validate()
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Simulation settings for one regime with overrides applied.
    pub fn sim_config(&self, regime: &Regime) -> SimConfig {
        let mut cost = self.cost;
        let mut td3 = self.td3.clone();
        let mut ddqn = self.ddqn.clone();
        let o = self.overrides;
        if let Some(v) = o.lambda {
            cost.lambda = v;
        }
        if let Some(v) = o.lambda_e {
            cost.lambda_e = v;
        }
        if let Some(v) = o.gamma_fail {
            ddqn.gamma_fail = v;
            td3.gamma_fail = v;
        }
        if let Some(v) = o.beta {
            ddqn.beta = v;
        }
        SimConfig {
            algorithm: self.algorithm,
            ablations: self.ablations,
            rate_per_slot: regime.rate,
            horizon: self.horizon,
            cost,
            load_weights: self.load_weights,
            td3,
            ddqn,
            qpso: self.qpso.clone(),
            td3_cadence: self.td3_cadence,
        }
    }

    pub fn regime(&self, name: &str) -> Option<&Regime> {
        self.regimes.iter().find(|r| r.name == name)
    }

    /// Base name of the files written for one regime.
    pub fn file_stem(&self, regime: &Regime) -> String {
        let abl = self.ablations.label();
        if abl == "none" {
            format!("{}_{}", self.algorithm.label(), regime.name)
        } else {
            format!("{}_{}_{}", self.algorithm.label(), abl, regime.name)
        }
    }
}

/// Reads a TOML (or `.json`) experiment file. A referenced scenario file is
/// resolved relative to the config file and inlined.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut cfg = ExperimentConfig::parse(&text, ConfigFormat::from_path(path), &path.display().to_string())?;
    if let Some(file) = cfg.scenario_file.take() {
        let full = if file.is_relative() {
            path.parent().unwrap_or(Path::new(".")).join(file)
        } else {
            file
        };
        cfg.scenario = load_scenario(&full)?;
        cfg.validate()?;
    }
    Ok(cfg)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parsed = match ConfigFormat::from_path(path) {
        ConfigFormat::Toml => toml::from_str::<Scenario>(&text).map_err(|e| e.to_string()),
        ConfigFormat::Json => serde_json::from_str::<Scenario>(&text).map_err(|e| e.to_string()),
    };
    let s = parsed.map_err(|message| HarnessError::Parse {
        path: path.display().to_string(),
        message,
    })?;
    s.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliBand {
    Low,
    Medium,
    High,
    Outside,
}

impl SliBand {
    /// Reference bands: 10–30%, 30–60% and 60–90% of the load index.
    pub fn of(mean_load: f64) -> Self {
        let pct = mean_load * 100.0;
        if (10.0..30.0).contains(&pct) {
            SliBand::Low
        } else if (30.0..60.0).contains(&pct) {
            SliBand::Medium
        } else if (60.0..=90.0).contains(&pct) {
            SliBand::High
        } else {
            SliBand::Outside
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SliBand::Low => "low",
            SliBand::Medium => "medium",
            SliBand::High => "high",
            SliBand::Outside => "outside",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRow {
    pub seed: u64,
    pub episode: usize,
    pub task: u64,
    pub kind: &'static str,
    pub priority: u8,
    pub origin_device: usize,
    pub placement: Placement,
    pub completed: bool,
    pub latency_s: f64,
    pub energy_j: f64,
    pub slack_s: f64,
    pub fail_risk: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub seed: u64,
    pub episode: usize,
    pub metrics: EpisodeMetrics,
}

/// Evaluation results of one (regime, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub rows: Vec<EpisodeRow>,
    pub tasks: Vec<TaskRow>,
}

/// Trains on `train_episodes` episodes, then evaluates greedily. Episode
/// `e` of every policy sees the same environment stream, so results pair
/// across algorithms.
pub fn run_cell(cfg: &ExperimentConfig, regime: &Regime, seed: u64) -> Result<CellResult, HarnessError> {
    let sim = cfg.sim_config(regime);
    let topo = Topology::sample(&cfg.scenario, seed)?;
    let mut agents = Agents::new(&sim, topo.servers.len(), seed)?;
    let learns = sim.algorithm.uses_ddqn() || sim.algorithm.uses_td3();
    if learns {
        for ep in 0..cfg.train_episodes {
            World::new(&topo, sim.clone(), seed, ep as u64, true)?.run_episode(&mut agents)?;
        }
    }
    let mut out = CellResult {
        rows: Vec::with_capacity(cfg.episodes),
        tasks: Vec::new(),
    };
    for e in 0..cfg.episodes {
        let ep = (cfg.train_episodes + e) as u64;
        let mut world = World::new(&topo, sim.clone(), seed, ep, false)?;
        let (metrics, _) = world.run_episode(&mut agents)?;
        if cfg.write_tasks {
            for rec in &world.tasks {
                let o = rec.outcome();
                out.tasks.push(TaskRow {
                    seed,
                    episode: e,
                    task: rec.task.id,
                    kind: rec.task.kind.label(),
                    priority: rec.task.priority_b,
                    origin_device: rec.task.origin_device,
                    placement: rec.placement,
                    completed: rec.status == TaskStatus::Completed,
                    latency_s: o.d_total_s,
                    energy_j: o.energy_j,
                    slack_s: rec.task.deadline_ddl_s - rec.task.created_t,
                    fail_risk: rec.fail_risk,
                });
            }
        }
        out.rows.push(EpisodeRow {
            seed,
            episode: e,
            metrics,
        });
    }
    Ok(out)
}

/// Numeric fields of a row, keyed by column name.
pub fn metric_value(m: &EpisodeMetrics, name: &str) -> Option<f64> {
    let k = |i: usize| &m.per_kind[i];
    Some(match name {
        "generated" => m.generated as f64,
        "completed" => m.completed as f64,
        "failed" => m.failed as f64,
        "completion_rate" => m.completion_rate,
        "cumulative_latency_s" => m.cumulative_latency_s,
        "mean_latency_s" => m.mean_latency_s,
        "total_energy_j" => m.total_energy_j,
        "device_cpu_energy_j" => m.device_cpu_energy_j,
        "tx_energy_j" => m.tx_energy_j,
        "gpu_energy_j" => m.gpu_energy_j,
        "mean_load" => m.mean_load,
        "sli_pct" => m.mean_load * 100.0,
        "slots" => m.slots as f64,
        "offload_fraction" => m.offload_fraction,
        "masking_violations" => m.masking_violations as f64,
        "risk_flags" => m.risk_flags as f64,
        "mean_cpu_frac" => m.mean_cpu_frac,
        "mean_power_frac" => m.mean_power_frac,
        "kind_cpu_generated" => k(0).generated as f64,
        "kind_cpu_completed" => k(0).completed as f64,
        "kind_cpu_latency_s" => k(0).latency_s,
        "kind_cpu_energy_j" => k(0).energy_j,
        "kind_gpu_generated" => k(1).generated as f64,
        "kind_gpu_completed" => k(1).completed as f64,
        "kind_gpu_latency_s" => k(1).latency_s,
        "kind_gpu_energy_j" => k(1).energy_j,
        "kind_io_generated" => k(2).generated as f64,
        "kind_io_completed" => k(2).completed as f64,
        "kind_io_latency_s" => k(2).latency_s,
        "kind_io_energy_j" => k(2).energy_j,
        _ => return None,
    })
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

fn placement_label(p: Placement) -> String {
    match p {
        Placement::Local => "local".into(),
        Placement::Server(k) => format!("server{}", k + 1),
    }
}

/// Writes through a `.partial` sibling that is renamed once complete; on
/// failure the `.partial` file stays behind.
fn write_atomic(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    let csv_err = |e: csv::Error| HarnessError::Csv {
        path: partial.display().to_string(),
        message: e.to_string(),
    };
    {
        let file = fs::File::create(&partial).map_err(io_err(&partial))?;
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let mut file = w.into_inner().map_err(|e| HarnessError::Csv {
            path: partial.display().to_string(),
            message: e.to_string(),
        })?;
        file.flush().map_err(io_err(&partial))?;
    }
    fs::rename(&partial, path).map_err(io_err(path))
}

fn episode_record(cfg: &ExperimentConfig, regime: &Regime, row: &EpisodeRow) -> Vec<String> {
    let mut rec = vec![
        SCHEMA_VERSION.to_string(),
        cfg.algorithm.label().into(),
        cfg.ablations.label(),
        regime.name.clone(),
        regime.rate.to_string(),
        row.seed.to_string(),
        row.episode.to_string(),
    ];
    for col in &EPISODE_COLUMNS[7..EPISODE_COLUMNS.len() - 1] {
        rec.push(num(metric_value(&row.metrics, col).expect("every metric column has a value")));
    }
    rec.push(SliBand::of(row.metrics.mean_load).label().into());
    rec
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub metric: &'static str,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// Undefined (NaN) for a single sample.
    pub ci95_half: f64,
}

pub fn summarize(rows: &[EpisodeRow]) -> Vec<MetricSummary> {
    SUMMARY_METRICS
        .iter()
        .map(|&metric| {
            let xs: Vec<f64> = rows
                .iter()
                .map(|r| metric_value(&r.metrics, metric).expect("summary metric exists"))
                .collect();
            let (mean, half) = stats::ci95(&xs).unwrap_or((stats::mean(&xs), f64::NAN));
            MetricSummary {
                metric,
                n: xs.len(),
                mean,
                std: stats::std_dev(&xs),
                ci95_half: half,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegimeReport {
    pub regime: Regime,
    pub rows: Vec<EpisodeRow>,
    pub tasks: Vec<TaskRow>,
    pub summary: Vec<MetricSummary>,
    pub mean_load: f64,
    pub band: SliBand,
    pub files: Vec<PathBuf>,
}

impl RegimeReport {
    pub fn mean_of(&self, metric: &str) -> f64 {
        let xs: Vec<f64> = self.rows.iter().filter_map(|r| metric_value(&r.metrics, metric)).collect();
        stats::mean(&xs)
    }

    /// Per-seed average of `metric` over the evaluation episodes.
    pub fn seed_means(&self, metric: &str) -> BTreeMap<u64, f64> {
        seed_means(&self.rows, metric)
    }
}

pub fn seed_means(rows: &[EpisodeRow], metric: &str) -> BTreeMap<u64, f64> {
    let mut acc: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = metric_value(&r.metrics, metric) {
            acc.entry(r.seed).or_default().push(v);
        }
    }
    acc.into_iter().map(|(s, v)| (s, stats::mean(&v))).collect()
}

/// Runs every regime × seed for the configured algorithm. With `out` set,
/// writes `<stem>.csv`, `<stem>_summary.csv` and (optionally)
/// `<stem>_tasks.csv` per regime.
pub fn run_matrix(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RegimeReport>, HarnessError> {
    cfg.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut reports = Vec::new();
    for regime in &cfg.regimes {
        let mut rows = Vec::new();
        let mut tasks = Vec::new();
        for &seed in &cfg.seeds {
            let cell = run_cell(cfg, regime, seed)?;
            rows.extend(cell.rows);
            tasks.extend(cell.tasks);
        }
        let summary = summarize(&rows);
        let mean_load = stats::mean(&rows.iter().map(|r| r.metrics.mean_load).collect::<Vec<_>>());
        let band = SliBand::of(mean_load);
        log::info!(
            "{} {}: rate {} mean load index {:.1}% ({} band)",
            cfg.algorithm.label(),
            regime.name,
            regime.rate,
            mean_load * 100.0,
            band.label()
        );
        let mut files = Vec::new();
        if let Some(dir) = out {
            let stem = cfg.file_stem(regime);
            let path = dir.join(format!("{stem}.csv"));
            let recs: Vec<Vec<String>> = rows.iter().map(|r| episode_record(cfg, regime, r)).collect();
            write_atomic(&path, &EPISODE_COLUMNS, &recs)?;
            files.push(path);

            let path = dir.join(format!("{stem}_summary.csv"));
            let recs: Vec<Vec<String>> = summary
                .iter()
                .map(|s| {
                    vec![
                        SCHEMA_VERSION.to_string(),
                        cfg.algorithm.label().into(),
                        cfg.ablations.label(),
                        regime.name.clone(),
                        regime.rate.to_string(),
                        band.label().into(),
                        s.metric.into(),
                        s.n.to_string(),
                        num(s.mean),
                        num(s.std),
                        num(s.ci95_half),
                    ]
                })
                .collect();
            write_atomic(&path, &SUMMARY_COLUMNS, &recs)?;
            files.push(path);

            if cfg.write_tasks {
                let path = dir.join(format!("{stem}_tasks.csv"));
                let recs: Vec<Vec<String>> = tasks
                    .iter()
                    .map(|t| {
                        vec![
                            SCHEMA_VERSION.to_string(),
                            cfg.algorithm.label().into(),
                            cfg.ablations.label(),
                            regime.name.clone(),
                            t.seed.to_string(),
                            t.episode.to_string(),
                            t.task.to_string(),
                            t.kind.into(),
                            t.priority.to_string(),
                            t.origin_device.to_string(),
                            placement_label(t.placement),
                            u8::from(t.completed).to_string(),
                            num(t.latency_s),
                            num(t.energy_j),
                            num(t.slack_s),
                            u8::from(t.fail_risk).to_string(),
                        ]
                    })
                    .collect();
                write_atomic(&path, &TASK_COLUMNS, &recs)?;
                files.push(path);
            }
        }
        reports.push(RegimeReport {
            regime: regime.clone(),
            rows,
            tasks,
            summary,
            mean_load,
            band,
            files,
        });
    }
    Ok(reports)
}

/// Rows of an episode CSV as column → value maps, checking the schema.
pub fn read_episode_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>, HarnessError> {
    let csv_err = |message: String| HarnessError::Csv {
        path: path.display().to_string(),
        message,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header.first().map(String::as_str) != Some("schema_version") {
        return Err(csv_err("first column must be schema_version".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(e.to_string()))?;
        let row: BTreeMap<String, String> = header.iter().cloned().zip(rec.iter().map(String::from)).collect();
        if row.get("schema_version").map(String::as_str) != Some(&SCHEMA_VERSION.to_string()) {
            return Err(csv_err(format!(
                "schema version {:?} is not {SCHEMA_VERSION}",
                row.get("schema_version")
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Per-seed means of `metric` from an episode CSV.
pub fn csv_seed_means(path: &Path, metric: &str) -> Result<BTreeMap<u64, f64>, HarnessError> {
    let csv_err = |message: String| HarnessError::Csv {
        path: path.display().to_string(),
        message,
    };
    let mut acc: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for row in read_episode_csv(path)? {
        let seed: u64 = row
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| csv_err("missing or invalid seed".into()))?;
        let v: f64 = row
            .get(metric)
            .ok_or_else(|| csv_err(format!("no column {metric}")))?
            .parse()
            .map_err(|_| csv_err(format!("non-numeric {metric}")))?;
        acc.entry(seed).or_default().push(v);
    }
    Ok(acc.into_iter().map(|(s, v)| (s, stats::mean(&v))).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub seeds: Vec<u64>,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `(mean_a − mean_b) / mean_b`.
    pub relative_diff: f64,
    pub test: stats::PairedT,
}

/// Paired comparison over the seeds the two sides share.
pub fn compare(a: &BTreeMap<u64, f64>, b: &BTreeMap<u64, f64>, metric: &str) -> Result<Comparison, HarnessError> {
    let seeds: Vec<u64> = a.keys().filter(|s| b.contains_key(s)).copied().collect();
    let xa: Vec<f64> = seeds.iter().map(|s| a[s]).collect();
    let xb: Vec<f64> = seeds.iter().map(|s| b[s]).collect();
    let test = stats::paired_t(&xa, &xb)?;
    let (mean_a, mean_b) = (stats::mean(&xa), stats::mean(&xb));
    Ok(Comparison {
        metric: metric.into(),
        seeds,
        mean_a,
        mean_b,
        relative_diff: (mean_a - mean_b) / mean_b,
        test,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub lambda: f64,
    pub gamma_fail: f64,
    pub completion_rate: f64,
    pub cumulative_latency_s: f64,
    pub total_energy_j: f64,
    pub mean_load: f64,
    pub epsilon_monotone: bool,
    pub learning_rate_monotone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub regime: Regime,
    pub cells: Vec<SweepCell>,
    /// Index of the cell with the highest completion rate (ties: lower
    /// latency, then grid order).
    pub best: usize,
    pub file: Option<PathBuf>,
}

pub const SWEEP_LAMBDAS: [f64; 3] = [0.7, 0.8, 0.9];
pub const SWEEP_GAMMA_FAIL: [f64; 3] = [1.0, 1.5, 2.0];

/// `ε(L)` non-increasing and `η(L)` non-decreasing over a 101-point load grid.
pub fn schedules_monotone(cfg: &DdqnConfig) -> (bool, bool) {
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let eps: Vec<f64> = grid.iter().map(|&l| ddqn::epsilon(cfg, l)).collect();
    let eta: Vec<f64> = grid.iter().map(|&l| ddqn::learning_rate(cfg, l)).collect();
    (
        eps.windows(2).all(|w| w[1] <= w[0]),
        eta.windows(2).all(|w| w[1] >= w[0]),
    )
}

/// λ × γ_fail grid for the configured algorithm at one regime.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    regime: &Regime,
    lambdas: &[f64],
    gammas: &[f64],
    out: Option<&Path>,
) -> Result<SweepReport, HarnessError> {
    if lambdas.is_empty() || gammas.is_empty() {
        return Err(HarnessError::Invalid("sweep grid must not be empty".into()));
    }
    let mut cells = Vec::new();
    for &lambda in lambdas {
        for &gamma_fail in gammas {
            let mut c = cfg.clone();
            c.regimes = vec![regime.clone()];
            c.write_tasks = false;
            c.overrides.lambda = Some(lambda);
            c.overrides.gamma_fail = Some(gamma_fail);
            c.validate()?;
            let rep = run_matrix(&c, None)?.pop().expect("one regime");
            let (eps_ok, eta_ok) = schedules_monotone(&c.sim_config(regime).ddqn);
            log::info!("sweep lambda {lambda} gamma_fail {gamma_fail}: completion {:.4}", rep.mean_of("completion_rate"));
            cells.push(SweepCell {
                lambda,
                gamma_fail,
                completion_rate: rep.mean_of("completion_rate"),
                cumulative_latency_s: rep.mean_of("cumulative_latency_s"),
                total_energy_j: rep.mean_of("total_energy_j"),
                mean_load: rep.mean_load,
                epsilon_monotone: eps_ok,
                learning_rate_monotone: eta_ok,
            });
        }
    }
    let mut best = 0;
    for (i, c) in cells.iter().enumerate() {
        let b = &cells[best];
        if c.completion_rate > b.completion_rate
            || (c.completion_rate == b.completion_rate && c.cumulative_latency_s < b.cumulative_latency_s)
        {
            best = i;
        }
    }
    let mut file = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(format!("sweep_{}.csv", regime.name));
        let recs: Vec<Vec<String>> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                vec![
                    SCHEMA_VERSION.to_string(),
                    regime.name.clone(),
                    num(c.lambda),
                    num(c.gamma_fail),
                    num(c.completion_rate),
                    num(c.cumulative_latency_s),
                    num(c.total_energy_j),
                    num(c.mean_load),
                    u8::from(c.epsilon_monotone).to_string(),
                    u8::from(c.learning_rate_monotone).to_string(),
                    u8::from(i == best).to_string(),
                ]
            })
            .collect();
        write_atomic(&path, &SWEEP_COLUMNS, &recs)?;
        file = Some(path);
    }
    Ok(SweepReport {
        regime: regime.clone(),
        cells,
        best,
        file,
    })
}
