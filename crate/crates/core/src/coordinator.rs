//! The synchronized slot pipeline: power control, rate and load refresh,
//! per-task placement, queue service, reward routing and training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, PolicyKind, QpsoConfig, RoundRobin};
use crate::ddqn::{self, compatibility, Capacity, Compatibility, DdqnAgent, DdqnConfig, DdqnError};
use crate::environment::{
    step_mobility, transmission_rate, DeviceState, Scenario, ScenarioError, ServerState, Task, TaskGenerator,
    TaskId,
};
use crate::perf::{
    self, allocation_reward, cpu_slot_energy, effective_gpu_flops, power_reward, task_energy, CostParams,
    LatencyBreakdown, Placement, TaskOutcome,
};
use crate::queueing::{
    estimate_times, failure_risk, load_metric, normalize_queue, DequeueMode, Estimate, ExitKind, Job, JobQueue,
    LoadWeights, QueueState, StageView, UtilizationSnapshot,
};
use crate::replay::{Action, Experience, SamplingMode};
use crate::td3::{self, scale_action, PowerAction, Td3Agent, Td3Config, Td3Error};

const F_SCALE_HZ: f64 = 3e9;
const P_SCALE_W: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    /// Skip the rate/load refresh between power control and placement.
    pub no_coord: bool,
    /// Treat every target as GPU-compatible.
    pub no_gpu: bool,
    /// Serve queues in arrival order.
    pub no_deadline: bool,
    /// Uniform replay for the allocation agent.
    pub no_failure: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["no_coord", "no_gpu", "no_deadline", "no_failure"];

    pub fn parse(name: &str) -> Option<Self> {
        let mut a = Self::default();
        match name {
            "none" | "" => {}
            "no_coord" => a.no_coord = true,
            "no_gpu" => a.no_gpu = true,
            "no_deadline" => a.no_deadline = true,
            "no_failure" => a.no_failure = true,
            _ => return None,
        }
        Some(a)
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [self.no_coord, self.no_gpu, self.no_deadline, self.no_failure]
            .iter()
            .zip(Self::NAMES)
            .filter(|(on, _)| **on)
            .map(|(_, n)| n)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Td3Cadence {
    /// One power-tier update per device per slot.
    #[default]
    PerDevice,
    /// One power-tier update per slot.
    PerSlot,
}

/// Everything that shapes one simulated episode apart from the topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub algorithm: PolicyKind,
    pub ablations: Ablations,
    pub rate_per_slot: usize,
    pub horizon: u32,
    pub cost: CostParams,
    pub load_weights: LoadWeights,
    pub td3: Td3Config,
    pub ddqn: DdqnConfig,
    pub qpso: QpsoConfig,
    pub td3_cadence: Td3Cadence,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            algorithm: PolicyKind::Hirl,
            ablations: Ablations::default(),
            rate_per_slot: 8,
            horizon: 200,
            cost: CostParams::default(),
            load_weights: LoadWeights::default(),
            td3: Td3Config::default(),
            ddqn: DdqnConfig::default(),
            qpso: QpsoConfig::default(),
            td3_cadence: Td3Cadence::PerDevice,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("power agent: {0}")]
    Td3(#[from] Td3Error),
    #[error("allocation agent: {0}")]
    Ddqn(#[from] DdqnError),
    #[error("inconsistent world state at slot {slot}: {detail}")]
    Inconsistent { slot: u32, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Learning components and policy-local state carried across episodes.
#[derive(Debug, Clone)]
pub struct Agents {
    pub td3: Option<Td3Agent>,
    pub ddqn: Option<DdqnAgent>,
    pub round_robin: RoundRobin,
    pub rng: ChaCha8Rng,
    /// Keep the power tier at the caps without consulting or training it.
    pub pin_power: bool,
}

impl Agents {
    pub fn new(cfg: &SimConfig, n_servers: usize, seed: u64) -> Result<Self, SimError> {
        // separate streams so that each agent's initialization does not
        // depend on which other agents exist
        let stream = |k: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xA076_1D64_78BD_642F) ^ k);
        let td3 = if cfg.algorithm.uses_td3() {
            Some(Td3Agent::new(cfg.td3.clone(), &mut stream(0x7d3))?)
        } else {
            None
        };
        let ddqn = if cfg.algorithm.uses_ddqn() {
            let mode = if cfg.ablations.no_failure {
                SamplingMode::Uniform
            } else {
                SamplingMode::Prioritized
            };
            Some(DdqnAgent::new(cfg.ddqn.clone(), n_servers + 1, mode, &mut stream(0xdd9))?)
        } else {
            None
        };
        Ok(Self {
            td3,
            ddqn,
            round_robin: RoundRobin::default(),
            rng: stream(0xac7),
            pin_power: false,
        })
    }

    fn power_active(&self) -> bool {
        self.td3.is_some() && !self.pin_power
    }
}

/// Per-device link state as seen by the allocation tier.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceView {
    pub f_hz: f64,
    pub p_w: f64,
    pub rates: Vec<f64>,
    pub best_gain: f64,
}

impl DeviceView {
    pub fn r_best(&self) -> f64 {
        self.rates.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskStatus {
    Pending,
    Completed,
    Failed,
}

#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub task: Task,
    pub placement: Placement,
    pub status: TaskStatus,
    pub resolved_at: f64,
    pub latency: LatencyBreakdown,
    pub energy_j: f64,
    pub fail_risk: bool,
    pub d_est_s: f64,
    pub best_rho: f64,
    gpu_ok: bool,
    state: Vec<f64>,
    action: usize,
    next: Option<(Vec<f64>, Vec<bool>)>,
    pushed: bool,
}

impl TaskRecord {
    pub fn outcome(&self) -> TaskOutcome {
        let completed = self.status == TaskStatus::Completed;
        TaskOutcome {
            task: self.task.id,
            priority_b: self.task.priority_b,
            completed,
            deadline_met: completed,
            d_total_s: (self.resolved_at - self.task.created_t).max(0.0),
            energy_j: self.energy_j,
            fail_flag: !completed,
            placement: self.placement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub task: TaskId,
    pub device: usize,
    pub action: usize,
    pub fail_risk: bool,
    /// Best uplink rate the placement decision was based on.
    pub r_used: f64,
    /// Real GPU/memory compatibility of each target.
    pub compatible: Vec<bool>,
    /// Sent to an incompatible target although a compatible one existed.
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRecord {
    pub slot: u32,
    pub actions: Vec<PowerAction>,
    pub rates: Vec<f64>,
    pub decisions: Vec<DecisionRecord>,
    pub completed: Vec<TaskId>,
    pub failed: Vec<TaskId>,
    pub arrivals: usize,
    pub energy_j: f64,
    pub attributed_energy_j: f64,
    pub idle_energy_j: f64,
    pub queues: Vec<QueueState>,
    pub load: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KindMetrics {
    pub generated: usize,
    pub completed: usize,
    pub latency_s: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub generated: usize,
    pub completed: usize,
    pub failed: usize,
    pub completion_rate: f64,
    pub cumulative_latency_s: f64,
    pub mean_latency_s: f64,
    pub total_energy_j: f64,
    pub device_cpu_energy_j: f64,
    pub tx_energy_j: f64,
    pub gpu_energy_j: f64,
    pub mean_load: f64,
    pub slots: u32,
    pub offload_fraction: f64,
    pub masking_violations: usize,
    pub risk_flags: usize,
    /// Mean chosen CPU frequency and transmit power as fractions of the caps.
    pub mean_cpu_frac: f64,
    pub mean_power_frac: f64,
    pub per_kind: [KindMetrics; 3],
}

#[derive(Debug, Clone, Default)]
struct DeviceQueues {
    lc: JobQueue,
    tx: JobQueue,
    lg: JobQueue,
}

#[derive(Debug, Clone, Default)]
struct ServerQueues {
    cpu: JobQueue,
    gpu: JobQueue,
}

/// Sampled deployment shared by every episode of a run.
#[derive(Debug, Clone)]
pub struct Topology {
    pub scenario: Scenario,
    pub devices: Vec<DeviceState>,
    pub servers: Vec<ServerState>,
}

impl Topology {
    pub fn sample(scenario: &Scenario, seed: u64) -> Result<Self, SimError> {
        scenario.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (devices, servers) = scenario.build_topology(&mut rng);
        Ok(Self {
            scenario: scenario.clone(),
            devices,
            servers,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    LocalCpu(usize),
    Tx(usize),
    LocalGpu(usize),
    ServerCpu(usize),
    ServerGpu(usize),
}

/// Dynamic state of one episode.
pub struct World {
    pub cfg: SimConfig,
    pub scenario: Scenario,
    pub devices: Vec<DeviceState>,
    pub servers: Vec<ServerState>,
    dev_flops: Vec<f64>,
    srv_flops: Vec<f64>,
    dq: Vec<DeviceQueues>,
    sq: Vec<ServerQueues>,
    pub tasks: Vec<TaskRecord>,
    generator: TaskGenerator,
    env_rng: ChaCha8Rng,
    slot: u32,
    training: bool,
    views: Vec<DeviceView>,
    util_dev: Vec<[f64; 2]>,
    util_srv: Vec<[f64; 2]>,
    last_load: f64,
    td3_open: Vec<Option<(Vec<f64>, [f64; 2])>>,
    td3_ready: Vec<Option<(Vec<f64>, [f64; 2], f64, bool)>>,
    last_decision: Vec<Option<TaskId>>,
    prev_alloc_base: Vec<Option<Vec<f64>>>,
    awaiting_push: Vec<TaskId>,
    loads: Vec<f64>,
    frac_sum: [f64; 2],
    cpu_energy: f64,
    tx_energy: f64,
    gpu_energy: f64,
    violations: usize,
    risk_flags: usize,
    finished: bool,
}

fn gain_feature(g: f64) -> f64 {
    if g <= 0.0 {
        return 0.0;
    }
    ((g.log10() + 12.0) / 9.0).clamp(0.0, 1.0)
}

fn clip_q(q: f64) -> f64 {
    q.clamp(0.0, 10.0) / 10.0
}

impl World {
    /// A fresh episode on `topology`; the environment stream is derived from
    /// `(seed, episode)`.
    pub fn new(topology: &Topology, cfg: SimConfig, seed: u64, episode: u64, training: bool) -> Result<Self, SimError> {
        if cfg.horizon < 5 {
            return Err(SimError::Config("horizon must be at least 5 slots".into()));
        }
        let scenario = topology.scenario.clone();
        let eff = scenario.gpu_efficiency;
        let flops = |g| effective_gpu_flops(g, eff).map_err(|e| SimError::Config(e.to_string()));
        let dev_flops = topology.devices.iter().map(|d| flops(&d.gpu)).collect::<Result<Vec<_>, _>>()?;
        let srv_flops = topology.servers.iter().map(|s| flops(&s.gpu)).collect::<Result<Vec<_>, _>>()?;
        let n_dev = topology.devices.len();
        let n_srv = topology.servers.len();
        let mut devices = topology.devices.clone();
        for d in &mut devices {
            d.cpu_f_now_hz = d.cpu_f_max_hz;
            d.p_now_w = d.p_max_w;
        }
        let env_rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ episode.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0xE1,
        );
        let mut w = Self {
            generator: TaskGenerator::new(scenario.workload.clone(), n_dev),
            scenario,
            devices,
            servers: topology.servers.clone(),
            dev_flops,
            srv_flops,
            dq: vec![DeviceQueues::default(); n_dev],
            sq: vec![ServerQueues::default(); n_srv],
            tasks: Vec::new(),
            env_rng,
            slot: 0,
            training,
            views: Vec::new(),
            util_dev: vec![[0.0; 2]; n_dev],
            util_srv: vec![[0.0; 2]; n_srv],
            last_load: 0.0,
            td3_open: vec![None; n_dev],
            td3_ready: vec![None; n_dev],
            last_decision: vec![None; n_dev],
            prev_alloc_base: vec![None; n_dev],
            awaiting_push: Vec::new(),
            loads: Vec::new(),
            frac_sum: [0.0; 2],
            cpu_energy: 0.0,
            tx_energy: 0.0,
            gpu_energy: 0.0,
            violations: 0,
            risk_flags: 0,
            finished: false,
            cfg,
        };
        w.views = (0..n_dev).map(|d| w.fresh_view(d)).collect();
        Ok(w)
    }

    pub fn slot(&self) -> u32 {
        self.slot
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn slot_s(&self) -> f64 {
        self.cfg.cost.slot_s
    }

    fn n_servers(&self) -> usize {
        self.servers.len()
    }

    fn fresh_view(&self, d: usize) -> DeviceView {
        let dev = &self.devices[d];
        let gains = dev.gains(&self.scenario.channel);
        DeviceView {
            f_hz: dev.cpu_f_now_hz,
            p_w: dev.p_now_w,
            rates: gains
                .iter()
                .map(|&g| transmission_rate(&self.scenario.channel, dev.p_now_w, g))
                .collect(),
            best_gain: gains.iter().copied().fold(0.0, f64::max),
        }
    }

    /// Current backlogs of device `d` plus aggregated server backlogs.
    pub fn queue_state(&self, d: usize) -> QueueState {
        QueueState {
            backlog: [
                self.dq[d].lc.backlog(),
                self.dq[d].tx.backlog(),
                self.dq[d].lg.backlog(),
                self.sq.iter().map(|s| s.cpu.backlog()).sum(),
                self.sq.iter().map(|s| s.gpu.backlog()).sum(),
            ],
        }
    }

    fn service_rates(&self, d: usize, view: &DeviceView) -> [f64; 5] {
        [
            view.f_hz,
            view.r_best(),
            self.dev_flops[d],
            self.servers.iter().map(|s| s.cpu_f_hz).sum(),
            self.srv_flops.iter().sum(),
        ]
    }

    pub fn qhat(&self, d: usize, view: &DeviceView) -> [f64; 5] {
        self.queue_state(d).normalized(&self.service_rates(d, view), self.slot_s()).0
    }

    fn utilization(&self, d: usize) -> UtilizationSnapshot {
        let n = self.util_srv.len().max(1) as f64;
        UtilizationSnapshot {
            u_cpu_local: self.util_dev[d][0],
            u_gpu_local: self.util_dev[d][1],
            u_cpu_server: self.util_srv.iter().map(|u| u[0]).sum::<f64>() / n,
            u_gpu_server: self.util_srv.iter().map(|u| u[1]).sum::<f64>() / n,
        }
    }

    fn device_load(&self, d: usize, view: &DeviceView) -> f64 {
        load_metric(&self.qhat(d, view), &self.utilization(d), &self.cfg.load_weights)
    }

    /// Eight-entry power-tier state.
    pub fn power_state(&self, d: usize, view: &DeviceView) -> Vec<f64> {
        let q = self.qhat(d, view);
        let dev = &self.devices[d];
        let mut s: Vec<f64> = q.iter().map(|&v| clip_q(v)).collect();
        s.push(gain_feature(dev.best_gain(&self.scenario.channel)));
        s.push(dev.cpu_f_max_hz / F_SCALE_HZ);
        s.push(dev.p_max_w / P_SCALE_W);
        s
    }

    /// Base allocation-tier state for placing `task` from device `d`.
    pub fn alloc_base_state(&self, d: usize, task: &Task, view: &DeviceView, now: f64) -> Vec<f64> {
        let q = self.qhat(d, view);
        let dev = &self.devices[d];
        let u = self.utilization(d);
        let mut s: Vec<f64> = q.iter().map(|&v| clip_q(v)).collect();
        s.push(view.f_hz / F_SCALE_HZ);
        s.push(view.p_w / P_SCALE_W);
        s.push(gain_feature(view.best_gain));
        s.push(dev.gpu.clock_hz / F_SCALE_HZ);
        s.push(dev.gpu.cuda_cores / 20_000.0);
        s.push(dev.gpu.bandwidth_bytes_per_s / 4e12);
        s.push(dev.gpu.power_w / 1000.0);
        s.extend(u.as_array());
        let w = &self.scenario.workload;
        let size_max = w.cpu_size_bytes.max().max(w.gpu_size_bytes.max()).max(w.io_size_bytes.max()) * 8.0;
        let slack_max = w.compute_deadline_s.max().max(w.io_deadline_s.max());
        s.push(task.priority_b as f64 / 4.0);
        s.push(task.size_s_bits / size_max);
        s.push(task.cycles_per_bit_c / w.cpu_cycles_per_bit.max().max(w.gpu_cycles_per_bit.max()));
        s.push((task.deadline_ddl_s - now) / slack_max);
        s.push(task.cores_n / w.gpu_cores.max().max(1.0));
        s.push(task.mem_m_bytes / w.gpu_mem_bytes.max().max(1.0));
        s.push(task.gpu_load_flops / w.gpu_flops.max().max(1.0));
        s.push(((now - task.created_t) / self.slot_s()).min(1.0));
        debug_assert_eq!(s.len(), ddqn::BASE_STATE_LEN);
        s.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }

    fn capacity(&self, target: usize, d: usize) -> Capacity {
        if target == 0 {
            let dev = &self.devices[d];
            Capacity {
                mem_cpu_bytes: dev.mem_bytes,
                gpu_cores: dev.gpu.cuda_cores,
                gpu_mem_bytes: dev.gpu.memory_bytes,
            }
        } else {
            let s = &self.servers[target - 1];
            Capacity {
                mem_cpu_bytes: s.mem_bytes,
                gpu_cores: s.gpu.cuda_cores,
                gpu_mem_bytes: s.gpu.memory_bytes,
            }
        }
    }

    /// Real compatibility of `task` with every target.
    pub fn real_compatibility(&self, task: &Task) -> Vec<Compatibility> {
        (0..=self.n_servers())
            .map(|a| compatibility(task, &self.capacity(a, task.origin_device)))
            .collect()
    }

    fn stages(&self, task: &Task, target: usize, view: &DeviceView, extra: &Extra) -> Vec<StageView> {
        let d = task.origin_device;
        let gpu = task.gpu_load_flops;
        if target == 0 {
            vec![
                StageView {
                    work: task.cpu_cycles(),
                    rate: view.f_hz,
                    backlog: self.dq[d].lc.backlog() + extra.lc[d],
                },
                StageView {
                    work: gpu,
                    rate: self.dev_flops[d],
                    backlog: self.dq[d].lg.backlog() + extra.lg[d],
                },
            ]
        } else {
            let k = target - 1;
            vec![
                StageView {
                    work: task.size_s_bits,
                    rate: view.rates[k],
                    backlog: self.dq[d].tx.backlog() + extra.tx[d],
                },
                StageView {
                    work: task.cpu_cycles(),
                    rate: self.servers[k].cpu_f_hz,
                    backlog: self.sq[k].cpu.backlog() + extra.sc[k],
                },
                StageView {
                    work: gpu,
                    rate: self.srv_flops[k],
                    backlog: self.sq[k].gpu.backlog() + extra.sg[k],
                },
            ]
        }
    }

    fn estimate(&self, task: &Task, target: usize, view: &DeviceView, compatible: bool, extra: &Extra) -> Estimate {
        estimate_times(&self.stages(task, target, view, extra), compatible)
    }

    fn estimated_energy(&self, task: &Task, target: usize, view: &DeviceView) -> f64 {
        let d = task.origin_device;
        let (placement, gpu, flops, r) = if target == 0 {
            (Placement::Local, &self.devices[d].gpu, self.dev_flops[d], 0.0)
        } else {
            let k = target - 1;
            (Placement::Server(k), &self.servers[k].gpu, self.srv_flops[k], view.rates[k])
        };
        task_energy(task, placement, view.f_hz, view.p_w, r, gpu, flops, &self.cfg.cost).unwrap_or(0.0)
    }

    /// Action mask: compatible targets that can also meet the deadline at
    /// current rates; falls back to compatible-only, then to nothing.
    fn mask_for(&self, task: &Task, view: &DeviceView, now: f64, compat: &[Compatibility]) -> (Vec<bool>, Vec<Estimate>) {
        let none = Extra::new(self.devices.len(), self.n_servers());
        let est: Vec<Estimate> = (0..compat.len())
            .map(|a| self.estimate(task, a, view, compat[a].feasible, &none))
            .collect();
        let slack = task.deadline_ddl_s - now;
        let deadline_ok: Vec<bool> = est
            .iter()
            .map(|e| e.total().is_some_and(|t| t <= slack))
            .collect();
        if deadline_ok.iter().any(|&b| b) {
            (deadline_ok, est)
        } else {
            (compat.iter().map(|c| c.feasible).collect(), est)
        }
    }

    fn effective_compat(&self, task: &Task) -> Vec<Compatibility> {
        if self.cfg.ablations.no_gpu {
            vec![Compatibility::ALWAYS; self.n_servers() + 1]
        } else {
            self.real_compatibility(task)
        }
    }

    fn enqueue(&mut self, id: TaskId, target: usize, now: f64, d_est: f64, rho: f64, compat_ok: bool) {
        let t = self.tasks[id as usize].task.clone();
        let d = t.origin_device;
        let mem = self.capacity(target, d).mem_cpu_bytes;
        self.tasks[id as usize].gpu_ok = compat_ok;
        let job = Job {
            task: id,
            work: 0.0,
            ready_at: now,
            created_t: t.created_t,
            deadline: t.deadline_ddl_s,
            priority_b: t.priority_b,
            d_est_s: d_est.max(1e-9),
            rho,
            compatible: t.size_bytes() <= mem,
            target: target.saturating_sub(1),
        };
        if target == 0 {
            self.tasks[id as usize].placement = Placement::Local;
            self.dq[d].lc.push(Job {
                work: t.cpu_cycles(),
                ..job
            });
        } else {
            self.tasks[id as usize].placement = Placement::Server(target - 1);
            self.dq[d].tx.push(Job {
                work: t.size_s_bits,
                ..job
            });
        }
    }

    /// Runs one slot of the pipeline.
    pub fn run_slot(&mut self, agents: &mut Agents) -> Result<SlotRecord, SimError> {
        let tau = self.slot_s();
        let t0 = self.slot as f64 * tau;
        let t1 = t0 + tau;
        let n_dev = self.devices.len();
        let bounds = self.scenario.mobility_bounds();
        if self.slot > 0 {
            for d in &mut self.devices {
                step_mobility(d, bounds, &mut self.env_rng);
            }
        }

        // stage 1: power control on last slot's view of the queues
        let prev_views = self.views.clone();
        let mut actions = Vec::with_capacity(n_dev);
        for d in 0..n_dev {
            let (f_max, p_max) = (self.devices[d].cpu_f_max_hz, self.devices[d].p_max_w);
            let act = if let Some(agent) = agents.td3.as_ref().filter(|_| !agents.pin_power) {
                let state = self.power_state(d, &prev_views[d]);
                let load = self.device_load(d, &prev_views[d]);
                let a = agent.act(&state, load, self.training, &mut agents.rng)?;
                if let Some((s, act, r, fail)) = self.td3_ready[d].take() {
                    self.push_td3(agents, s, act, r, fail, state.clone(), false)?;
                }
                self.td3_open[d] = Some((state, a));
                scale_action(a, f_max, p_max)
            } else {
                PowerAction { f_hz: f_max, p_w: p_max }
            };
            self.devices[d].cpu_f_now_hz = act.f_hz;
            self.devices[d].p_now_w = act.p_w;
            self.frac_sum[0] += act.f_hz / f_max;
            self.frac_sum[1] += act.p_w / p_max;
            actions.push(act);
        }

        // stage 2: refresh rates, normalized queues and load
        self.views = (0..n_dev).map(|d| self.fresh_view(d)).collect();
        let alloc_views = if self.cfg.ablations.no_coord {
            prev_views
        } else {
            self.views.clone()
        };
        let load_now = if n_dev > 0 {
            (0..n_dev).map(|d| self.device_load(d, &self.views[d])).sum::<f64>() / n_dev as f64
        } else {
            0.0
        };
        let alloc_load = if self.cfg.ablations.no_coord {
            self.last_load
        } else {
            load_now
        };

        // stage 3: placement
        let arrivals = self
            .generator
            .generate(self.cfg.rate_per_slot, self.slot, tau, &mut self.env_rng);
        let n_arrivals = arrivals.len();
        let mut order: Vec<Task> = arrivals;
        if !self.cfg.ablations.no_deadline {
            order.sort_by(|a, b| {
                b.priority_b
                    .cmp(&a.priority_b)
                    .then(a.deadline_ddl_s.total_cmp(&b.deadline_ddl_s))
                    .then(a.id.cmp(&b.id))
            });
        }
        let mut sorted_ids: Vec<Task> = order.clone();
        sorted_ids.sort_by_key(|t| t.id);
        for t in sorted_ids {
            if t.id as usize != self.tasks.len() {
                return Err(SimError::Inconsistent {
                    slot: self.slot,
                    detail: format!("task id {} does not match table length {}", t.id, self.tasks.len()),
                });
            }
            self.tasks.push(TaskRecord {
                task: t,
                placement: Placement::Local,
                status: TaskStatus::Pending,
                resolved_at: f64::NAN,
                latency: LatencyBreakdown::default(),
                energy_j: 0.0,
                fail_risk: false,
                d_est_s: 0.0,
                best_rho: 0.0,
                gpu_ok: true,
                state: Vec::new(),
                action: 0,
                next: None,
                pushed: false,
            });
        }

        let qpso_plan = if self.cfg.algorithm == PolicyKind::Qpso && !order.is_empty() {
            Some(self.qpso_plan(&order, &alloc_views, t0, &mut agents.rng))
        } else {
            None
        };

        let mut decisions = Vec::with_capacity(order.len());
        for (i, task) in order.iter().enumerate() {
            let d = task.origin_device;
            let view = &alloc_views[d];
            let real = self.real_compatibility(task);
            let compat = self.effective_compat(task);
            let (mask, est) = self.mask_for(task, view, t0, &compat);
            let best_rho = compat
                .iter()
                .filter(|c| c.feasible)
                .map(|c| c.rho)
                .fold(0.0, f64::max);
            let mut no_target = false;
            let mut state = Vec::new();
            let action = match self.cfg.algorithm {
                PolicyKind::Hirl | PolicyKind::SingleDdqn => {
                    let base = self.alloc_base_state(d, task, view, t0);
                    state = if self.cfg.ddqn.temporal {
                        ddqn::temporal_augment(self.prev_alloc_base[d].as_deref(), &base)
                    } else {
                        base.clone()
                    };
                    self.prev_alloc_base[d] = Some(base);
                    let agent = agents.ddqn.as_ref().expect("allocation agent present");
                    let dec = agent.act(&state, &mask, alloc_load, self.training, &mut agents.rng)?;
                    no_target = dec.fail_risk;
                    dec.action
                }
                PolicyKind::Random => baselines::random_place(self.n_servers(), &mut agents.rng),
                PolicyKind::GreedyLocal => {
                    let q = self.qhat(d, view);
                    let server_load: Vec<f64> = (0..self.n_servers())
                        .map(|k| {
                            let c = normalize_queue(self.sq[k].cpu.backlog(), self.servers[k].cpu_f_hz, tau).value;
                            let g = normalize_queue(self.sq[k].gpu.backlog(), self.srv_flops[k], tau).value;
                            if task.gpu_load_flops > 0.0 {
                                c.max(g)
                            } else {
                                c
                            }
                        })
                        .collect();
                    let feasible: Vec<bool> = compat.iter().map(|c| c.feasible).collect();
                    baselines::greedy_local(q[0], q[2], task.gpu_load_flops > 0.0, &server_load, &feasible)
                }
                PolicyKind::GreedyOffload => {
                    let avail: Vec<f64> = (0..self.n_servers())
                        .map(|k| {
                            if task.gpu_load_flops > 0.0 {
                                self.srv_flops[k] * tau - self.sq[k].gpu.backlog()
                            } else {
                                self.servers[k].cpu_f_hz * tau - self.sq[k].cpu.backlog()
                            }
                        })
                        .collect();
                    let feasible: Vec<bool> = compat.iter().map(|c| c.feasible).collect();
                    baselines::greedy_offload(&avail, &feasible)
                }
                PolicyKind::RoundRobin => agents.round_robin.next(self.n_servers()),
                PolicyKind::Qpso => qpso_plan.as_ref().map_or(0, |p| p[i]),
            };
            let d_est = match est[action] {
                Estimate::Feasible { d_est_s, .. } => d_est_s,
                Estimate::Infeasible => {
                    match estimate_times(&self.stages(task, action, view, &Extra::new(n_dev, self.n_servers())), true) {
                        Estimate::Feasible { d_est_s, .. } => d_est_s,
                        Estimate::Infeasible => f64::MAX,
                    }
                }
            };
            let risk = no_target || failure_risk(task.deadline_ddl_s, t0, best_rho, d_est, self.cfg.ddqn.theta_min);
            let compatible: Vec<bool> = real.iter().map(|c| c.feasible).collect();
            let violation = !compatible[action] && compatible.iter().any(|&c| c);
            self.violations += usize::from(violation);
            self.risk_flags += usize::from(risk);

            let id = task.id;
            {
                let rec = &mut self.tasks[id as usize];
                rec.fail_risk = risk;
                rec.d_est_s = d_est;
                rec.best_rho = best_rho;
                rec.action = action;
                rec.state = state.clone();
            }
            if self.cfg.algorithm.uses_ddqn() {
                if let Some(prev) = self.last_decision[d] {
                    self.tasks[prev as usize].next = Some((state, mask.clone()));
                }
                self.last_decision[d] = Some(id);
                self.awaiting_push.push(id);
            }
            // an undersized GPU is only discovered when the job reaches it
            self.enqueue(id, action, t0, d_est, best_rho, compatible[action]);
            decisions.push(DecisionRecord {
                task: id,
                device: d,
                action,
                fail_risk: risk,
                r_used: view.r_best(),
                compatible,
                violation,
            });
        }

        // service
        let mut dev_tx_energy = vec![0.0; n_dev];
        let mut resolved: Vec<TaskId> = Vec::new();
        let attributed = self.serve_all(t0, t1, &mut dev_tx_energy, &mut resolved);
        let cpu_slot: Vec<f64> = self
            .devices
            .iter()
            .map(|d| cpu_slot_energy(self.cfg.cost.kappa, d.cpu_f_now_hz, tau))
            .collect();
        let local_busy_energy: f64 = attributed.local_cpu;
        let slot_cpu: f64 = cpu_slot.iter().sum();
        let energy = slot_cpu + attributed.tx + attributed.gpu;
        self.cpu_energy += slot_cpu;
        self.tx_energy += attributed.tx;
        self.gpu_energy += attributed.gpu;

        self.slot += 1;
        let generation_over = self.slot >= self.scenario.workload.generation_slots;
        let all_resolved = self.tasks.iter().all(|t| t.status != TaskStatus::Pending);
        let horizon = self.slot >= self.cfg.horizon;
        if horizon && !all_resolved {
            let end = self.slot as f64 * tau;
            self.fail_pending(end, &mut resolved);
        }
        self.finished = (generation_over && all_resolved) || horizon;

        // rewards
        let mut completions: Vec<Vec<u8>> = vec![Vec::new(); n_dev];
        let mut failed_dev = vec![false; n_dev];
        let mut completed_ids = Vec::new();
        let mut failed_ids = Vec::new();
        for &id in &resolved {
            let rec = &self.tasks[id as usize];
            let d = rec.task.origin_device;
            if rec.status == TaskStatus::Completed {
                completions[d].push(rec.task.priority_b);
                completed_ids.push(id);
            } else {
                failed_dev[d] = true;
                failed_ids.push(id);
            }
        }
        if agents.power_active() {
            for d in 0..n_dev {
                if let Some((s, a)) = self.td3_open[d].take() {
                    let r = power_reward(&completions[d], cpu_slot[d] + dev_tx_energy[d], &self.cfg.cost);
                    self.td3_ready[d] = Some((s, a, r, failed_dev[d]));
                }
            }
            if self.finished {
                for d in 0..n_dev {
                    if let Some((s, a, r, fail)) = self.td3_ready[d].take() {
                        let next = self.power_state(d, &self.views[d]);
                        self.push_td3(agents, s, a, r, fail, next, true)?;
                    }
                }
            }
        }
        self.push_ready_ddqn(agents, self.finished)?;

        // training
        if self.training {
            if let Some(agent) = agents.ddqn.as_mut() {
                for _ in 0..decisions.len() {
                    agent.train_step(load_now, &mut agents.rng)?;
                }
            }
            if let Some(agent) = agents.td3.as_mut().filter(|_| !agents.pin_power) {
                let steps = match self.cfg.td3_cadence {
                    Td3Cadence::PerDevice => n_dev,
                    Td3Cadence::PerSlot => 1,
                };
                for _ in 0..steps {
                    agent.train_step(&mut agents.rng)?;
                }
            }
        }

        self.last_load = load_now;
        self.loads.push(load_now);
        let queues = (0..n_dev).map(|d| self.queue_state(d)).collect();
        self.check_conservation()?;
        Ok(SlotRecord {
            slot: self.slot - 1,
            rates: self.views.iter().map(|v| v.r_best()).collect(),
            actions,
            decisions,
            completed: completed_ids,
            failed: failed_ids,
            arrivals: n_arrivals,
            energy_j: energy,
            attributed_energy_j: local_busy_energy + attributed.tx + attributed.gpu,
            idle_energy_j: slot_cpu - local_busy_energy,
            queues,
            load: load_now,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn push_td3(
        &self,
        agents: &mut Agents,
        state: Vec<f64>,
        action: [f64; 2],
        reward: f64,
        fail: bool,
        next: Vec<f64>,
        terminal: bool,
    ) -> Result<(), SimError> {
        if !self.training {
            return Ok(());
        }
        if let Some(agent) = agents.td3.as_mut() {
            debug_assert_eq!(state.len(), td3::STATE_LEN);
            agent.push(Experience {
                state,
                action: Action::Continuous(action.to_vec()),
                reward,
                next_state: next,
                terminal,
                fail,
                next_mask: Vec::new(),
            })?;
        }
        Ok(())
    }

    fn push_ready_ddqn(&mut self, agents: &mut Agents, end: bool) -> Result<(), SimError> {
        let Some(agent) = agents.ddqn.as_mut() else {
            return Ok(());
        };
        let mut keep = Vec::new();
        let pending = std::mem::take(&mut self.awaiting_push);
        for id in pending {
            let rec = &self.tasks[id as usize];
            let resolved = rec.status != TaskStatus::Pending;
            if !(resolved && (rec.next.is_some() || end)) {
                keep.push(id);
                continue;
            }
            if self.training && !rec.pushed {
                let outcome = rec.outcome();
                let (next_state, next_mask, terminal) = match &rec.next {
                    Some((s, m)) => (s.clone(), m.clone(), false),
                    None => (rec.state.clone(), Vec::new(), true),
                };
                agent.push(Experience {
                    state: rec.state.clone(),
                    action: Action::Discrete(rec.action),
                    reward: allocation_reward(&outcome, &self.cfg.cost),
                    next_state,
                    terminal,
                    fail: outcome.fail_flag,
                    next_mask,
                })?;
            }
            self.tasks[id as usize].pushed = true;
        }
        self.awaiting_push = keep;
        Ok(())
    }

    fn fail_pending(&mut self, end: f64, resolved: &mut Vec<TaskId>) {
        for dq in &mut self.dq {
            dq.lc.drain();
            dq.tx.drain();
            dq.lg.drain();
        }
        for sq in &mut self.sq {
            sq.cpu.drain();
            sq.gpu.drain();
        }
        for rec in &mut self.tasks {
            if rec.status == TaskStatus::Pending {
                rec.status = TaskStatus::Failed;
                rec.resolved_at = end;
                resolved.push(rec.task.id);
            }
        }
    }

    fn check_conservation(&self) -> Result<(), SimError> {
        let mut in_queues = 0usize;
        for dq in &self.dq {
            in_queues += dq.lc.len() + dq.tx.len() + dq.lg.len();
        }
        for sq in &self.sq {
            in_queues += sq.cpu.len() + sq.gpu.len();
        }
        let pending = self.tasks.iter().filter(|t| t.status == TaskStatus::Pending).count();
        let done = self.tasks.len() - pending;
        if in_queues != pending || done + pending != self.generator.generated() as usize {
            return Err(SimError::Inconsistent {
                slot: self.slot,
                detail: format!(
                    "generated {} but {} resolved, {} pending and {} queued",
                    self.generator.generated(),
                    done,
                    pending,
                    in_queues
                ),
            });
        }
        Ok(())
    }

    fn serve_all(&mut self, t0: f64, t1: f64, dev_tx: &mut [f64], resolved: &mut Vec<TaskId>) -> SlotEnergy {
        let mode = if self.cfg.ablations.no_deadline {
            DequeueMode::Fifo
        } else {
            DequeueMode::Priority
        };
        let mut energy = SlotEnergy::default();
        let n_dev = self.devices.len();
        let kappa = self.cfg.cost.kappa;
        for d in 0..n_dev {
            let f = self.devices[d].cpu_f_now_hz;
            let rep = self.dq[d].lc.serve(t0, t1, mode, |_| f);
            for &(id, _, work) in &rep.chunks {
                let e = perf::cpu_energy(kappa, f, work);
                energy.local_cpu += e;
                self.tasks[id as usize].energy_j += e;
            }
            self.util_dev[d][0] = rep.busy_s / (t1 - t0);
            self.route(Stage::LocalCpu(d), rep.events, resolved);

            let rates = self.views[d].rates.clone();
            let p = self.devices[d].p_now_w;
            let rep = self.dq[d].tx.serve(t0, t1, mode, |j| rates[j.target]);
            for &(id, dt, _) in &rep.chunks {
                let e = p * dt;
                energy.tx += e;
                dev_tx[d] += e;
                self.tasks[id as usize].energy_j += e;
            }
            self.route(Stage::Tx(d), rep.events, resolved);
        }
        for d in 0..n_dev {
            let flops = self.dev_flops[d];
            let power = self.devices[d].gpu.power_w;
            let rep = self.dq[d].lg.serve(t0, t1, mode, |_| flops);
            for &(id, dt, _) in &rep.chunks {
                energy.gpu += power * dt;
                self.tasks[id as usize].energy_j += power * dt;
            }
            self.util_dev[d][1] = rep.busy_s / (t1 - t0);
            self.route(Stage::LocalGpu(d), rep.events, resolved);
        }
        for k in 0..self.n_servers() {
            let f = self.servers[k].cpu_f_hz;
            let rep = self.sq[k].cpu.serve(t0, t1, mode, |_| f);
            self.util_srv[k][0] = rep.busy_s / (t1 - t0);
            self.route(Stage::ServerCpu(k), rep.events, resolved);
        }
        for k in 0..self.n_servers() {
            let flops = self.srv_flops[k];
            let power = self.servers[k].gpu.power_w;
            let rep = self.sq[k].gpu.serve(t0, t1, mode, |_| flops);
            for &(id, dt, _) in &rep.chunks {
                energy.gpu += power * dt;
                self.tasks[id as usize].energy_j += power * dt;
            }
            self.util_srv[k][1] = rep.busy_s / (t1 - t0);
            self.route(Stage::ServerGpu(k), rep.events, resolved);
        }
        energy
    }

    fn route(&mut self, stage: Stage, events: Vec<crate::queueing::ServiceEvent>, resolved: &mut Vec<TaskId>) {
        for ev in events {
            let id = ev.job.task;
            let start = ev.started.unwrap_or(ev.at);
            let wait = start - ev.job.ready_at;
            let service = ev.at - start;
            let rec = &mut self.tasks[id as usize];
            let lat = &mut rec.latency;
            match stage {
                Stage::Tx(_) => {
                    lat.wait_tx += wait;
                    lat.tx += service;
                }
                Stage::LocalCpu(_) | Stage::ServerCpu(_) => {
                    lat.wait_cpu += wait;
                    lat.cpu += service;
                }
                Stage::LocalGpu(_) | Stage::ServerGpu(_) => {
                    lat.wait_gpu += wait;
                    lat.gpu += service;
                }
            }
            if ev.kind != ExitKind::Completed {
                rec.status = TaskStatus::Failed;
                rec.resolved_at = ev.at;
                resolved.push(id);
                continue;
            }
            let task = rec.task.clone();
            let gpu_ok = rec.gpu_ok;
            let has_gpu = task.gpu_load_flops > 0.0;
            let next_job = |work: f64, compatible: bool| Job {
                work,
                ready_at: ev.at,
                compatible,
                ..ev.job.clone()
            };
            match stage {
                Stage::LocalCpu(d) if has_gpu => {
                    self.dq[d].lg.push(next_job(task.gpu_load_flops, gpu_ok));
                }
                Stage::Tx(_) => {
                    let k = ev.job.target;
                    self.sq[k].cpu.push(next_job(task.cpu_cycles(), true));
                }
                Stage::ServerCpu(k) if has_gpu => {
                    self.sq[k].gpu.push(next_job(task.gpu_load_flops, gpu_ok));
                }
                _ => {
                    let rec = &mut self.tasks[id as usize];
                    rec.status = TaskStatus::Completed;
                    rec.resolved_at = ev.at;
                    resolved.push(id);
                }
            }
        }
    }

    /// Per-slot allocation of all arrivals by quantum-behaved PSO, with
    /// power pinned at the caps.
    fn qpso_plan(&self, tasks: &[Task], views: &[DeviceView], now: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n_actions = self.n_servers() + 1;
        let compat: Vec<Vec<Compatibility>> = tasks.iter().map(|t| self.effective_compat(t)).collect();
        let energy: Vec<Vec<f64>> = tasks
            .iter()
            .map(|t| (0..n_actions).map(|a| self.estimated_energy(t, a, &views[t.origin_device])).collect())
            .collect();
        let fitness = |alloc: &[usize]| -> f64 {
            let mut extra = Extra::new(self.devices.len(), self.n_servers());
            let mut total = 0.0;
            for (i, t) in tasks.iter().enumerate() {
                let a = alloc[i];
                let view = &views[t.origin_device];
                let est = self.estimate(t, a, view, compat[i][a].feasible, &extra);
                let (latency, fail) = match est.total() {
                    Some(l) => (l, l > t.deadline_ddl_s - now),
                    None => (t.deadline_ddl_s - now, true),
                };
                total += perf::task_cost(t.priority_b, latency, energy[i][a], &self.cfg.cost);
                if fail {
                    total += self.cfg.cost.alpha_fail;
                }
                extra.add(t, a);
            }
            total
        };
        baselines::qpso_solve(tasks.len(), n_actions, &self.cfg.qpso, fitness, rng).allocation
    }

    /// Aggregates the finished episode.
    pub fn metrics(&self) -> EpisodeMetrics {
        let mut m = EpisodeMetrics {
            generated: self.tasks.len(),
            slots: self.slot,
            device_cpu_energy_j: self.cpu_energy,
            tx_energy_j: self.tx_energy,
            gpu_energy_j: self.gpu_energy,
            total_energy_j: self.cpu_energy + self.tx_energy + self.gpu_energy,
            masking_violations: self.violations,
            risk_flags: self.risk_flags,
            ..EpisodeMetrics::default()
        };
        let mut offloaded = 0usize;
        for rec in &self.tasks {
            let o = rec.outcome();
            let k = &mut m.per_kind[rec.task.kind.index()];
            k.generated += 1;
            k.latency_s += o.d_total_s;
            k.energy_j += o.energy_j;
            if o.completed {
                k.completed += 1;
                m.completed += 1;
            } else {
                m.failed += 1;
            }
            m.cumulative_latency_s += o.d_total_s;
            offloaded += usize::from(matches!(rec.placement, Placement::Server(_)));
        }
        if m.generated == 0 {
            m.completion_rate = 1.0;
        } else {
            m.completion_rate = m.completed as f64 / m.generated as f64;
            m.mean_latency_s = m.cumulative_latency_s / m.generated as f64;
            m.offload_fraction = offloaded as f64 / m.generated as f64;
        }
        let decisions = (self.slot as usize * self.devices.len()).max(1) as f64;
        m.mean_cpu_frac = self.frac_sum[0] / decisions;
        m.mean_power_frac = self.frac_sum[1] / decisions;
        m.mean_load = if self.loads.is_empty() {
            0.0
        } else {
            self.loads.iter().sum::<f64>() / self.loads.len() as f64
        };
        m
    }

    /// Runs slots until every task resolves after the generation window or
    /// the horizon is reached.
    pub fn run_episode(&mut self, agents: &mut Agents) -> Result<(EpisodeMetrics, Vec<SlotRecord>), SimError> {
        let mut records = Vec::new();
        while !self.finished {
            records.push(self.run_slot(agents)?);
        }
        Ok((self.metrics(), records))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SlotEnergy {
    local_cpu: f64,
    tx: f64,
    gpu: f64,
}

/// Work tentatively added to queues while evaluating a candidate batch plan.
#[derive(Debug, Clone)]
struct Extra {
    lc: Vec<f64>,
    tx: Vec<f64>,
    lg: Vec<f64>,
    sc: Vec<f64>,
    sg: Vec<f64>,
}

impl Extra {
    fn new(n_dev: usize, n_srv: usize) -> Self {
        Self {
            lc: vec![0.0; n_dev],
            tx: vec![0.0; n_dev],
            lg: vec![0.0; n_dev],
            sc: vec![0.0; n_srv],
            sg: vec![0.0; n_srv],
        }
    }

    fn add(&mut self, t: &Task, target: usize) {
        let d = t.origin_device;
        if target == 0 {
            self.lc[d] += t.cpu_cycles();
            self.lg[d] += t.gpu_load_flops;
        } else {
            self.tx[d] += t.size_s_bits;
            self.sc[target - 1] += t.cpu_cycles();
            self.sg[target - 1] += t.gpu_load_flops;
        }
    }
}
