//! Latency, energy, cost and the two reward signals.

use serde::{Deserialize, Serialize};

use crate::environment::{GpuSpec, Task, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostParams {
    /// Latency weight in the task cost.
    pub lambda: f64,
    /// Energy weight in the power reward.
    pub lambda_e: f64,
    pub alpha_fail: f64,
    /// Effective switching capacitance.
    pub kappa: f64,
    pub slot_s: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            lambda_e: 0.5,
            alpha_fail: 1.0,
            kappa: 1e-28,
            slot_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Placement {
    Local,
    Server(usize),
}

impl Placement {
    /// 0 for local, `k + 1` for server `k`.
    pub fn action_index(self) -> usize {
        match self {
            Placement::Local => 0,
            Placement::Server(k) => k + 1,
        }
    }

    pub fn from_action(index: usize) -> Self {
        if index == 0 {
            Placement::Local
        } else {
            Placement::Server(index - 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum PerfError {
    #[error("GPU efficiency must lie in (0, 1], got {0}")]
    Efficiency(f64),
    #[error("a traversed stage has zero service rate")]
    ZeroRate,
}

/// FMA convention: `2 · cores · clock · efficiency`.
pub fn effective_gpu_flops(spec: &GpuSpec, efficiency: f64) -> Result<f64, PerfError> {
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(PerfError::Efficiency(efficiency));
    }
    Ok(2.0 * spec.cuda_cores * spec.clock_hz * efficiency)
}

/// Queueing delay observed ahead of each stage of a task's path.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageWaits {
    pub tx: f64,
    pub cpu: f64,
    pub gpu: f64,
}

/// Service rates along the chosen path: the executing CPU (Hz), the uplink
/// (bits/s, offloaded only) and the executing GPU (FLOPS).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathRates {
    pub cpu_hz: f64,
    pub tx_bps: f64,
    pub gpu_flops: f64,
}

/// Per-stage latency components; their sum is the end-to-end latency.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub wait_tx: f64,
    pub tx: f64,
    pub wait_cpu: f64,
    pub cpu: f64,
    pub wait_gpu: f64,
    pub gpu: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.wait_tx + self.tx + self.wait_cpu + self.cpu + self.wait_gpu + self.gpu
    }
}

/// End-to-end latency with sequential CPU then GPU stages; offloaded tasks
/// first cross the uplink.
pub fn task_latency(
    task: &Task,
    placement: Placement,
    waits: StageWaits,
    rates: PathRates,
) -> Result<LatencyBreakdown, PerfError> {
    let mut b = LatencyBreakdown::default();
    let cycles = task.cpu_cycles();
    if let Placement::Server(_) = placement {
        if task.size_s_bits > 0.0 {
            if rates.tx_bps <= 0.0 {
                return Err(PerfError::ZeroRate);
            }
            b.tx = task.size_s_bits / rates.tx_bps;
        }
        b.wait_tx = waits.tx;
    }
    if cycles > 0.0 {
        if rates.cpu_hz <= 0.0 {
            return Err(PerfError::ZeroRate);
        }
        b.cpu = cycles / rates.cpu_hz;
    }
    b.wait_cpu = waits.cpu;
    if task.gpu_load_flops > 0.0 {
        if rates.gpu_flops <= 0.0 {
            return Err(PerfError::ZeroRate);
        }
        b.gpu = task.gpu_load_flops / rates.gpu_flops;
        b.wait_gpu = waits.gpu;
    }
    Ok(b)
}

/// CPU energy for `cycles` at frequency `f`: `κ·f²` per cycle.
pub fn cpu_energy(kappa: f64, f_hz: f64, cycles: f64) -> f64 {
    kappa * f_hz * f_hz * cycles
}

/// Energy of a CPU clocked at `f` for a whole slot: `κ·f³·τ`.
pub fn cpu_slot_energy(kappa: f64, f_hz: f64, slot_s: f64) -> f64 {
    kappa * f_hz.powi(3) * slot_s
}

/// Attributed energy of one task: local CPU switching energy, uplink energy,
/// and the draw of whichever GPU runs its kernel. Server CPU energy is not
/// attributed.
#[allow(clippy::too_many_arguments)]
pub fn task_energy(
    task: &Task,
    placement: Placement,
    f_l: f64,
    p_w: f64,
    r_bps: f64,
    gpu: &GpuSpec,
    gpu_flops: f64,
    params: &CostParams,
) -> Result<f64, PerfError> {
    let mut e = 0.0;
    match placement {
        Placement::Local => e += cpu_energy(params.kappa, f_l, task.cpu_cycles()),
        Placement::Server(_) => {
            if p_w > 0.0 && task.size_s_bits > 0.0 {
                if r_bps <= 0.0 {
                    return Err(PerfError::ZeroRate);
                }
                e += p_w * task.size_s_bits / r_bps;
            }
        }
    }
    if task.gpu_load_flops > 0.0 {
        if gpu_flops <= 0.0 {
            return Err(PerfError::ZeroRate);
        }
        e += gpu.power_w * task.gpu_load_flops / gpu_flops;
    }
    Ok(e)
}

/// Final state of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: TaskId,
    pub priority_b: u8,
    pub completed: bool,
    pub deadline_met: bool,
    pub d_total_s: f64,
    pub energy_j: f64,
    pub fail_flag: bool,
    pub placement: Placement,
}

impl TaskOutcome {
    pub fn is_consistent(&self) -> bool {
        (!self.deadline_met || self.completed)
            && self.d_total_s >= 0.0
            && self.energy_j >= 0.0
            && self.fail_flag != (self.completed && self.deadline_met)
    }
}

/// `λ·b·D_tot + (1−λ)·E`.
pub fn task_cost(priority_b: u8, d_total_s: f64, energy_j: f64, params: &CostParams) -> f64 {
    params.lambda * priority_b as f64 * d_total_s + (1.0 - params.lambda) * energy_j
}

pub fn outcome_cost(outcome: &TaskOutcome, params: &CostParams) -> f64 {
    task_cost(outcome.priority_b, outcome.d_total_s, outcome.energy_j, params)
}

/// `Σ b_completed − λ_e·E`.
pub fn power_reward(completed_priorities: &[u8], energy_j: f64, params: &CostParams) -> f64 {
    completed_priorities.iter().map(|&b| b as f64).sum::<f64>() - params.lambda_e * energy_j
}

/// `−cost − α·I_fail`.
pub fn allocation_reward(outcome: &TaskOutcome, params: &CostParams) -> f64 {
    -outcome_cost(outcome, params) - if outcome.fail_flag { params.alpha_fail } else { 0.0 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{GpuPreset, TaskKind};

    fn cpu_task(bits: f64, cpb: f64) -> Task {
        Task {
            id: 0,
            kind: TaskKind::CpuIntensive,
            priority_b: 1,
            size_s_bits: bits,
            cycles_per_bit_c: cpb,
            deadline_ddl_s: 10.0,
            cores_n: 0.0,
            mem_m_bytes: 0.0,
            gpu_load_flops: 0.0,
            created_t: 0.0,
            origin_device: 0,
        }
    }

    fn outcome(b: u8, d: f64, e: f64, fail: bool) -> TaskOutcome {
        TaskOutcome {
            task: 0,
            priority_b: b,
            completed: !fail,
            deadline_met: !fail,
            d_total_s: d,
            energy_j: e,
            fail_flag: fail,
            placement: Placement::Local,
        }
    }

    #[test]
    fn gpu_flops_examples() {
        let unit = GpuSpec {
            clock_hz: 1.0,
            cuda_cores: 1.0,
            memory_bytes: 1.0,
            bandwidth_bytes_per_s: 1.0,
            power_w: 1.0,
        };
        assert_eq!(effective_gpu_flops(&unit, 1.0).unwrap(), 2.0);
        let h100 = GpuSpec {
            clock_hz: 1.5e9,
            ..GpuPreset::TeslaH100.spec()
        };
        assert!((effective_gpu_flops(&h100, 0.5).unwrap() - 2.1888e13).abs() < 1.0);
        assert_eq!(effective_gpu_flops(&h100, 0.0), Err(PerfError::Efficiency(0.0)));
        assert!(effective_gpu_flops(&h100, 1.5).is_err());
    }

    #[test]
    fn latency_examples() {
        let t = cpu_task(1e6, 1000.0);
        let local = task_latency(
            &t,
            Placement::Local,
            StageWaits::default(),
            PathRates { cpu_hz: 2e9, tx_bps: 0.0, gpu_flops: 0.0 },
        )
        .unwrap();
        assert!((local.total() - 0.5).abs() < 1e-12);
        let off = task_latency(
            &t,
            Placement::Server(0),
            StageWaits::default(),
            PathRates { cpu_hz: 5e10, tx_bps: 1e7, gpu_flops: 0.0 },
        )
        .unwrap();
        assert!((off.total() - 0.12).abs() < 1e-12);
        assert!((off.tx - 0.1).abs() < 1e-12 && (off.cpu - 0.02).abs() < 1e-12);
        let waits = StageWaits { tx: 0.3, cpu: 0.2, gpu: 0.7 };
        let tiny = task_latency(
            &cpu_task(1e-300, 1.0),
            Placement::Server(1),
            waits,
            PathRates { cpu_hz: 5e10, tx_bps: 1e7, gpu_flops: 0.0 },
        )
        .unwrap();
        // no GPU stage for a CPU task, so its wait is not traversed
        assert!((tiny.total() - 0.5).abs() < 1e-12);
        assert_eq!(
            task_latency(&t, Placement::Server(0), waits, PathRates { cpu_hz: 5e10, tx_bps: 0.0, gpu_flops: 0.0 }),
            Err(PerfError::ZeroRate)
        );
    }

    #[test]
    fn gpu_latency_is_sequential() {
        let mut t = cpu_task(8e4, 500.0);
        t.kind = TaskKind::GpuIntensive;
        t.gpu_load_flops = 1e11;
        t.cores_n = 6000.0;
        let b = task_latency(
            &t,
            Placement::Local,
            StageWaits { tx: 0.0, cpu: 0.1, gpu: 0.05 },
            PathRates { cpu_hz: 2e9, tx_bps: 0.0, gpu_flops: 1e13 },
        )
        .unwrap();
        assert!((b.total() - (0.1 + 0.02 + 0.05 + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn energy_examples() {
        let params = CostParams::default();
        let gpu = GpuPreset::Rtx3060.spec();
        let t = cpu_task(1e6, 1000.0);
        assert_eq!(task_energy(&t, Placement::Local, 0.0, 0.0, 0.0, &gpu, 0.0, &params).unwrap(), 0.0);
        assert_eq!(task_energy(&t, Placement::Server(0), 0.0, 0.0, 0.0, &gpu, 0.0, &params).unwrap(), 0.0);
        let tx = task_energy(&t, Placement::Server(0), 2e9, 2.0, 1e7, &gpu, 0.0, &params).unwrap();
        assert!((tx - 0.2).abs() < 1e-12);
        // κ·f²·τ evaluates to 4e-10; a full slot of switching at f costs κ·f³·τ
        assert!((params.kappa * 2e9f64.powi(2) * 1.0 - 4e-10).abs() < 1e-22);
        assert!((cpu_slot_energy(1e-28, 2e9, 1.0) - 0.8).abs() < 1e-12);
        // busy for the whole slot means f·τ cycles
        assert!((cpu_energy(1e-28, 2e9, 2e9) - cpu_slot_energy(1e-28, 2e9, 1.0)).abs() < 1e-12);
        let local = task_energy(&t, Placement::Local, 2e9, 2.0, 1e7, &gpu, 0.0, &params).unwrap();
        assert!((local - 1e-28 * 4e18 * 1e9).abs() < 1e-12);
    }

    #[test]
    fn cost_examples() {
        let mut p = CostParams { lambda: 1.0, ..CostParams::default() };
        assert_eq!(task_cost(3, 2.0, 9.0, &p), 6.0);
        p.lambda = 0.0;
        assert_eq!(task_cost(3, 2.0, 9.0, &p), 9.0);
        p.lambda = 0.8;
        assert!((task_cost(2, 1.0, 0.5, &p) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn reward_examples() {
        let p = CostParams::default();
        assert_eq!(power_reward(&[], 0.0, &p), 0.0);
        assert!((power_reward(&[3, 1], 0.4, &p) - 3.8).abs() < 1e-12);
        assert!((power_reward(&[], 1.0, &p) + 0.5).abs() < 1e-12);
        assert_eq!(allocation_reward(&outcome(1, 0.0, 0.0, false), &p), 0.0);
        assert!((allocation_reward(&outcome(1, 1.0, 0.5, false), &p) + 0.9).abs() < 1e-12);
        assert!((allocation_reward(&outcome(1, 1.0, 0.5, true), &p) + 1.9).abs() < 1e-12);
    }

    #[test]
    fn cost_matches_independent_expression() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p = CostParams::default();
        for _ in 0..1000 {
            let b: u8 = rng.random_range(1..=4);
            let d: f64 = rng.random_range(0.0..10.0);
            let e: f64 = rng.random_range(0.0..50.0);
            let fail = rng.random_bool(0.3);
            let reference = 0.8 * f64::from(b) * d + 0.2 * e;
            let c = task_cost(b, d, e, &p);
            assert!((c - reference).abs() <= 1e-12 * reference.abs().max(1.0));
            let o = outcome(b, d, e, fail);
            let penalty = if fail { 1.0 } else { 0.0 };
            assert_eq!(allocation_reward(&o, &p), -outcome_cost(&o, &p) - penalty);
        }
    }

    #[test]
    fn placement_action_round_trip() {
        for i in 0..6 {
            assert_eq!(Placement::from_action(i).action_index(), i);
        }
    }
}
