//! Devices, servers, GPUs, the wireless link, mobility and workload
//! generation.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A value that may carry a diagnostic flag (e.g. an input was clamped).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged<T> {
    pub value: T,
    pub flagged: bool,
}

impl<T> Flagged<T> {
    pub fn clean(value: T) -> Self {
        Self { value, flagged: false }
    }
}

/// Closed interval `[min, max]`, written as a two-element array in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span(pub f64, pub f64);

impl Span {
    pub fn min(&self) -> f64 {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.1
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.1 > self.0 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub clock_hz: f64,
    pub cuda_cores: f64,
    pub memory_bytes: f64,
    pub bandwidth_bytes_per_s: f64,
    pub power_w: f64,
}

impl GpuSpec {
    pub fn is_valid(&self) -> bool {
        [
            self.clock_hz,
            self.cuda_cores,
            self.memory_bytes,
            self.bandwidth_bytes_per_s,
            self.power_w,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0)
    }
}

/// Named GPU models. Core counts, memory, bandwidth and board power follow
/// vendor data sheets; clocks are boost clocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpuPreset {
    TeslaP100,
    TeslaV100,
    TeslaA100,
    TeslaH100,
    Gtx1660,
    Rtx3060,
    Rtx3080,
    Rtx4090,
}

impl GpuPreset {
    pub fn spec(self) -> GpuSpec {
        const GB: f64 = 1e9;
        let (clock_ghz, cores, mem_gb, bw_gbs, power) = match self {
            GpuPreset::TeslaP100 => (1.480, 3584.0, 16.0, 732.0, 250.0),
            GpuPreset::TeslaV100 => (1.530, 5120.0, 32.0, 900.0, 300.0),
            GpuPreset::TeslaA100 => (1.410, 6912.0, 80.0, 1555.0, 400.0),
            GpuPreset::TeslaH100 => (1.755, 14592.0, 80.0, 3000.0, 700.0),
            GpuPreset::Gtx1660 => (1.785, 1408.0, 6.0, 192.0, 120.0),
            GpuPreset::Rtx3060 => (1.777, 3584.0, 12.0, 360.0, 170.0),
            GpuPreset::Rtx3080 => (1.710, 8704.0, 10.0, 760.0, 320.0),
            GpuPreset::Rtx4090 => (2.520, 16384.0, 32.0, 1008.0, 450.0),
        };
        GpuSpec {
            clock_hz: clock_ghz * 1e9,
            cuda_cores: cores,
            memory_bytes: mem_gb * GB,
            bandwidth_bytes_per_s: bw_gbs * GB,
            power_w: power,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub g0: f64,
    pub d0_m: f64,
    pub bandwidth_hz: f64,
    pub noise_w: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            g0: 1e-3,
            d0_m: 1.0,
            bandwidth_hz: 1e7,
            noise_w: 1e-13,
        }
    }
}

/// Path-loss gain `G0·(d0/d)^gamma`. Distances below `d0` are clamped to
/// `d0` and flagged.
pub fn channel_gain(params: &ChannelParams, distance_m: f64, gamma: f64) -> Flagged<f64> {
    let flagged = !(distance_m >= params.d0_m);
    let d = if flagged { params.d0_m } else { distance_m };
    Flagged {
        value: params.g0 * (params.d0_m / d).powf(gamma),
        flagged,
    }
}

/// Shannon rate `B·log2(1 + p·g/N0)` in bits per second.
pub fn transmission_rate(params: &ChannelParams, power_w: f64, gain: f64) -> f64 {
    if power_w <= 0.0 || gain <= 0.0 {
        return 0.0;
    }
    params.bandwidth_hz * (power_w * gain / params.noise_w).ln_1p() / std::f64::consts::LN_2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CpuIntensive,
    GpuIntensive,
    IoIntensive,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::CpuIntensive,
        TaskKind::GpuIntensive,
        TaskKind::IoIntensive,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TaskKind::CpuIntensive => "cpu",
            TaskKind::GpuIntensive => "gpu",
            TaskKind::IoIntensive => "io",
        }
    }

    pub fn index(self) -> usize {
        match self {
            TaskKind::CpuIntensive => 0,
            TaskKind::GpuIntensive => 1,
            TaskKind::IoIntensive => 2,
        }
    }
}

pub type TaskId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub kind: TaskKind,
    pub priority_b: u8,
    pub size_s_bits: f64,
    pub cycles_per_bit_c: f64,
    pub deadline_ddl_s: f64,
    pub cores_n: f64,
    pub mem_m_bytes: f64,
    pub gpu_load_flops: f64,
    pub created_t: f64,
    pub origin_device: usize,
}

impl Task {
    /// CPU work `w = s·c` in cycles.
    pub fn cpu_cycles(&self) -> f64 {
        self.size_s_bits * self.cycles_per_bit_c
    }

    /// Data footprint in bytes, used as the CPU-memory demand.
    pub fn size_bytes(&self) -> f64 {
        self.size_s_bits / 8.0
    }

    pub fn has_gpu_demand(&self) -> bool {
        self.gpu_load_flops > 0.0 || self.cores_n > 0.0 || self.mem_m_bytes > 0.0
    }

    pub fn is_valid(&self) -> bool {
        self.size_s_bits > 0.0
            && self.deadline_ddl_s > self.created_t
            && (1..=4).contains(&self.priority_b)
            && (self.kind == TaskKind::GpuIntensive
                || (self.cores_n == 0.0 && self.mem_m_bytes == 0.0 && self.gpu_load_flops == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub id: usize,
    pub cpu_f_max_hz: f64,
    pub p_max_w: f64,
    pub mem_bytes: f64,
    pub gpu: GpuSpec,
    pub mobility_step_m: f64,
    pub distance_m: Vec<f64>,
    pub pathloss_gamma: Vec<f64>,
    pub cpu_f_now_hz: f64,
    pub p_now_w: f64,
}

impl DeviceState {
    pub fn gains(&self, channel: &ChannelParams) -> Vec<f64> {
        self.distance_m
            .iter()
            .zip(&self.pathloss_gamma)
            .map(|(&d, &g)| channel_gain(channel, d, g).value)
            .collect()
    }

    /// Gain of the strongest server link.
    pub fn best_gain(&self, channel: &ChannelParams) -> f64 {
        self.gains(channel).into_iter().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub id: usize,
    pub cpu_f_hz: f64,
    pub mem_bytes: f64,
    pub gpu: GpuSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityBounds {
    pub min_m: f64,
    pub max_m: f64,
}

impl Default for MobilityBounds {
    fn default() -> Self {
        Self {
            min_m: 100.0,
            max_m: 10_000.0,
        }
    }
}

fn reflect(mut x: f64, lo: f64, hi: f64) -> f64 {
    // a single step is far smaller than the interval, but loop anyway
    loop {
        if x > hi {
            x = 2.0 * hi - x;
        } else if x < lo {
            x = 2.0 * lo - x;
        } else {
            return x;
        }
    }
}

/// Bounded random walk: every server distance moves by a uniform draw in
/// `±mobility_step_m` and is reflected at the bounds.
pub fn step_mobility<R: Rng + ?Sized>(device: &mut DeviceState, bounds: MobilityBounds, rng: &mut R) {
    let step = device.mobility_step_m;
    for d in &mut device.distance_m {
        let delta = if step > 0.0 {
            rng.random_range(-step..=step)
        } else {
            0.0
        };
        *d = reflect(*d + delta, bounds.min_m, bounds.max_m);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadRanges {
    /// Relative weights of CPU-, GPU- and I/O-intensive tasks.
    pub kind_weights: [f64; 3],
    pub cpu_size_bytes: Span,
    pub cpu_cycles_per_bit: Span,
    pub gpu_size_bytes: Span,
    pub gpu_cycles_per_bit: Span,
    pub gpu_cores: Span,
    pub gpu_mem_bytes: Span,
    pub gpu_flops: Span,
    pub io_size_bytes: Span,
    pub io_cycles_per_bit: Span,
    pub compute_deadline_s: Span,
    pub io_deadline_s: Span,
    /// Tasks are only generated in slots `0..generation_slots`.
    pub generation_slots: u32,
}

impl Default for WorkloadRanges {
    fn default() -> Self {
        Self {
            kind_weights: [5.0, 4.0, 1.0],
            cpu_size_bytes: Span(64e3, 262e3),
            cpu_cycles_per_bit: Span(500.0, 2000.0),
            gpu_size_bytes: Span(6.4e3, 26.2e3),
            gpu_cycles_per_bit: Span(500.0, 2000.0),
            gpu_cores: Span(5120.0, 14592.0),
            gpu_mem_bytes: Span(2e9, 16e9),
            gpu_flops: Span(1e10, 1e11),
            io_size_bytes: Span(640.0, 2.6e3),
            io_cycles_per_bit: Span(10.0, 100.0),
            compute_deadline_s: Span(1.0, 1.5),
            io_deadline_s: Span(0.5, 1.0),
            generation_slots: 5,
        }
    }
}

/// Stochastic task source with a monotone id counter.
#[derive(Debug, Clone)]
pub struct TaskGenerator {
    pub ranges: WorkloadRanges,
    pub devices: usize,
    next_id: TaskId,
}

impl TaskGenerator {
    pub fn new(ranges: WorkloadRanges, devices: usize) -> Self {
        Self {
            ranges,
            devices,
            next_id: 0,
        }
    }

    pub fn generated(&self) -> u64 {
        self.next_id
    }

    fn sample_kind<R: Rng + ?Sized>(&self, rng: &mut R) -> TaskKind {
        let w = self.ranges.kind_weights;
        let total: f64 = w.iter().sum();
        let u = rng.random::<f64>() * total;
        if u < w[0] {
            TaskKind::CpuIntensive
        } else if u < w[0] + w[1] {
            TaskKind::GpuIntensive
        } else {
            TaskKind::IoIntensive
        }
    }

    /// Emits `rate_per_slot` tasks created at the start of `slot`, or nothing
    /// once the generation window has passed.
    pub fn generate<R: Rng + ?Sized>(
        &mut self,
        rate_per_slot: usize,
        slot: u32,
        slot_s: f64,
        rng: &mut R,
    ) -> Vec<Task> {
        if slot >= self.ranges.generation_slots || self.devices == 0 {
            return Vec::new();
        }
        let now = slot as f64 * slot_s;
        (0..rate_per_slot).map(|_| self.sample_task(now, rng)).collect()
    }

    fn sample_task<R: Rng + ?Sized>(&mut self, now: f64, rng: &mut R) -> Task {
        let r = &self.ranges;
        let kind = self.sample_kind(rng);
        let priority_b = rng.random_range(1..=4u8);
        let origin_device = rng.random_range(0..self.devices);
        let (size_bytes, cpb, cores, mem, flops, slack) = match kind {
            TaskKind::CpuIntensive => (
                r.cpu_size_bytes.sample(rng),
                r.cpu_cycles_per_bit.sample(rng),
                0.0,
                0.0,
                0.0,
                r.compute_deadline_s.sample(rng),
            ),
            TaskKind::GpuIntensive => (
                r.gpu_size_bytes.sample(rng),
                r.gpu_cycles_per_bit.sample(rng),
                rng.random_range(r.gpu_cores.min() as u64..=r.gpu_cores.max() as u64) as f64,
                r.gpu_mem_bytes.sample(rng),
                r.gpu_flops.sample(rng),
                r.compute_deadline_s.sample(rng),
            ),
            TaskKind::IoIntensive => (
                r.io_size_bytes.sample(rng),
                r.io_cycles_per_bit.sample(rng),
                0.0,
                0.0,
                0.0,
                r.io_deadline_s.sample(rng),
            ),
        };
        let id = self.next_id;
        self.next_id += 1;
        Task {
            id,
            kind,
            priority_b,
            size_s_bits: size_bytes * 8.0,
            cycles_per_bit_c: cpb,
            deadline_ddl_s: now + slack,
            cores_n: cores,
            mem_m_bytes: mem,
            gpu_load_flops: flops,
            created_t: now,
            origin_device,
        }
    }
}

/// Static description of a deployment: capability ranges, presets, link and
/// workload parameters. A concrete topology is sampled from it per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub devices: usize,
    pub device_cpu_hz: Span,
    pub device_p_max_w: Span,
    pub device_mem_bytes: Span,
    pub device_gpus: Vec<GpuPreset>,
    pub mobility_steps_m: Vec<f64>,
    pub initial_distance_m: Span,
    pub distance_bounds_m: Span,
    pub pathloss_gamma: Span,
    pub server_gpus: Vec<GpuPreset>,
    pub server_cpu_hz: Span,
    pub server_mem_bytes: Vec<f64>,
    /// Fraction of peak FMA throughput a GPU sustains.
    pub gpu_efficiency: f64,
    pub channel: ChannelParams,
    pub workload: WorkloadRanges,
}

impl Default for Scenario {
    /// Eight devices and three servers (V100/A100/H100).
    fn default() -> Self {
        Self {
            devices: 8,
            device_cpu_hz: Span(2e9, 3e9),
            device_p_max_w: Span(2.0, 3.0),
            device_mem_bytes: Span(8e9, 16e9),
            device_gpus: vec![
                GpuPreset::Gtx1660,
                GpuPreset::Rtx3060,
                GpuPreset::Rtx3080,
                GpuPreset::Rtx4090,
            ],
            mobility_steps_m: vec![10.0, 20.0],
            initial_distance_m: Span(1500.0, 7500.0),
            distance_bounds_m: Span(100.0, 10_000.0),
            pathloss_gamma: Span(1.6, 3.5),
            server_gpus: vec![GpuPreset::TeslaV100, GpuPreset::TeslaA100, GpuPreset::TeslaH100],
            server_cpu_hz: Span(50e9, 60e9),
            server_mem_bytes: vec![64e9, 128e9, 256e9, 512e9, 1024e9],
            gpu_efficiency: 0.5,
            channel: ChannelParams::default(),
            workload: WorkloadRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid scenario: {0}")]
pub struct ScenarioError(pub String);

impl Scenario {
    /// Full-size deployment: 35 devices, five servers.
    pub fn full_scale() -> Self {
        Self {
            devices: 35,
            server_gpus: vec![
                GpuPreset::TeslaP100,
                GpuPreset::TeslaV100,
                GpuPreset::TeslaA100,
                GpuPreset::TeslaH100,
                GpuPreset::TeslaH100,
            ],
            ..Self::default()
        }
    }

    pub fn servers(&self) -> usize {
        self.server_gpus.len()
    }

    pub fn mobility_bounds(&self) -> MobilityBounds {
        MobilityBounds {
            min_m: self.distance_bounds_m.min(),
            max_m: self.distance_bounds_m.max(),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let err = |m: &str| Err(ScenarioError(m.to_string()));
        if self.devices == 0 {
            return err("devices must be at least 1");
        }
        if self.device_gpus.is_empty() {
            return err("device_gpus must not be empty");
        }
        if self.mobility_steps_m.is_empty() || self.mobility_steps_m.iter().any(|s| *s < 0.0) {
            return err("mobility_steps_m must be non-empty and non-negative");
        }
        if self.server_mem_bytes.is_empty() && !self.server_gpus.is_empty() {
            return err("server_mem_bytes must not be empty");
        }
        if !(self.gpu_efficiency > 0.0 && self.gpu_efficiency <= 1.0) {
            return err("gpu_efficiency must lie in (0, 1]");
        }
        for (name, span) in [
            ("device_cpu_hz", self.device_cpu_hz),
            ("device_p_max_w", self.device_p_max_w),
            ("device_mem_bytes", self.device_mem_bytes),
            ("initial_distance_m", self.initial_distance_m),
            ("distance_bounds_m", self.distance_bounds_m),
            ("pathloss_gamma", self.pathloss_gamma),
            ("server_cpu_hz", self.server_cpu_hz),
        ] {
            if !(span.min() > 0.0 && span.max() >= span.min() && span.max().is_finite()) {
                return Err(ScenarioError(format!("{name} must be a positive, ordered range")));
            }
        }
        if self.initial_distance_m.min() < self.distance_bounds_m.min()
            || self.initial_distance_m.max() > self.distance_bounds_m.max()
        {
            return err("initial_distance_m must lie within distance_bounds_m");
        }
        if self.distance_bounds_m.min() < self.channel.d0_m {
            return err("distance_bounds_m must not go below the reference distance");
        }
        let c = &self.channel;
        if !(c.g0 > 0.0 && c.d0_m > 0.0 && c.bandwidth_hz > 0.0 && c.noise_w > 0.0) {
            return err("channel parameters must be positive");
        }
        let w = &self.workload;
        if w.kind_weights.iter().any(|v| *v < 0.0) || w.kind_weights.iter().sum::<f64>() <= 0.0 {
            return err("workload.kind_weights must be non-negative with a positive sum");
        }
        if w.cpu_size_bytes.min() <= 0.0 || w.gpu_size_bytes.min() <= 0.0 || w.io_size_bytes.min() <= 0.0 {
            return err("task sizes must be positive");
        }
        if w.compute_deadline_s.min() <= 0.0 || w.io_deadline_s.min() <= 0.0 {
            return err("deadlines must be positive");
        }
        Ok(())
    }

    /// Samples devices (caps, GPUs, mobility class, link distances and
    /// path-loss exponents) and servers.
    pub fn build_topology<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<DeviceState>, Vec<ServerState>) {
        let n_servers = self.servers();
        let devices = (0..self.devices)
            .map(|id| {
                let cpu = self.device_cpu_hz.sample(rng);
                let p = self.device_p_max_w.sample(rng);
                let mem = self.device_mem_bytes.sample(rng);
                let gpu = self.device_gpus.choose(rng).copied().expect("non-empty").spec();
                let step = *self.mobility_steps_m.choose(rng).expect("non-empty");
                let distance_m = (0..n_servers).map(|_| self.initial_distance_m.sample(rng)).collect();
                let pathloss_gamma = (0..n_servers).map(|_| self.pathloss_gamma.sample(rng)).collect();
                DeviceState {
                    id,
                    cpu_f_max_hz: cpu,
                    p_max_w: p,
                    mem_bytes: mem,
                    gpu,
                    mobility_step_m: step,
                    distance_m,
                    pathloss_gamma,
                    cpu_f_now_hz: cpu,
                    p_now_w: p,
                }
            })
            .collect();
        let servers = self
            .server_gpus
            .iter()
            .enumerate()
            .map(|(id, preset)| ServerState {
                id,
                cpu_f_hz: self.server_cpu_hz.sample(rng),
                mem_bytes: *self.server_mem_bytes.choose(rng).expect("non-empty"),
                gpu: preset.spec(),
            })
            .collect();
        (devices, servers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-300)
    }

    #[test]
    fn gain_examples() {
        let p = ChannelParams::default();
        assert!(close(channel_gain(&p, 1.0, 2.7).value, 1e-3, 1e-12));
        assert!(close(channel_gain(&p, 1000.0, 2.0).value, 1e-9, 1e-12));
        assert!(close(channel_gain(&p, 100.0, 3.0).value, 1e-9, 1e-12));
    }

    #[test]
    fn gain_clamps_short_distances() {
        let p = ChannelParams::default();
        let g = channel_gain(&p, 0.25, 2.0);
        assert!(g.flagged);
        assert_eq!(g.value, 1e-3);
        assert!(!channel_gain(&p, 1.0, 2.0).flagged);
    }

    #[test]
    fn rate_examples() {
        let p = ChannelParams::default();
        assert_eq!(transmission_rate(&p, 0.0, 1e-9), 0.0);
        assert_eq!(transmission_rate(&p, 2.0, 0.0), 0.0);
        let r = transmission_rate(&p, 2.0, 1e-9);
        assert!(close(r, 1e7 * (1.0f64 + 2e4).log2(), 1e-12));
        assert!(close(r, 1.4288e8, 1e-4));
        let r = transmission_rate(&p, 2.0, 1e-12);
        assert!(close(r, 1e7 * 21f64.log2(), 1e-12));
        assert!(close(r, 4.392e7, 1e-3));
    }

    #[test]
    fn mobility_reflects_at_both_bounds() {
        let b = MobilityBounds::default();
        let mut dev = DeviceState {
            id: 0,
            cpu_f_max_hz: 2e9,
            p_max_w: 2.0,
            mem_bytes: 8e9,
            gpu: GpuPreset::Gtx1660.spec(),
            mobility_step_m: 20.0,
            distance_m: vec![10_000.0, 100.0],
            pathloss_gamma: vec![2.0, 2.0],
            cpu_f_now_hz: 2e9,
            p_now_w: 2.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            dev.distance_m = vec![10_000.0, 100.0];
            step_mobility(&mut dev, b, &mut rng);
            assert!(dev.distance_m[0] <= 10_000.0 && dev.distance_m[0] >= 9_980.0);
            assert!(dev.distance_m[1] >= 100.0 && dev.distance_m[1] <= 120.0);
        }
        assert_eq!(reflect(10_005.0, 100.0, 10_000.0), 9_995.0);
        assert_eq!(reflect(93.0, 100.0, 10_000.0), 107.0);
    }

    #[test]
    fn mobility_applies_the_seeded_draw() {
        let mut dev = DeviceState {
            id: 0,
            cpu_f_max_hz: 2e9,
            p_max_w: 2.0,
            mem_bytes: 8e9,
            gpu: GpuPreset::Gtx1660.spec(),
            mobility_step_m: 10.0,
            distance_m: vec![5000.0],
            pathloss_gamma: vec![2.0],
            cpu_f_now_hz: 2e9,
            p_now_w: 2.0,
        };
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = a.clone();
        let draw: f64 = b.random_range(-10.0..=10.0);
        step_mobility(&mut dev, MobilityBounds::default(), &mut a);
        assert_eq!(dev.distance_m[0], 5000.0 + draw);
    }

    #[test]
    fn mobility_stays_bounded_over_a_million_steps() {
        let s = Scenario::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut devices, _) = s.build_topology(&mut rng);
        let dev = &mut devices[0];
        dev.mobility_step_m = 20.0;
        for _ in 0..1_000_000 {
            step_mobility(dev, s.mobility_bounds(), &mut rng);
            assert!(dev.distance_m.iter().all(|d| (100.0..=10_000.0).contains(d)));
        }
    }

    #[test]
    fn generation_window_and_count() {
        let mut g = TaskGenerator::new(WorkloadRanges::default(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(g.generate(10, 0, 1.0, &mut rng).len(), 10);
        assert_eq!(g.generate(10, 4, 1.0, &mut rng).len(), 10);
        assert!(g.generate(10, 5, 1.0, &mut rng).is_empty());
        assert_eq!(g.generated(), 20);
    }

    #[test]
    fn kind_mix_and_attribute_ranges() {
        let r = WorkloadRanges::default();
        let mut g = TaskGenerator::new(r.clone(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 3];
        let n = 100_000;
        let tasks: Vec<Task> = (0..n / 10)
            .flat_map(|i| g.generate(10, (i % 5) as u32, 1.0, &mut rng))
            .collect();
        assert_eq!(tasks.len(), n);
        for t in &tasks {
            counts[t.kind.index()] += 1;
            assert!(t.is_valid());
            assert!(t.origin_device < 8);
            let slack = t.deadline_ddl_s - t.created_t;
            let bytes = t.size_bytes();
            match t.kind {
                TaskKind::CpuIntensive => {
                    assert!(r.cpu_size_bytes.contains(bytes));
                    assert!(r.cpu_cycles_per_bit.contains(t.cycles_per_bit_c));
                    assert!(r.compute_deadline_s.contains(slack));
                }
                TaskKind::GpuIntensive => {
                    assert!(r.gpu_size_bytes.contains(bytes));
                    assert!((5120.0..=14592.0).contains(&t.cores_n));
                    assert_eq!(t.cores_n.fract(), 0.0);
                    assert!(r.gpu_mem_bytes.contains(t.mem_m_bytes));
                    assert!(r.gpu_flops.contains(t.gpu_load_flops));
                    assert!(r.compute_deadline_s.contains(slack));
                }
                TaskKind::IoIntensive => {
                    assert!(r.io_size_bytes.contains(bytes));
                    assert_eq!(t.cores_n, 0.0);
                    assert_eq!(t.mem_m_bytes, 0.0);
                    assert!(r.io_deadline_s.contains(slack));
                }
            }
        }
        for (c, p) in counts.iter().zip([0.5, 0.4, 0.1]) {
            let f = *c as f64 / n as f64;
            assert!((f - p).abs() < 0.01, "{f} vs {p}");
        }
    }

    #[test]
    fn presets_match_published_figures() {
        let h = GpuPreset::TeslaH100.spec();
        assert_eq!(h.cuda_cores, 14592.0);
        assert_eq!(h.memory_bytes, 80e9);
        assert_eq!(h.bandwidth_bytes_per_s, 3000e9);
        assert_eq!(h.power_w, 700.0);
        let p = GpuPreset::TeslaP100.spec();
        assert_eq!((p.cuda_cores, p.memory_bytes, p.power_w), (3584.0, 16e9, 250.0));
        let v = GpuPreset::TeslaV100.spec();
        assert_eq!((v.cuda_cores, v.memory_bytes, v.power_w), (5120.0, 32e9, 300.0));
        let a = GpuPreset::TeslaA100.spec();
        assert_eq!((a.cuda_cores, a.memory_bytes, a.power_w), (6912.0, 80e9, 400.0));
        for preset in [GpuPreset::Gtx1660, GpuPreset::Rtx4090, GpuPreset::Rtx3060, GpuPreset::Rtx3080] {
            assert!(preset.spec().is_valid());
        }
    }

    #[test]
    fn topology_respects_ranges() {
        let s = Scenario::default();
        s.validate().unwrap();
        let (devices, servers) = s.build_topology(&mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(devices.len(), 8);
        assert_eq!(servers.len(), 3);
        for d in &devices {
            assert!(s.device_cpu_hz.contains(d.cpu_f_max_hz));
            assert!(s.device_p_max_w.contains(d.p_max_w));
            assert!(d.distance_m.iter().all(|x| s.initial_distance_m.contains(*x)));
            assert!(d.pathloss_gamma.iter().all(|x| s.pathloss_gamma.contains(*x)));
        }
        for sv in &servers {
            assert!(s.server_cpu_hz.contains(sv.cpu_f_hz));
        }
    }

    proptest! {
        #[test]
        fn gain_decreases_with_distance(d in 1.0f64..1e4, extra in 1e-3f64..1e3, gamma in 1.6f64..3.5) {
            let p = ChannelParams::default();
            prop_assert!(channel_gain(&p, d + extra, gamma).value < channel_gain(&p, d, gamma).value);
        }

        #[test]
        fn rate_monotone_and_concave_in_power(p in 0.0f64..3.0, h in 1e-3f64..0.5, g in 1e-16f64..1e-6) {
            let c = ChannelParams::default();
            let r0 = transmission_rate(&c, p, g);
            let r1 = transmission_rate(&c, p + h, g);
            let r2 = transmission_rate(&c, p + 2.0 * h, g);
            prop_assert!(r1 >= r0);
            prop_assert!(transmission_rate(&c, p, g * 2.0) >= r0);
            if p > 0.0 {
                prop_assert!(r2 - 2.0 * r1 + r0 <= 1e-6 * r2.max(1.0));
            }
        }
    }
}
