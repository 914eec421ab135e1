//! Comparison placement policies.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    GreedyLocal,
    GreedyOffload,
    RoundRobin,
    Qpso,
    SingleDdqn,
    Hirl,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Random,
        PolicyKind::GreedyLocal,
        PolicyKind::GreedyOffload,
        PolicyKind::RoundRobin,
        PolicyKind::Qpso,
        PolicyKind::SingleDdqn,
        PolicyKind::Hirl,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::GreedyLocal => "greedy_local",
            PolicyKind::GreedyOffload => "greedy_offload",
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::Qpso => "qpso",
            PolicyKind::SingleDdqn => "single_ddqn",
            PolicyKind::Hirl => "hirl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label() == s)
    }

    pub fn uses_ddqn(self) -> bool {
        matches!(self, PolicyKind::SingleDdqn | PolicyKind::Hirl)
    }

    pub fn uses_td3(self) -> bool {
        self == PolicyKind::Hirl
    }
}

/// Uniform over local and every server, ignoring feasibility.
pub fn random_place<R: Rng + ?Sized>(n_servers: usize, rng: &mut R) -> usize {
    rng.random_range(0..=n_servers)
}

/// Local unless the local CPU (or, for GPU work, local GPU) queue already
/// holds more than one slot of work or local is infeasible; then the
/// feasible server with the smallest normalized backlog.
pub fn greedy_local(
    local_qhat_cpu: f64,
    local_qhat_gpu: f64,
    gpu_task: bool,
    server_load: &[f64],
    feasible: &[bool],
) -> usize {
    let overloaded = local_qhat_cpu > 1.0 || (gpu_task && local_qhat_gpu > 1.0);
    if feasible.first().copied().unwrap_or(true) && !overloaded {
        return 0;
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, &load) in server_load.iter().enumerate() {
        if !feasible.get(k + 1).copied().unwrap_or(true) {
            continue;
        }
        if best.is_none_or(|(_, b)| load < b) {
            best = Some((k + 1, load));
        }
    }
    best.map_or(0, |(a, _)| a)
}

/// Feasible server with the most spare capacity (capacity − backlog); local
/// only when no server is feasible.
pub fn greedy_offload(available: &[f64], feasible: &[bool]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (k, &avail) in available.iter().enumerate() {
        if !feasible.get(k + 1).copied().unwrap_or(true) {
            continue;
        }
        if best.is_none_or(|(_, b)| avail > b) {
            best = Some((k + 1, avail));
        }
    }
    best.map_or(0, |(a, _)| a)
}

/// Cycles through servers `1..=N`, never local (unless there are no servers).
#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    counter: usize,
}

impl RoundRobin {
    pub fn next(&mut self, n_servers: usize) -> usize {
        if n_servers == 0 {
            return 0;
        }
        let a = 1 + self.counter % n_servers;
        self.counter += 1;
        a
    }

    pub fn counter(&self) -> usize {
        self.counter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpsoConfig {
    pub particles: usize,
    pub iterations: usize,
    /// Contraction-expansion coefficient at the first and last iteration.
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for QpsoConfig {
    fn default() -> Self {
        Self {
            particles: 30,
            iterations: 50,
            beta_start: 1.0,
            beta_end: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpsoResult {
    pub allocation: Vec<usize>,
    pub fitness: f64,
    /// Global best after initialization and after every iteration.
    pub history: Vec<f64>,
}

fn decode(x: &[f64], n_actions: usize) -> Vec<usize> {
    x.iter().map(|v| (v.floor().max(0.0) as usize).min(n_actions - 1)).collect()
}

/// Quantum-behaved PSO over integer allocations. Each particle holds one
/// continuous coordinate per task in `[0, n_actions)`, decoded by flooring.
/// `fitness` is minimized.
pub fn qpso_solve<R: Rng + ?Sized>(
    n_tasks: usize,
    n_actions: usize,
    cfg: &QpsoConfig,
    mut fitness: impl FnMut(&[usize]) -> f64,
    rng: &mut R,
) -> QpsoResult {
    if n_tasks == 0 || n_actions == 0 {
        return QpsoResult {
            allocation: vec![0; n_tasks],
            fitness: fitness(&vec![0; n_tasks]),
            history: Vec::new(),
        };
    }
    let hi = n_actions as f64 - 1e-9;
    let particles = cfg.particles.max(2);
    let mut x: Vec<Vec<f64>> = (0..particles)
        .map(|_| (0..n_tasks).map(|_| rng.random_range(0.0..n_actions as f64)).collect())
        .collect();
    let mut pbest = x.clone();
    let mut pfit: Vec<f64> = x.iter().map(|p| fitness(&decode(p, n_actions))).collect();
    let mut g = 0;
    for i in 1..particles {
        if pfit[i] < pfit[g] {
            g = i;
        }
    }
    let mut gbest = pbest[g].clone();
    let mut gfit = pfit[g];
    let mut history = vec![gfit];
    for t in 0..cfg.iterations {
        let frac = if cfg.iterations > 1 { t as f64 / (cfg.iterations - 1) as f64 } else { 0.0 };
        let beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
        let mbest: Vec<f64> = (0..n_tasks)
            .map(|j| pbest.iter().map(|p| p[j]).sum::<f64>() / particles as f64)
            .collect();
        for i in 0..particles {
            for j in 0..n_tasks {
                let phi: f64 = rng.random();
                let attractor = phi * pbest[i][j] + (1.0 - phi) * gbest[j];
                let u: f64 = 1.0 - rng.random::<f64>();
                let step = beta * (mbest[j] - x[i][j]).abs() * (1.0 / u).ln();
                let v = if rng.random_bool(0.5) { attractor + step } else { attractor - step };
                x[i][j] = v.clamp(0.0, hi);
            }
            let f = fitness(&decode(&x[i], n_actions));
            if f < pfit[i] {
                pfit[i] = f;
                pbest[i] = x[i].clone();
                if f < gfit {
                    gfit = f;
                    gbest = x[i].clone();
                }
            }
        }
        history.push(gfit);
    }
    QpsoResult {
        allocation: decode(&gbest, n_actions),
        fitness: gfit,
        history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(random_place(0, &mut rng), 0);
        }
        let mut counts = [0usize; 6];
        for _ in 0..100_000 {
            counts[random_place(5, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 1.0 / 6.0).abs() < 0.01);
        }
        let a: Vec<usize> = (0..20).map(|_| random_place(5, &mut ChaCha8Rng::seed_from_u64(9))).collect();
        let b: Vec<usize> = (0..20).map(|_| random_place(5, &mut ChaCha8Rng::seed_from_u64(9))).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_examples() {
        let all = [true; 4];
        assert_eq!(greedy_local(0.0, 0.0, false, &[0.5, 0.1, 0.9], &all), 0);
        assert_eq!(greedy_local(1.5, 0.0, false, &[0.5, 0.1, 0.9], &all), 2);
        assert_eq!(greedy_local(0.2, 1.2, true, &[0.5, 0.1, 0.9], &[true, true, false, true]), 1);
        assert_eq!(greedy_local(0.2, 0.0, true, &[0.5, 0.1, 0.9], &[false, false, false, true]), 3);
        // one idle server, others saturated
        assert_eq!(greedy_offload(&[-5e9, 6e10, -1e9], &all), 2);
        // 3-server fixture: capacity 5e10, 5.5e10, 6e10 with backlogs 1e10, 3e10, 1.6e10
        let avail = [5e10 - 1e10, 5.5e10 - 3e10, 6e10 - 1.6e10];
        assert_eq!(greedy_offload(&avail, &all), 3);
        assert_eq!(greedy_offload(&avail, &[true, true, true, false]), 1);
        assert_eq!(greedy_offload(&avail, &[true, false, false, false]), 0);
    }

    #[test]
    fn round_robin_cycles_and_persists() {
        let mut rr = RoundRobin::default();
        let seq: Vec<usize> = (0..6).map(|_| rr.next(5)).collect();
        assert_eq!(seq, vec![1, 2, 3, 4, 5, 1]);
        assert_eq!(rr.counter(), 6);
        assert_eq!(rr.next(5), 2);
        let mut rr = RoundRobin::default();
        assert!((0..50).all(|_| rr.next(3) != 0));
    }

    #[test]
    fn qpso_single_task_matches_enumeration() {
        let costs = [3.0, 1.5, 0.2, 2.0];
        let r = qpso_solve(1, 4, &QpsoConfig::default(), |a| costs[a[0]], &mut ChaCha8Rng::seed_from_u64(2));
        let brute = (0..4).min_by(|&a, &b| costs[a].total_cmp(&costs[b])).unwrap();
        assert_eq!(r.allocation, vec![brute]);
        assert_eq!(r.fitness, 0.2);
    }

    #[test]
    fn qpso_zero_iterations_returns_best_initial() {
        let cfg = QpsoConfig {
            iterations: 0,
            particles: 5,
            ..QpsoConfig::default()
        };
        let mut seen = Vec::new();
        let r = qpso_solve(
            3,
            4,
            &cfg,
            |a| {
                let f = a.iter().map(|&v| v as f64).sum::<f64>();
                seen.push(f);
                f
            },
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        assert_eq!(seen.len(), 5);
        assert_eq!(r.fitness, seen.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn qpso_best_is_monotone() {
        let target = [2usize, 0, 3, 1, 1, 4];
        let r = qpso_solve(
            6,
            5,
            &QpsoConfig::default(),
            |a| a.iter().zip(&target).filter(|(x, y)| x != y).count() as f64,
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        assert_eq!(r.history.len(), 51);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.fitness, *r.history.last().unwrap());
    }

    #[test]
    fn labels_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(PolicyKind::parse(p.label()), Some(p));
        }
    }
}
