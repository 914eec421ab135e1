//! Discrete task placement with GPU-compatibility masking, double-Q targets
//! and load-adaptive exploration and step size.

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::Task;
use crate::nn::{stack_rows, Adam, Mlp, NnError, OutputActivation};
use crate::replay::{Action, Experience, ReplayBuffer, ReplayError, SamplingMode};

/// Length of the un-augmented allocation state.
pub const BASE_STATE_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdqnConfig {
    pub hidden: Vec<usize>,
    pub eps_min: f64,
    pub eps_max: f64,
    /// Load sensitivity of exploration.
    pub beta: f64,
    pub eta_base: f64,
    /// Load sensitivity of the learning rate.
    pub alpha_lr: f64,
    pub hard_update: u64,
    pub discount: f64,
    pub batch: usize,
    pub buffer: usize,
    pub gamma_fail: f64,
    /// Append `[ΔS, clip(S + ΔS)]` to the state.
    pub temporal: bool,
    pub theta_min: f64,
}

impl Default for DdqnConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            eps_min: 0.01,
            eps_max: 0.3,
            beta: 2.0,
            eta_base: 1e-4,
            alpha_lr: 0.5,
            hard_update: 1000,
            discount: 0.99,
            batch: 256,
            buffer: 600_000,
            gamma_fail: 1.5,
            temporal: true,
            theta_min: 0.05,
        }
    }
}

impl DdqnConfig {
    pub fn state_len(&self) -> usize {
        if self.temporal {
            3 * BASE_STATE_LEN
        } else {
            BASE_STATE_LEN
        }
    }
}

/// Capacities a task is checked against on one target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capacity {
    pub mem_cpu_bytes: f64,
    pub gpu_cores: f64,
    pub gpu_mem_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compatibility {
    pub feasible: bool,
    pub rho: f64,
}

impl Compatibility {
    pub const ALWAYS: Compatibility = Compatibility {
        feasible: true,
        rho: 1.0,
    };
}

/// Demand-to-capacity ratios over CPU memory, CUDA cores and GPU memory,
/// skipping dimensions the task does not use. Feasible when no ratio exceeds
/// 1; `rho` is the smallest ratio (1 with no demand), clipped to `[0, 1]`.
pub fn compatibility(task: &Task, cap: &Capacity) -> Compatibility {
    let dims = [
        (task.size_bytes(), cap.mem_cpu_bytes),
        (task.cores_n, cap.gpu_cores),
        (task.mem_m_bytes, cap.gpu_mem_bytes),
    ];
    let mut feasible = true;
    let mut rho = f64::INFINITY;
    for (demand, capacity) in dims {
        if demand <= 0.0 {
            continue;
        }
        let ratio = if capacity > 0.0 { demand / capacity } else { f64::INFINITY };
        feasible &= ratio <= 1.0;
        rho = rho.min(ratio);
    }
    Compatibility {
        feasible,
        rho: rho.clamp(0.0, 1.0),
    }
}

/// `ε_min + (ε_max − ε_min)·exp(−β·L)`.
pub fn epsilon(cfg: &DdqnConfig, load: f64) -> f64 {
    cfg.eps_min + (cfg.eps_max - cfg.eps_min) * (-cfg.beta * load).exp()
}

/// `η_base·(1 + α_lr·L)`.
pub fn learning_rate(cfg: &DdqnConfig, load: f64) -> f64 {
    cfg.eta_base * (1.0 + cfg.alpha_lr * load)
}

/// `[S, ΔS, clip(S + ΔS, 0, 1)]` with `ΔS = S − S_prev` (zero without a
/// previous state).
pub fn temporal_augment(prev: Option<&[f64]>, current: &[f64]) -> Vec<f64> {
    let n = current.len();
    let mut out = Vec::with_capacity(3 * n);
    out.extend_from_slice(current);
    let delta: Vec<f64> = match prev {
        Some(p) if p.len() == n => current.iter().zip(p).map(|(c, p)| c - p).collect(),
        _ => vec![0.0; n],
    };
    out.extend(current.iter().zip(&delta).map(|(_, d)| *d));
    out.extend(current.iter().zip(&delta).map(|(c, d)| (c + d).clamp(0.0, 1.0)));
    out
}

/// Greedy choice among allowed actions; ties go to the lowest index.
pub fn masked_argmax(q: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in q.iter().enumerate() {
        if !mask.get(i).copied().unwrap_or(true) {
            continue;
        }
        match best {
            Some(b) if q[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub action: usize,
    /// No action was allowed; local was chosen by default.
    pub fail_risk: bool,
    pub explored: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum DdqnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("non-finite loss, step rejected")]
    NonFiniteLoss,
}

#[derive(Debug, Clone)]
pub struct DdqnAgent {
    pub cfg: DdqnConfig,
    pub online: Mlp,
    pub target: Mlp,
    opt: Adam,
    pub buffer: ReplayBuffer,
    steps: u64,
    n_actions: usize,
}

impl DdqnAgent {
    pub fn new<R: Rng + ?Sized>(
        cfg: DdqnConfig,
        n_actions: usize,
        sampling: SamplingMode,
        rng: &mut R,
    ) -> Result<Self, DdqnError> {
        Self::with_state_len(cfg.state_len(), cfg, n_actions, sampling, rng)
    }

    /// Agent over an arbitrary state width (used by small fixtures).
    pub fn with_state_len<R: Rng + ?Sized>(
        state_len: usize,
        cfg: DdqnConfig,
        n_actions: usize,
        sampling: SamplingMode,
        rng: &mut R,
    ) -> Result<Self, DdqnError> {
        let mut sizes = vec![state_len];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(n_actions);
        let online = Mlp::new(&sizes, OutputActivation::Identity, rng);
        let buffer = ReplayBuffer::new(cfg.buffer, cfg.gamma_fail, sampling)?;
        Ok(Self {
            opt: Adam::new(&online, cfg.eta_base),
            target: online.clone(),
            online,
            buffer,
            steps: 0,
            n_actions,
            cfg,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn q_values(&self, state: &[f64]) -> Result<Vec<f64>, DdqnError> {
        Ok(self.online.forward(state)?)
    }

    /// ε-greedy over the allowed actions. Without any allowed action the
    /// local action (0) is returned and flagged.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        mask: &[bool],
        load: f64,
        explore: bool,
        rng: &mut R,
    ) -> Result<Decision, DdqnError> {
        let allowed: Vec<usize> = (0..self.n_actions).filter(|&i| mask.get(i).copied().unwrap_or(false)).collect();
        if allowed.is_empty() {
            return Ok(Decision {
                action: 0,
                fail_risk: true,
                explored: false,
            });
        }
        if allowed.len() == 1 {
            return Ok(Decision {
                action: allowed[0],
                fail_risk: false,
                explored: false,
            });
        }
        if explore && rng.random::<f64>() < epsilon(&self.cfg, load.clamp(0.0, 1.0)) {
            return Ok(Decision {
                action: *allowed.choose(rng).expect("non-empty"),
                fail_risk: false,
                explored: true,
            });
        }
        let q = self.q_values(state)?;
        Ok(Decision {
            action: masked_argmax(&q, mask).expect("allowed is non-empty"),
            fail_risk: false,
            explored: false,
        })
    }

    /// Double-Q targets: the online net picks `a'` (within the stored next
    /// mask), the target net scores it.
    pub fn ddqn_target(&self, batch: &[&Experience]) -> Result<Vec<f64>, DdqnError> {
        let width = self.online.input_len();
        let next = stack_rows(batch.iter().map(|e| e.next_state.as_slice()), width);
        let q_online = self.online.predict(&next)?;
        let q_target = self.target.predict(&next)?;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.terminal {
                    return e.reward;
                }
                let row: Vec<f64> = q_online.row(i).to_vec();
                let a = masked_argmax(&row, &e.next_mask).unwrap_or(0);
                e.reward + self.cfg.discount * q_target[[i, a]]
            })
            .collect())
    }

    fn action_of(e: &Experience) -> usize {
        match e.action {
            Action::Discrete(a) => a,
            Action::Continuous(_) => 0,
        }
    }

    pub fn td_error(&self, exp: &Experience) -> Result<f64, DdqnError> {
        let y = self.ddqn_target(&[exp])?[0];
        let q = self.online.forward(&exp.state)?;
        Ok((q[Self::action_of(exp)] - y).abs())
    }

    pub fn push(&mut self, exp: Experience) -> Result<(), DdqnError> {
        let td = self.td_error(&exp)?;
        self.buffer.push(exp, Some(td))?;
        Ok(())
    }

    /// One regression step toward double-Q targets at step size
    /// `learning_rate(L)`; `None` until the buffer holds a full batch.
    pub fn train_step<R: Rng + ?Sized>(&mut self, load: f64, rng: &mut R) -> Result<Option<f64>, DdqnError> {
        if self.buffer.len() < self.cfg.batch {
            return Ok(None);
        }
        let sample = self.buffer.sample(self.cfg.batch, rng)?;
        let indices: Vec<usize> = sample.iter().map(|(i, _)| *i).collect();
        let batch: Vec<Experience> = sample.into_iter().map(|(_, e)| e.clone()).collect();
        let refs: Vec<&Experience> = batch.iter().collect();
        let (loss, td) = self.train_on(&refs, load)?;
        self.buffer.update_priorities(&indices, &td);
        Ok(Some(loss))
    }

    /// Trains on an explicit batch; returns the loss and per-sample |TD|.
    pub fn train_on(&mut self, batch: &[&Experience], load: f64) -> Result<(f64, Vec<f64>), DdqnError> {
        let targets = self.ddqn_target(batch)?;
        let width = self.online.input_len();
        let states = stack_rows(batch.iter().map(|e| e.state.as_slice()), width);
        let cache = self.online.forward_cached(&states)?;
        let q = cache.output();
        let n = batch.len() as f64;
        let mut up = Array2::zeros(q.dim());
        let mut loss = 0.0;
        let mut td = Vec::with_capacity(batch.len());
        for (i, e) in batch.iter().enumerate() {
            let a = Self::action_of(e);
            let err = q[[i, a]] - targets[i];
            loss += err * err / n;
            up[[i, a]] = 2.0 * err / n;
            td.push(err.abs());
        }
        if !loss.is_finite() {
            return Err(DdqnError::NonFiniteLoss);
        }
        let (grads, _) = self.online.backward(&cache, &up)?;
        self.opt.lr = learning_rate(&self.cfg, load.clamp(0.0, 1.0));
        self.opt.step(&mut self.online, &grads)?;
        self.steps += 1;
        if self.cfg.hard_update > 0 && self.steps % self.cfg.hard_update == 0 {
            self.target.copy_from(&self.online)?;
        }
        Ok((loss, td))
    }
}
