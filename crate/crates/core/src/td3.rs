//! Continuous (CPU frequency, transmit power) control with twin critics,
//! target smoothing, delayed actor updates and load-adaptive exploration.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{stack_rows, Adam, Mlp, NnError, OutputActivation};
use crate::replay::{Action, Experience, ReplayBuffer, ReplayError, SamplingMode};

pub const STATE_LEN: usize = 8;
pub const ACTION_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub discount: f64,
    /// Polyak coefficient for target networks.
    pub tau: f64,
    pub policy_delay: u64,
    pub sigma_base: f64,
    /// Load sensitivity of the exploration noise.
    pub noise_alpha: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub batch: usize,
    pub buffer: usize,
    pub gamma_fail: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            discount: 0.99,
            tau: 0.001,
            policy_delay: 2,
            sigma_base: 0.1,
            noise_alpha: 0.5,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            batch: 256,
            buffer: 5000,
            gamma_fail: 1.5,
        }
    }
}

/// Physical power-control action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerAction {
    pub f_hz: f64,
    pub p_w: f64,
}

/// Maps a normalized action in `[-1, 1]²` onto `[0, f_max] × [0, p_max]`.
pub fn scale_action(normalized: [f64; 2], f_max: f64, p_max: f64) -> PowerAction {
    let u = |a: f64| (a.clamp(-1.0, 1.0) + 1.0) * 0.5;
    PowerAction {
        f_hz: u(normalized[0]) * f_max,
        p_w: u(normalized[1]) * p_max,
    }
}

/// `σ_base·(1 + α·L)`.
pub fn exploration_sigma(sigma_base: f64, alpha: f64, load: f64) -> f64 {
    sigma_base * (1.0 + alpha * load)
}

#[derive(Debug, thiserror::Error)]
pub enum Td3Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("non-finite loss, step rejected")]
    NonFiniteLoss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Td3Losses {
    pub critic1: f64,
    pub critic2: f64,
    /// Present on calls that updated the actor.
    pub actor: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Td3Agent {
    pub cfg: Td3Config,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub critic1_target: Mlp,
    pub critic2_target: Mlp,
    actor_opt: Adam,
    critic1_opt: Adam,
    critic2_opt: Adam,
    pub buffer: ReplayBuffer,
    train_calls: u64,
    actor_updates: u64,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

fn critic_input(states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(ndarray::Axis(1), &[states.view(), actions.view()]).expect("same batch")
}

/// One mean-squared-error regression step of `net` toward `targets`.
/// Returns the loss and the pre-update predictions.
pub fn critic_regress(
    net: &mut Mlp,
    opt: &mut Adam,
    inputs: &Array2<f64>,
    targets: &[f64],
) -> Result<(f64, Vec<f64>), Td3Error> {
    let cache = net.forward_cached(inputs)?;
    let pred: Vec<f64> = cache.output().column(0).to_vec();
    let n = targets.len() as f64;
    let loss = pred.iter().zip(targets).map(|(q, y)| (q - y).powi(2)).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Td3Error::NonFiniteLoss);
    }
    let up = Array2::from_shape_fn((targets.len(), 1), |(i, _)| 2.0 * (pred[i] - targets[i]) / n);
    let (grads, _) = net.backward(&cache, &up)?;
    opt.step(net, &grads)?;
    Ok((loss, pred))
}

impl Td3Agent {
    pub fn new<R: Rng + ?Sized>(cfg: Td3Config, rng: &mut R) -> Result<Self, Td3Error> {
        let actor = Mlp::new(&sizes(STATE_LEN, &cfg.hidden, ACTION_LEN), OutputActivation::Tanh, rng);
        let critic_sizes = sizes(STATE_LEN + ACTION_LEN, &cfg.hidden, 1);
        let critic1 = Mlp::new(&critic_sizes, OutputActivation::Identity, rng);
        let critic2 = Mlp::new(&critic_sizes, OutputActivation::Identity, rng);
        let buffer = ReplayBuffer::new(cfg.buffer, cfg.gamma_fail, SamplingMode::Prioritized)?;
        Ok(Self {
            actor_opt: Adam::new(&actor, cfg.actor_lr),
            critic1_opt: Adam::new(&critic1, cfg.critic_lr),
            critic2_opt: Adam::new(&critic2, cfg.critic_lr),
            actor_target: actor.clone(),
            critic1_target: critic1.clone(),
            critic2_target: critic2.clone(),
            actor,
            critic1,
            critic2,
            buffer,
            train_calls: 0,
            actor_updates: 0,
            cfg,
        })
    }

    pub fn train_calls(&self) -> u64 {
        self.train_calls
    }

    pub fn actor_updates(&self) -> u64 {
        self.actor_updates
    }

    /// Normalized action in `[-1, 1]²`. With exploration, Gaussian noise of
    /// scale `σ_base(1 + αL)` is added before clipping.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        load: f64,
        explore: bool,
        rng: &mut R,
    ) -> Result<[f64; 2], Td3Error> {
        let out = self.actor.forward(state)?;
        let mut a = [out[0], out[1]];
        if explore {
            let sigma = exploration_sigma(self.cfg.sigma_base, self.cfg.noise_alpha, load.clamp(0.0, 1.0));
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                for v in &mut a {
                    *v += normal.sample(rng);
                }
            }
        }
        Ok(a.map(|v| v.clamp(-1.0, 1.0)))
    }

    /// Conservative bootstrap targets
    /// `r + γ(1 − done)·min(Q1'(s', ã), Q2'(s', ã))` with a smoothed target
    /// action `ã = clip(μ'(s') + clip(ε, ±c), −1, 1)`.
    pub fn td3_target<R: Rng + ?Sized>(&self, batch: &[&Experience], rng: &mut R) -> Result<Vec<f64>, Td3Error> {
        let next = stack_rows(batch.iter().map(|e| e.next_state.as_slice()), STATE_LEN);
        let mut a = self.actor_target.predict(&next)?;
        if self.cfg.target_noise > 0.0 {
            let normal = Normal::new(0.0, self.cfg.target_noise).expect("positive");
            let c = self.cfg.target_noise_clip;
            a.mapv_inplace(|v| (v + normal.sample(rng).clamp(-c, c)).clamp(-1.0, 1.0));
        }
        let x = critic_input(&next, &a);
        let q1 = self.critic1_target.predict(&x)?;
        let q2 = self.critic2_target.predict(&x)?;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let cont = if e.terminal { 0.0 } else { 1.0 };
                e.reward + self.cfg.discount * cont * q1[[i, 0]].min(q2[[i, 0]])
            })
            .collect())
    }

    /// |TD| of one experience under critic 1 without target smoothing.
    pub fn td_error(&self, exp: &Experience) -> Result<f64, Td3Error> {
        let a = match &exp.action {
            Action::Continuous(a) => a.clone(),
            Action::Discrete(_) => return Ok(0.0),
        };
        let mut next_in = exp.next_state.clone();
        next_in.extend(self.actor_target.forward(&exp.next_state)?);
        let q1n = self.critic1_target.forward(&next_in)?[0];
        let q2n = self.critic2_target.forward(&next_in)?[0];
        let cont = if exp.terminal { 0.0 } else { 1.0 };
        let y = exp.reward + self.cfg.discount * cont * q1n.min(q2n);
        let mut x = exp.state.clone();
        x.extend(a);
        Ok((self.critic1.forward(&x)?[0] - y).abs())
    }

    pub fn push(&mut self, exp: Experience) -> Result<(), Td3Error> {
        let td = self.td_error(&exp)?;
        self.buffer.push(exp, Some(td))?;
        Ok(())
    }

    /// One training call on a sampled batch; `None` until the buffer holds a
    /// full batch.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<Td3Losses>, Td3Error> {
        if self.buffer.len() < self.cfg.batch {
            return Ok(None);
        }
        let sample = self.buffer.sample(self.cfg.batch, rng)?;
        let indices: Vec<usize> = sample.iter().map(|(i, _)| *i).collect();
        let batch: Vec<Experience> = sample.into_iter().map(|(_, e)| e.clone()).collect();
        let refs: Vec<&Experience> = batch.iter().collect();
        let (losses, td) = self.train_on(&refs, rng)?;
        self.buffer.update_priorities(&indices, &td);
        Ok(Some(losses))
    }

    /// Trains on an explicit batch. Returns the losses and critic-1 |TD|.
    pub fn train_on<R: Rng + ?Sized>(
        &mut self,
        batch: &[&Experience],
        rng: &mut R,
    ) -> Result<(Td3Losses, Vec<f64>), Td3Error> {
        let n = batch.len();
        let states = stack_rows(batch.iter().map(|e| e.state.as_slice()), STATE_LEN);
        let mut actions = Array2::zeros((n, ACTION_LEN));
        for (i, e) in batch.iter().enumerate() {
            if let Action::Continuous(a) = &e.action {
                actions[[i, 0]] = a[0];
                actions[[i, 1]] = a[1];
            }
        }
        let targets = self.td3_target(batch, rng)?;
        let x = critic_input(&states, &actions);

        // validate both critics before mutating either
        let mut c1 = self.critic1.clone();
        let mut o1 = self.critic1_opt.clone();
        let (l1, pred1) = critic_regress(&mut c1, &mut o1, &x, &targets)?;
        let mut c2 = self.critic2.clone();
        let mut o2 = self.critic2_opt.clone();
        let (l2, _) = critic_regress(&mut c2, &mut o2, &x, &targets)?;
        self.critic1 = c1;
        self.critic1_opt = o1;
        self.critic2 = c2;
        self.critic2_opt = o2;
        self.train_calls += 1;

        let mut actor_loss = None;
        if self.cfg.policy_delay > 0 && self.train_calls % self.cfg.policy_delay == 0 {
            let cache = self.actor.forward_cached(&states)?;
            let mu = cache.output().clone();
            let cx = critic_input(&states, &mu);
            let ccache = self.critic1.forward_cached(&cx)?;
            let q = ccache.output().column(0).to_owned();
            let loss = -q.mean().unwrap_or(0.0);
            if !loss.is_finite() {
                return Err(Td3Error::NonFiniteLoss);
            }
            let up = Array2::from_elem((n, 1), -1.0 / n as f64);
            let (_, dx) = self.critic1.backward(&ccache, &up)?;
            let da = dx.slice(s![.., STATE_LEN..]).to_owned();
            let (grads, _) = self.actor.backward(&cache, &da)?;
            self.actor_opt.step(&mut self.actor, &grads)?;
            self.actor_updates += 1;
            actor_loss = Some(loss);
            let tau = self.cfg.tau;
            self.actor_target.polyak_from(&self.actor, tau)?;
            self.critic1_target.polyak_from(&self.critic1, tau)?;
            self.critic2_target.polyak_from(&self.critic2, tau)?;
        }
        let td: Vec<f64> = pred1.iter().zip(&targets).map(|(q, y)| (q - y).abs()).collect();
        Ok((
            Td3Losses {
                critic1: l1,
                critic2: l2,
                actor: actor_loss,
            },
            td,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use ndarray::{Array1, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> Td3Config {
        Td3Config {
            hidden: vec![16, 16],
            batch: 8,
            buffer: 64,
            ..Td3Config::default()
        }
    }

    fn exp(rng: &mut ChaCha8Rng, terminal: bool) -> Experience {
        Experience {
            state: (0..STATE_LEN).map(|_| rng.random::<f64>()).collect(),
            action: Action::Continuous(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
            reward: rng.random_range(-1.0..1.0),
            next_state: (0..STATE_LEN).map(|_| rng.random::<f64>()).collect(),
            terminal,
            fail: false,
            next_mask: Vec::new(),
        }
    }

    /// A critic whose output ignores its input: zero weights, constant bias.
    fn constant_critic(value: f64) -> Mlp {
        Mlp::from_layers(
            vec![Dense {
                weights: Array2::zeros((STATE_LEN + ACTION_LEN, 1)),
                bias: Array1::from_elem(1, value),
            }],
            OutputActivation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn scaling_boundaries_and_sigma() {
        assert_eq!(scale_action([-1.0, -1.0], 3e9, 2.5), PowerAction { f_hz: 0.0, p_w: 0.0 });
        assert_eq!(scale_action([1.0, 1.0], 3e9, 2.5), PowerAction { f_hz: 3e9, p_w: 2.5 });
        assert!((exploration_sigma(0.1, 0.5, 1.0) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn greedy_action_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let agent = Td3Agent::new(small_cfg(), &mut rng).unwrap();
        let s = vec![0.5; STATE_LEN];
        let a = agent.act(&s, 0.3, false, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = agent.act(&s, 0.3, false, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn twin_minimum_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agent = Td3Agent::new(Td3Config { discount: 0.99, ..small_cfg() }, &mut rng).unwrap();
        agent.critic1_target = constant_critic(1.0);
        agent.critic2_target = constant_critic(0.8);
        let mut e = exp(&mut rng, false);
        e.reward = 0.0;
        let y = agent.td3_target(&[&e], &mut rng).unwrap();
        assert!((y[0] - 0.792).abs() < 1e-12);
        e.terminal = true;
        e.reward = 0.3;
        assert_eq!(agent.td3_target(&[&e], &mut rng).unwrap()[0], 0.3);
    }

    #[test]
    fn twin_minimum_matches_enumeration_and_bounds_single_critics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agent = Td3Agent::new(
            Td3Config {
                target_noise: 0.0,
                ..small_cfg()
            },
            &mut rng,
        )
        .unwrap();
        for _ in 0..50 {
            let e = exp(&mut rng, false);
            let y = agent.td3_target(&[&e], &mut rng).unwrap()[0];
            let mut x = e.next_state.clone();
            x.extend(agent.actor_target.forward(&e.next_state).unwrap());
            let q1 = agent.critic1_target.forward(&x).unwrap()[0];
            let q2 = agent.critic2_target.forward(&x).unwrap()[0];
            let via1 = e.reward + 0.99 * q1;
            let via2 = e.reward + 0.99 * q2;
            assert_eq!(y, e.reward + 0.99 * q1.min(q2));
            assert!(y <= via1 && y <= via2);
        }
    }

    #[test]
    fn zero_smoothing_uses_exact_target_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let agent = Td3Agent::new(Td3Config { target_noise: 0.0, ..small_cfg() }, &mut rng).unwrap();
        let e = exp(&mut rng, false);
        let a = agent.td3_target(&[&e], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = agent.td3_target(&[&e], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn actor_updates_are_delayed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut agent = Td3Agent::new(small_cfg(), &mut rng).unwrap();
        for _ in 0..32 {
            let e = exp(&mut rng, false);
            agent.push(e).unwrap();
        }
        let mut before = agent.actor.params_flat();
        for n in 1..=9u64 {
            let l = agent.train_step(&mut rng).unwrap().unwrap();
            let after = agent.actor.params_flat();
            if n % 2 == 1 {
                assert_eq!(after, before, "actor moved on call {n}");
                assert!(l.actor.is_none());
            } else {
                assert_ne!(after, before);
                assert!(l.actor.is_some());
            }
            before = after;
            assert_eq!(agent.actor_updates(), n / 2);
        }
    }

    #[test]
    fn train_waits_for_a_full_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut agent = Td3Agent::new(small_cfg(), &mut rng).unwrap();
        agent.push(exp(&mut rng, false)).unwrap();
        assert!(agent.train_step(&mut rng).unwrap().is_none());
    }

    #[test]
    fn fitted_critic_has_zero_loss() {
        let mut net = constant_critic(0.5);
        let mut opt = Adam::new(&net, 0.1);
        let x = Array2::from_elem((4, STATE_LEN + ACTION_LEN), 0.2);
        let (loss, _) = critic_regress(&mut net, &mut opt, &x, &[0.5; 4]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net.layers()[0].bias[0], 0.5);
    }

    #[test]
    fn one_parameter_critic_moves_toward_least_squares() {
        // q(x) = w·x with targets y = 2x; the least-squares optimum is w = 2
        let mut net = Mlp::from_layers(
            vec![Dense {
                weights: Array2::from_elem((1, 1), 0.5),
                bias: Array1::zeros(1),
            }],
            OutputActivation::Identity,
        )
        .unwrap();
        let xs = [1.0, 2.0, 3.0];
        let x = Array2::from_shape_vec((3, 1), xs.to_vec()).unwrap();
        let ys: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
        // dL/dw = (2/n)·Σ (w·x − y)·x = (2/3)·(−1.5)·14 = −14
        let grad: f64 = xs.iter().zip(&ys).map(|(x, y)| 2.0 * (0.5 * x - y) * x / 3.0).sum();
        assert!((grad + 14.0).abs() < 1e-12);
        let mut opt = Adam::new(&net, 0.01);
        let (loss, _) = critic_regress(&mut net, &mut opt, &x, &ys).unwrap();
        assert!((loss - 1.5f64.powi(2) * 14.0 / 3.0).abs() < 1e-12);
        let w = net.layers()[0].weights[[0, 0]];
        assert!((w - (0.5 + 0.01)).abs() < 1e-9, "{w}");
    }

    #[test]
    fn actions_stay_within_caps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let agent = Td3Agent::new(Td3Config { sigma_base: 5.0, hidden: vec![4], ..small_cfg() }, &mut rng).unwrap();
        for i in 0..1_000_000u32 {
            let s: Vec<f64> = (0..STATE_LEN).map(|_| rng.random::<f64>()).collect();
            let load = (i % 11) as f64 / 10.0;
            let a = agent.act(&s, load, true, &mut rng).unwrap();
            let p = scale_action(a, 2.5e9, 2.2);
            assert!(p.f_hz >= 0.0 && p.f_hz <= 2.5e9 && p.p_w >= 0.0 && p.p_w <= 2.2);
        }
    }

    #[test]
    fn shared_policy_is_scale_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let agent = Td3Agent::new(small_cfg(), &mut rng).unwrap();
        let s = vec![0.4; STATE_LEN];
        let a = agent.act(&s, 0.0, false, &mut rng).unwrap();
        let d1 = scale_action(a, 2e9, 2.0);
        let d2 = scale_action(a, 3e9, 3.0);
        assert!((d1.f_hz / 2e9 - d2.f_hz / 3e9).abs() < 1e-15);
        assert!((d1.p_w / 2.0 - d2.p_w / 3.0).abs() < 1e-15);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let mut agent = Td3Agent::new(small_cfg(), &mut rng).unwrap();
            for _ in 0..20 {
                let e = exp(&mut rng, false);
                agent.push(e).unwrap();
            }
            for _ in 0..5 {
                agent.train_step(&mut rng).unwrap();
            }
            agent.actor.params_flat()
        };
        assert_eq!(run(), run());
    }
}
