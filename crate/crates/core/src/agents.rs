//! Off-policy learners: dueling double DQN for discrete actions and DDPG for
//! continuous ones. Both consume weighted minibatches and report absolute TD
//! residuals for priority feedback.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{
    clip_global_norm, hard_update, rows_to_matrix, soft_update, Activation, AdamState, ByteReader, DenseNet, ForwardCache,
    GradientTape,
};
use crate::replay::Batch;
use crate::space::{Action, ActionSpace};

/// `Q_a = V + A_a − mean(A)`.
pub fn dueling_aggregate(v: f64, a: &[f64]) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty advantage vector".into()));
    }
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    Ok(a.iter().map(|x| v + x - mean).collect())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Linear decay from `start` to `end` over `decay_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 {
            return self.end;
        }
        if step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// What one learning step reports.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnStats {
    /// `|target − Q(s, a)|` per sample, before importance weighting.
    pub td_abs: Vec<f64>,
    pub loss: f64,
    pub mean_q: f64,
}

// Dueling network

/// Shared trunk feeding a scalar value head and a per-action advantage head.
#[derive(Debug, Clone, PartialEq)]
pub struct DuelingNet {
    pub trunk: DenseNet,
    pub value: DenseNet,
    pub advantage: DenseNet,
}

#[derive(Debug, Clone)]
pub struct DuelingCache {
    trunk: ForwardCache,
    value: ForwardCache,
    advantage: ForwardCache,
}

#[derive(Debug, Clone)]
pub struct DuelingTape {
    pub trunk: GradientTape,
    pub value: GradientTape,
    pub advantage: GradientTape,
}

impl DuelingTape {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.trunk.flat();
        v.extend(self.value.flat());
        v.extend(self.advantage.flat());
        v
    }

    fn is_finite(&self) -> bool {
        self.trunk.is_finite() && self.value.is_finite() && self.advantage.is_finite()
    }
}

impl DuelingNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        activation: Activation,
        actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Config("dueling network needs at least one hidden layer".into()));
        }
        if actions == 0 {
            return Err(Error::Config("dueling network needs at least one action".into()));
        }
        let mut dims = vec![obs_dim];
        dims.extend(hidden);
        let h = *hidden.last().expect("non-empty");
        Ok(DuelingNet {
            trunk: DenseNet::new(&dims, activation, activation, rng)?,
            value: DenseNet::new(&[h, 1], Activation::Identity, Activation::Identity, rng)?,
            advantage: DenseNet::new(&[h, actions], Activation::Identity, Activation::Identity, rng)?,
        })
    }

    pub fn actions(&self) -> usize {
        self.advantage.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    pub fn q_values(&self, s: &[f64]) -> Result<Vec<f64>> {
        let h = self.trunk.forward(s)?;
        let v = self.value.forward(&h)?[0];
        dueling_aggregate(v, &self.advantage.forward(&h)?)
    }

    pub fn q_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let h = self.trunk.forward_batch(x)?;
        let v = self.value.forward_batch(h.view())?;
        let a = self.advantage.forward_batch(h.view())?;
        Ok(aggregate_rows(&v, &a))
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, DuelingCache)> {
        let (h, trunk) = self.trunk.forward_cached(x)?;
        let (v, value) = self.value.forward_cached(h.view())?;
        let (a, advantage) = self.advantage.forward_cached(h.view())?;
        Ok((aggregate_rows(&v, &a), DuelingCache { trunk, value, advantage }))
    }

    pub fn backward(&self, cache: &DuelingCache, grad_q: ArrayView2<f64>) -> Result<DuelingTape> {
        let k = self.actions() as f64;
        let gv = grad_q.sum_axis(Axis(1)).insert_axis(Axis(1));
        let mean = grad_q.sum_axis(Axis(1)).insert_axis(Axis(1)) / k;
        let ga = &grad_q - &mean;
        let (value, hv) = self.value.backward(&cache.value, gv.view())?;
        let (advantage, ha) = self.advantage.backward(&cache.advantage, ga.view())?;
        let (trunk, _) = self.trunk.backward(&cache.trunk, (hv + ha).view())?;
        Ok(DuelingTape { trunk, value, advantage })
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.trunk.params();
        p.extend(self.value.params());
        p.extend(self.advantage.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        let (nt, nv) = (self.trunk.param_count(), self.value.param_count());
        let total = nt + nv + self.advantage.param_count();
        if p.len() != total {
            return Err(shape_err("dueling parameter vector", total, p.len()));
        }
        self.trunk.set_params(&p[..nt])?;
        self.value.set_params(&p[nt..nt + nv])?;
        self.advantage.set_params(&p[nt + nv..])
    }

    pub fn copy_from(&mut self, other: &DuelingNet) -> Result<()> {
        hard_update(&other.trunk, &mut self.trunk)?;
        hard_update(&other.value, &mut self.value)?;
        hard_update(&other.advantage, &mut self.advantage)
    }

    pub fn to_snapshot(&self) -> Vec<u8> {
        snapshot_nets(&[&self.trunk, &self.value, &self.advantage])
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self> {
        let mut nets = restore_nets(bytes, 3)?;
        let advantage = nets.pop().expect("three nets");
        let value = nets.pop().expect("three nets");
        let trunk = nets.pop().expect("three nets");
        if trunk.output_dim() != value.input_dim() || trunk.output_dim() != advantage.input_dim() || value.output_dim() != 1 {
            return Err(Error::Snapshot("dueling heads do not fit the trunk".into()));
        }
        Ok(DuelingNet { trunk, value, advantage })
    }
}

fn aggregate_rows(v: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let mean = a.mean_axis(Axis(1)).expect("non-empty advantages").insert_axis(Axis(1));
    a - &mean + v
}

fn snapshot_nets(nets: &[&DenseNet]) -> Vec<u8> {
    let mut buf = Vec::new();
    for net in nets {
        let snap = net.to_snapshot();
        buf.extend_from_slice(&(snap.len() as u64).to_le_bytes());
        buf.extend_from_slice(&snap);
    }
    buf
}

fn restore_nets(bytes: &[u8], n: usize) -> Result<Vec<DenseNet>> {
    let mut r = ByteReader { bytes, pos: 0 };
    let mut nets = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u64()? as usize;
        let (net, used) = DenseNet::from_snapshot(r.take(len)?)?;
        if used != len {
            return Err(Error::Snapshot("trailing bytes in network snapshot".into()));
        }
        nets.push(net);
    }
    if r.pos != bytes.len() {
        return Err(Error::Snapshot("trailing bytes after agent snapshot".into()));
    }
    Ok(nets)
}

fn stack_states(batch: &Batch, next: bool, width: usize) -> Result<Array2<f64>> {
    let rows: Vec<&[f64]> = batch.transitions.iter().map(|t| if next { t.s_next.as_slice() } else { t.s.as_slice() }).collect();
    rows_to_matrix(&rows, width)
}

// DQN

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    /// Learning steps between hard target updates.
    pub target_update: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Share of the expected environment steps over which ε decays.
    pub eps_fraction: f64,
    pub clip_norm: f64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            hidden: vec![128, 128],
            activation: Activation::Relu,
            lr: 1e-3,
            gamma: 0.99,
            batch_size: 128,
            target_update: 100,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.3,
            clip_norm: 10.0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.target_update == 0 {
            return Err(Error::Config("lr, batch_size and target_update must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return Err(Error::Config("ε endpoints must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Double-DQN target: `r` when terminal, else `r + γ·Q_target(s', argmax_a Q_online(s', a))`.
pub fn dqn_td_target(r: f64, s_next: &[f64], done: bool, online: &DuelingNet, target: &DuelingNet, gamma: f64) -> Result<f64> {
    if done {
        return Ok(r);
    }
    let a = argmax(&online.q_values(s_next)?);
    Ok(r + gamma * target.q_values(s_next)?[a])
}

#[derive(Debug, Clone)]
struct DuelingOptimizer {
    trunk: AdamState,
    value: AdamState,
    advantage: AdamState,
    clip_norm: f64,
}

impl DuelingOptimizer {
    fn new(net: &DuelingNet, lr: f64, clip_norm: f64) -> Self {
        DuelingOptimizer {
            trunk: AdamState::new(&net.trunk, lr).without_clipping(),
            value: AdamState::new(&net.value, lr).without_clipping(),
            advantage: AdamState::new(&net.advantage, lr).without_clipping(),
            clip_norm,
        }
    }

    fn step(&mut self, net: &mut DuelingNet, mut tape: DuelingTape) -> Result<()> {
        clip_global_norm(&mut [&mut tape.trunk, &mut tape.value, &mut tape.advantage], self.clip_norm);
        self.trunk.step(&mut net.trunk, &tape.trunk)?;
        self.value.step(&mut net.value, &tape.value)?;
        self.advantage.step(&mut net.advantage, &tape.advantage)
    }
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    cfg: DqnConfig,
    online: DuelingNet,
    target: DuelingNet,
    opt: DuelingOptimizer,
    schedule: EpsilonSchedule,
    learn_steps: u64,
    env_steps: u64,
}

/// Loss, gradient and residuals for one batch, with targets held fixed.
#[derive(Debug, Clone)]
pub struct DqnGradients {
    pub loss: f64,
    pub tape: DuelingTape,
    pub td: Vec<f64>,
    pub mean_q: f64,
}

impl DqnAgent {
    /// `expected_steps` sizes the ε decay window.
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, actions: usize, cfg: DqnConfig, expected_steps: u64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let online = DuelingNet::new(obs_dim, &cfg.hidden, cfg.activation, actions, rng)?;
        let target = online.clone();
        let opt = DuelingOptimizer::new(&online, cfg.lr, cfg.clip_norm);
        let schedule = EpsilonSchedule {
            start: cfg.eps_start,
            end: cfg.eps_end,
            decay_steps: (cfg.eps_fraction * expected_steps as f64).round() as u64,
        };
        Ok(DqnAgent { cfg, online, target, opt, schedule, learn_steps: 0, env_steps: 0 })
    }

    pub fn config(&self) -> &DqnConfig {
        &self.cfg
    }

    pub fn online(&self) -> &DuelingNet {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut DuelingNet {
        &mut self.online
    }

    pub fn target(&self) -> &DuelingNet {
        &self.target
    }

    pub fn target_mut(&mut self) -> &mut DuelingNet {
        &mut self.target
    }

    pub fn learn_steps(&self) -> u64 {
        self.learn_steps
    }

    pub fn epsilon(&self) -> f64 {
        self.schedule.value(self.env_steps)
    }

    pub fn set_schedule(&mut self, schedule: EpsilonSchedule) {
        self.schedule = schedule;
    }

    /// ε-greedy when exploring, greedy otherwise. Exploring calls advance the ε schedule.
    pub fn act<R: Rng + ?Sized>(&mut self, s: &[f64], explore: bool, rng: &mut R) -> Result<Action> {
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite state".into()));
        }
        if explore {
            let eps = self.epsilon();
            self.env_steps += 1;
            if rng.random::<f64>() < eps {
                return Ok(Action::Discrete(rng.random_range(0..self.online.actions())));
            }
        }
        Ok(Action::Discrete(argmax(&self.online.q_values(s)?)))
    }

    /// Weighted squared-TD loss `(1/B) Σ wᵢ (Q(sᵢ, aᵢ) − yᵢ)²` and its gradient.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<DqnGradients> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty learning batch".into()));
        }
        let n = self.online.input_dim();
        let k = self.online.actions();
        let b = batch.len();
        let s = stack_states(batch, false, n)?;
        let s_next = stack_states(batch, true, n)?;
        let q_next_online = self.online.q_batch(s_next.view())?;
        let q_next_target = self.target.q_batch(s_next.view())?;
        let (q, cache) = self.online.forward_cached(s.view())?;
        let mut grad = Array2::zeros((b, k));
        let mut td = Vec::with_capacity(b);
        let mut loss = 0.0;
        let mut mean_q = 0.0;
        for (i, t) in batch.transitions.iter().enumerate() {
            let a = t.a.index().filter(|a| *a < k).ok_or_else(|| Error::InvalidArgument(format!("{:?} is not a valid action", t.a)))?;
            let y = if t.done {
                t.r
            } else {
                let row = q_next_online.row(i);
                let best = argmax(row.as_slice().expect("contiguous row"));
                t.r + self.cfg.gamma * q_next_target[[i, best]]
            };
            let delta = y - q[[i, a]];
            let w = batch.weights[i];
            loss += w * delta * delta / b as f64;
            grad[[i, a]] = -2.0 * w * delta / b as f64;
            mean_q += q[[i, a]] / b as f64;
            td.push(delta);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite TD loss".into()));
        }
        let tape = self.online.backward(&cache, grad.view())?;
        Ok(DqnGradients { loss, tape, td, mean_q })
    }

    pub fn learn_step(&mut self, batch: &Batch) -> Result<LearnStats> {
        let g = self.loss_and_grads(batch)?;
        if !g.tape.is_finite() {
            return Err(Error::Numeric("non-finite TD gradient".into()));
        }
        self.opt.step(&mut self.online, g.tape)?;
        self.learn_steps += 1;
        if self.learn_steps % self.cfg.target_update == 0 {
            self.target.copy_from(&self.online)?;
        }
        Ok(LearnStats { td_abs: g.td.iter().map(|d| d.abs()).collect(), loss: g.loss, mean_q: g.mean_q })
    }

    pub fn to_snapshot(&self) -> Vec<u8> {
        self.online.to_snapshot()
    }
}

// DDPG

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Exploration noise standard deviation, in action units.
    pub sigma: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        DdpgConfig {
            hidden: vec![128, 128],
            activation: Activation::Relu,
            actor_lr: 2e-4,
            critic_lr: 2e-4,
            gamma: 0.98,
            tau: 0.005,
            sigma: 0.01,
            batch_size: 128,
            clip_norm: 10.0,
        }
    }
}

impl DdpgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) || self.batch_size == 0 || !(self.sigma >= 0.0) {
            return Err(Error::Config("invalid DDPG rates, batch size or noise".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DdpgAgent {
    cfg: DdpgConfig,
    low: Array1<f64>,
    high: Array1<f64>,
    actor: DenseNet,
    critic: DenseNet,
    actor_target: DenseNet,
    critic_target: DenseNet,
    actor_opt: AdamState,
    critic_opt: AdamState,
    learn_steps: u64,
}

/// Critic loss, gradients and residuals for one batch.
#[derive(Debug, Clone)]
pub struct CriticGradients {
    pub loss: f64,
    pub tape: GradientTape,
    pub td: Vec<f64>,
    pub mean_q: f64,
}

impl DdpgAgent {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, space: &ActionSpace, cfg: DdpgConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ActionSpace::Continuous { low, high } = space else {
            return Err(Error::Config("DDPG needs a continuous action space".into()));
        };
        let m = low.len();
        let mut actor_dims = vec![obs_dim];
        actor_dims.extend(&cfg.hidden);
        actor_dims.push(m);
        let mut critic_dims = vec![obs_dim + m];
        critic_dims.extend(&cfg.hidden);
        critic_dims.push(1);
        let actor = DenseNet::new(&actor_dims, cfg.activation, Activation::Tanh, rng)?;
        let critic = DenseNet::new(&critic_dims, cfg.activation, Activation::Identity, rng)?;
        let mut actor_opt = AdamState::new(&actor, cfg.actor_lr);
        let mut critic_opt = AdamState::new(&critic, cfg.critic_lr);
        actor_opt.clip_norm = Some(cfg.clip_norm);
        critic_opt.clip_norm = Some(cfg.clip_norm);
        Ok(DdpgAgent {
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            low: Array1::from(low.clone()),
            high: Array1::from(high.clone()),
            cfg,
            learn_steps: 0,
        })
    }

    pub fn config(&self) -> &DdpgConfig {
        &self.cfg
    }

    pub fn set_sigma(&mut self, sigma: f64) {
        self.cfg.sigma = sigma;
    }

    pub fn actor(&self) -> &DenseNet {
        &self.actor
    }

    pub fn critic(&self) -> &DenseNet {
        &self.critic
    }

    pub fn actor_mut(&mut self) -> &mut DenseNet {
        &mut self.actor
    }

    pub fn critic_mut(&mut self) -> &mut DenseNet {
        &mut self.critic
    }

    pub fn actor_target(&self) -> &DenseNet {
        &self.actor_target
    }

    pub fn critic_target(&self) -> &DenseNet {
        &self.critic_target
    }

    pub fn learn_steps(&self) -> u64 {
        self.learn_steps
    }

    fn to_env(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(self.low.iter().zip(self.high.iter())).map(|(u, (l, h))| l + 0.5 * (u + 1.0) * (h - l)).collect()
    }

    fn to_unit(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(self.low.iter().zip(self.high.iter())).map(|(a, (l, h))| 2.0 * (a - l) / (h - l) - 1.0).collect()
    }

    /// Deterministic actor output in action units.
    pub fn policy(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.to_env(&self.actor.forward(s)?))
    }

    /// Critic value for a state and an action in action units.
    pub fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        let mut x = s.to_vec();
        x.extend(self.to_unit(a));
        Ok(self.critic.forward(&x)?[0])
    }

    /// Actor output plus `N(0, σ²)` noise when exploring, clipped to the bounds.
    pub fn act<R: Rng + ?Sized>(&mut self, s: &[f64], explore: bool, rng: &mut R) -> Result<Action> {
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite state".into()));
        }
        let mut a = self.policy(s)?;
        if explore && self.cfg.sigma > 0.0 {
            for v in a.iter_mut() {
                *v += self.cfg.sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for (v, (l, h)) in a.iter_mut().zip(self.low.iter().zip(self.high.iter())) {
            *v = v.clamp(*l, *h);
        }
        Ok(Action::Continuous(a))
    }

    fn critic_input(&self, s: &Array2<f64>, u: &Array2<f64>) -> Result<Array2<f64>> {
        ndarray::concatenate(Axis(1), &[s.view(), u.view()]).map_err(|e| Error::Shape(e.to_string()))
    }

    fn stored_actions(&self, batch: &Batch) -> Result<Array2<f64>> {
        let m = self.low.len();
        let rows: Vec<Vec<f64>> = batch
            .transitions
            .iter()
            .map(|t| {
                t.a.vector()
                    .filter(|v| v.len() == m)
                    .map(|v| self.to_unit(v))
                    .ok_or_else(|| Error::InvalidArgument(format!("{:?} is not a valid action", t.a)))
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        rows_to_matrix(&refs, m)
    }

    /// Weighted critic loss `(1/B) Σ wᵢ (Q(sᵢ, aᵢ) − yᵢ)²` with
    /// `yᵢ = rᵢ + γ Q'(s'ᵢ, μ'(s'ᵢ))` held fixed.
    pub fn critic_loss_and_grads(&self, batch: &Batch) -> Result<CriticGradients> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty learning batch".into()));
        }
        let n = self.actor.input_dim();
        let b = batch.len();
        let s = stack_states(batch, false, n)?;
        let s_next = stack_states(batch, true, n)?;
        let u = self.stored_actions(batch)?;
        let u_next = self.actor_target.forward_batch(s_next.view())?;
        let q_next = self.critic_target.forward_batch(self.critic_input(&s_next, &u_next)?.view())?;
        let (q, cache) = self.critic.forward_cached(self.critic_input(&s, &u)?.view())?;
        let mut grad = Array2::zeros((b, 1));
        let mut td = Vec::with_capacity(b);
        let mut loss = 0.0;
        for (i, t) in batch.transitions.iter().enumerate() {
            let y = if t.done { t.r } else { t.r + self.cfg.gamma * q_next[[i, 0]] };
            let delta = y - q[[i, 0]];
            let w = batch.weights[i];
            loss += w * delta * delta / b as f64;
            grad[[i, 0]] = -2.0 * w * delta / b as f64;
            td.push(delta);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite critic loss".into()));
        }
        let (tape, _) = self.critic.backward(&cache, grad.view())?;
        Ok(CriticGradients { loss, tape, td, mean_q: q.mean().unwrap_or(0.0) })
    }

    /// Actor loss `−(1/B) Σ Q(sᵢ, μ(sᵢ))` and its gradient with respect to the actor.
    pub fn actor_loss_and_grads(&self, batch: &Batch) -> Result<(f64, GradientTape)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty learning batch".into()));
        }
        let n = self.actor.input_dim();
        let b = batch.len() as f64;
        let s = stack_states(batch, false, n)?;
        let (u, actor_cache) = self.actor.forward_cached(s.view())?;
        let (q, critic_cache) = self.critic.forward_cached(self.critic_input(&s, &u)?.view())?;
        let loss = -q.sum() / b;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite actor loss".into()));
        }
        let grad_q = Array2::from_elem(q.dim(), -1.0 / b);
        let (_, input_grad) = self.critic.backward(&critic_cache, grad_q.view())?;
        let grad_u = input_grad.slice(s![.., n..]).to_owned();
        let (tape, _) = self.actor.backward(&actor_cache, grad_u.view())?;
        Ok((loss, tape))
    }

    /// Critic step, then actor step against the updated critic, then soft target updates.
    pub fn learn_step(&mut self, batch: &Batch) -> Result<LearnStats> {
        let c = self.critic_loss_and_grads(batch)?;
        if !c.tape.is_finite() {
            return Err(Error::Numeric("non-finite critic gradient".into()));
        }
        self.critic_opt.step(&mut self.critic, &c.tape)?;
        let (_, actor_tape) = self.actor_loss_and_grads(batch)?;
        if !actor_tape.is_finite() {
            return Err(Error::Numeric("non-finite actor gradient".into()));
        }
        self.actor_opt.step(&mut self.actor, &actor_tape)?;
        soft_update(&self.critic, &mut self.critic_target, self.cfg.tau)?;
        soft_update(&self.actor, &mut self.actor_target, self.cfg.tau)?;
        self.learn_steps += 1;
        Ok(LearnStats { td_abs: c.td.iter().map(|d| d.abs()).collect(), loss: c.loss, mean_q: c.mean_q })
    }

    pub fn to_snapshot(&self) -> Vec<u8> {
        snapshot_nets(&[&self.actor, &self.critic])
    }

    /// Restores actor and critic (and resets both targets to them).
    pub fn load_snapshot(&mut self, bytes: &[u8]) -> Result<()> {
        let mut nets = restore_nets(bytes, 2)?;
        let critic = nets.pop().expect("two nets");
        let actor = nets.pop().expect("two nets");
        hard_update(&actor, &mut self.actor)?;
        hard_update(&critic, &mut self.critic)?;
        hard_update(&actor, &mut self.actor_target)?;
        hard_update(&critic, &mut self.critic_target)
    }
}

/// Either learner behind one interface.
#[derive(Debug, Clone)]
pub enum Agent {
    Dqn(DqnAgent),
    Ddpg(DdpgAgent),
}

impl Agent {
    pub fn act<R: Rng + ?Sized>(&mut self, s: &[f64], explore: bool, rng: &mut R) -> Result<Action> {
        match self {
            Agent::Dqn(a) => a.act(s, explore, rng),
            Agent::Ddpg(a) => a.act(s, explore, rng),
        }
    }

    pub fn learn_step(&mut self, batch: &Batch) -> Result<LearnStats> {
        match self {
            Agent::Dqn(a) => a.learn_step(batch),
            Agent::Ddpg(a) => a.learn_step(batch),
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Agent::Dqn(a) => a.cfg.batch_size,
            Agent::Ddpg(a) => a.cfg.batch_size,
        }
    }

    /// Current ε for DQN; `None` for DDPG.
    pub fn epsilon(&self) -> Option<f64> {
        match self {
            Agent::Dqn(a) => Some(a.epsilon()),
            Agent::Ddpg(_) => None,
        }
    }

    pub fn to_snapshot(&self) -> Vec<u8> {
        match self {
            Agent::Dqn(a) => a.to_snapshot(),
            Agent::Ddpg(a) => a.to_snapshot(),
        }
    }
}
