//! Independent PPO: every agent owns a feedforward actor and critic and
//! learns from its own trajectory only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::env::N_ACTIONS;
use crate::error::{Error, Result};
use crate::layers::{affine_forward, Affine};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{clip_grad_norm, ParamStore};
use crate::tensor::Tensor;

#[cfg(test)]
mod tests;

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub hidden_dim: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub horizon: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub optimizer: OptimizerKind,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 4,
            horizon: 128,
            minibatch_size: 32,
            learning_rate: 0.0005,
            max_grad_norm: 0.5,
            optimizer: OptimizerKind::adam(),
        }
    }
}

/// Actor `obs → tanh(64) → logits` and critic `obs → tanh(64) → value` for
/// one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPolicy {
    pub obs_dim: usize,
    pub store: ParamStore,
    actor: [Affine; 2],
    critic: [Affine; 2],
}

impl AgentPolicy {
    pub fn init(tag: &str, obs_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new(tag);
        let actor = [
            Affine::init(&mut store, "actor.0", obs_dim, hidden, rng),
            Affine::init(&mut store, "actor.1", hidden, N_ACTIONS, rng),
        ];
        let critic = [
            Affine::init(&mut store, "critic.0", obs_dim, hidden, rng),
            Affine::init(&mut store, "critic.1", hidden, 1, rng),
        ];
        Self {
            obs_dim,
            store,
            actor,
            critic,
        }
    }

    /// Same architecture with different parameter values.
    pub fn with_store(&self, store: ParamStore) -> Self {
        Self {
            store,
            ..self.clone()
        }
    }

    fn plain(&self, layers: &[Affine; 2], obs: &Tensor) -> Result<Tensor> {
        let s = &self.store;
        let h = affine_forward(obs, s.value(&layers[0].weight_name()), s.value(&layers[0].bias_name()))?.map(f64::tanh);
        affine_forward(&h, s.value(&layers[1].weight_name()), s.value(&layers[1].bias_name()))
    }

    /// Action logits for `obs: [rows, obs_dim]`.
    pub fn logits(&self, obs: &Tensor) -> Result<Tensor> {
        self.plain(&self.actor, obs)
    }

    /// Critic values, `[rows, 1]`.
    pub fn values(&self, obs: &Tensor) -> Result<Tensor> {
        self.plain(&self.critic, obs)
    }

    fn taped(&self, tape: &mut Tape, layers: &[Affine; 2], x: Var) -> Result<Var> {
        let l0 = layers[0].bind(tape, &self.store, true);
        let l1 = layers[1].bind(tape, &self.store, true);
        let h = l0.forward(tape, x)?;
        let h = tape.tanh(h);
        l1.forward(tape, h)
    }

    pub fn logits_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.taped(tape, &self.actor, x)
    }

    pub fn values_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.taped(tape, &self.critic, x)
    }

    fn obs_row(&self, obs: &[f64]) -> Result<Tensor> {
        if obs.len() != self.obs_dim {
            return Err(Error::Shape(format!("observation of length {}, expected {}", obs.len(), self.obs_dim)));
        }
        Tensor::new(vec![1, self.obs_dim], obs.to_vec())
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        Ok(self.values(&self.obs_row(obs)?)?.item())
    }

    /// Most probable action; ties go to the lowest index.
    pub fn greedy(&self, obs: &[f64]) -> Result<usize> {
        let l = self.logits(&self.obs_row(obs)?)?;
        Ok(crate::value_decomposition::argmax(l.data()))
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Draws an action from `softmax(logits)` by inverse CDF on one uniform.
pub fn sample_from_logits(logits: &[f64], rng: &mut impl Rng) -> (usize, f64) {
    let lp = log_softmax(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut action = lp.len() - 1;
    for (a, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            action = a;
            break;
        }
    }
    (action, lp[action])
}

/// `(action, log_prob, value)` for one observation.
pub fn sample_action(obs: &[f64], policy: &AgentPolicy, rng: &mut impl Rng) -> Result<(usize, f64, f64)> {
    let x = policy.obs_row(obs)?;
    let logits = policy.logits(&x)?;
    let (a, lp) = sample_from_logits(logits.data(), rng);
    let v = policy.values(&x)?.item();
    Ok((a, lp, v))
}

/// On-policy storage for one agent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBuffer {
    pub obs_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// True when the episode ended after this step.
    pub dones: Vec<bool>,
    pub bootstrap_value: f64,
}

impl RolloutBuffer {
    pub fn new(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, obs: &[f64], action: usize, log_prob: f64, reward: f64, value: f64, done: bool) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        self.obs.extend_from_slice(obs);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.dones.push(done);
    }

    pub fn clear(&mut self) {
        self.obs.clear();
        self.actions.clear();
        self.log_probs.clear();
        self.rewards.clear();
        self.values.clear();
        self.dones.clear();
        self.bootstrap_value = 0.0;
    }

    pub fn obs_rows(&self, idx: &[usize]) -> Tensor {
        let d = self.obs_dim;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.obs[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![idx.len(), d], data).expect("rows of obs_dim")
    }
}

/// Generalized advantage estimates and returns (`advantage + value`).
pub fn compute_gae(rollout: &RolloutBuffer, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rollout.len();
    if n == 0 {
        return Err(Error::Replay("empty rollout".into()));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = rollout.bootstrap_value;
    for t in (0..n).rev() {
        let live = if rollout.dones[t] { 0.0 } else { 1.0 };
        let delta = rollout.rewards[t] + gamma * live * next_value - rollout.values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = rollout.values[t];
    }
    let returns = adv.iter().zip(&rollout.values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Mean 0, standard deviation 1 (population), unless all values coincide.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

/// Minibatch inputs to the PPO objective.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoBatch {
    pub obs: Tensor,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn select(rollout: &RolloutBuffer, adv: &[f64], ret: &[f64], idx: &[usize]) -> Self {
        Self {
            obs: rollout.obs_rows(idx),
            actions: idx.iter().map(|&i| rollout.actions[i]).collect(),
            old_log_probs: idx.iter().map(|&i| rollout.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| adv[i]).collect(),
            returns: idx.iter().map(|&i| ret[i]).collect(),
        }
    }
}

/// Handles to the pieces of the PPO objective on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PpoTerms {
    pub loss: Var,
    pub surrogate: Var,
    pub unclipped: Var,
    pub value_loss: Var,
    pub entropy: Var,
}

/// `loss = -surrogate + c_v·value_loss - c_e·entropy`, where the surrogate is
/// the batch mean of `min(ρ·A, clip(ρ, 1-ε, 1+ε)·A)`.
pub fn ppo_loss_on_tape(tape: &mut Tape, policy: &AgentPolicy, batch: &PpoBatch, cfg: &PpoConfig) -> Result<PpoTerms> {
    let m = batch.actions.len();
    let col = |v: &[f64]| Tensor::new(vec![m, 1], v.to_vec());
    let x = tape.constant(batch.obs.clone());
    let logits = policy.logits_on_tape(tape, x)?;
    let lsm = tape.log_softmax(logits);
    let lp = tape.gather(lsm, &batch.actions)?;
    let old = tape.constant(col(&batch.old_log_probs)?);
    let adv = tape.constant(col(&batch.advantages)?);
    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff);
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = tape.mul(clipped, adv)?;
    let smin = tape.min(s1, s2)?;
    let surrogate = tape.mean(smin);
    let unclipped = tape.mean(s1);

    let v = policy.values_on_tape(tape, x)?;
    let ret = tape.constant(col(&batch.returns)?);
    let verr = tape.sub(v, ret)?;
    let vsq = tape.square(verr);
    let value_loss = tape.mean(vsq);

    let p = tape.exp(lsm);
    let plogp = tape.mul(p, lsm)?;
    let row = tape.sum_cols(plogp);
    let neg_entropy = tape.mean(row);
    let entropy = tape.scale(neg_entropy, -1.0);

    let a = tape.scale(surrogate, -1.0);
    let b = tape.scale(value_loss, cfg.value_coef);
    let c = tape.scale(neg_entropy, cfg.entropy_coef);
    let ab = tape.add(a, b)?;
    let loss = tape.add(ab, c)?;
    Ok(PpoTerms {
        loss,
        surrogate,
        unclipped,
        value_loss,
        entropy,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub loss: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub minibatches: usize,
}

/// Runs `epochs` passes of shuffled minibatch updates on one agent's
/// rollout, then clears it.
pub fn ppo_update(
    rollout: &mut RolloutBuffer,
    policy: &mut AgentPolicy,
    optimizer: &mut Optimizer,
    cfg: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<PpoStats> {
    let (adv, ret) = compute_gae(rollout, cfg.gamma, cfg.gae_lambda)?;
    let adv = normalize(&adv);
    let n = rollout.len();
    let mb = cfg.minibatch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = PpoStats::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let batch = PpoBatch::select(rollout, &adv, &ret, idx);
            let mut tape = Tape::new();
            let terms = ppo_loss_on_tape(&mut tape, policy, &batch, cfg)?;
            policy.store.zero_grads();
            tape.backward(terms.loss, &mut [&mut policy.store])?;
            clip_grad_norm(&mut [&mut policy.store], cfg.max_grad_norm);
            optimizer.step(&mut policy.store, cfg.learning_rate);
            stats.loss += tape.value(terms.loss).item();
            stats.surrogate += tape.value(terms.surrogate).item();
            stats.value_loss += tape.value(terms.value_loss).item();
            stats.entropy += tape.value(terms.entropy).item();
            stats.minibatches += 1;
        }
    }
    let k = stats.minibatches.max(1) as f64;
    stats.loss /= k;
    stats.surrogate /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    rollout.clear();
    Ok(stats)
}

/// One independent learner per agent, each with its own optimizer, rollout
/// and random stream.
#[derive(Clone, Debug)]
pub struct IppoLearner {
    pub cfg: PpoConfig,
    pub policies: Vec<AgentPolicy>,
    pub rollouts: Vec<RolloutBuffer>,
    optimizers: Vec<Optimizer>,
    rngs: Vec<ChaCha8Rng>,
    updates: u64,
}

impl IppoLearner {
    pub fn new(cfg: PpoConfig, obs_dim: usize, n_agents: usize, seed: u64) -> Self {
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let policies = (0..n_agents)
            .map(|i| AgentPolicy::init(&format!("ippo{i}"), obs_dim, cfg.hidden_dim, &mut init))
            .collect();
        let rngs = (0..n_agents)
            .map(|i| ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1))))
            .collect();
        Self::from_parts(cfg, policies, rngs)
    }

    pub fn from_parts(cfg: PpoConfig, policies: Vec<AgentPolicy>, rngs: Vec<ChaCha8Rng>) -> Self {
        let rollouts = policies.iter().map(|p| RolloutBuffer::new(p.obs_dim)).collect();
        let optimizers = policies.iter().map(|_| Optimizer::new(cfg.optimizer)).collect();
        Self {
            cfg,
            policies,
            rollouts,
            optimizers,
            rngs,
            updates: 0,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.policies.len()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Samples every agent's action from its own observation slice.
    pub fn act(&mut self, obs: &[Vec<f64>]) -> Result<Vec<(usize, f64, f64)>> {
        self.policies
            .iter()
            .zip(&mut self.rngs)
            .zip(obs)
            .map(|((p, rng), o)| sample_action(o, p, rng))
            .collect()
    }

    /// Records one transition for every agent. `samples` are what `act`
    /// returned for `obs`.
    pub fn record(&mut self, obs: &[Vec<f64>], samples: &[(usize, f64, f64)], reward: f64, done: bool) {
        for ((buf, o), &(a, lp, v)) in self.rollouts.iter_mut().zip(obs).zip(samples) {
            buf.push(o, a, lp, reward, v, done);
        }
    }

    pub fn ready(&self) -> bool {
        self.rollouts.first().is_some_and(|r| r.len() >= self.cfg.horizon)
    }

    /// Updates every agent on its own rollout, bootstrapping from
    /// `next_obs`.
    pub fn update(&mut self, next_obs: &[Vec<f64>]) -> Result<Vec<PpoStats>> {
        let mut out = Vec::with_capacity(self.n_agents());
        for i in 0..self.n_agents() {
            out.push(self.update_agent(i, &next_obs[i])?);
        }
        self.updates += 1;
        Ok(out)
    }

    pub fn update_agent(&mut self, i: usize, next_obs: &[f64]) -> Result<PpoStats> {
        let rollout = &mut self.rollouts[i];
        rollout.bootstrap_value = if rollout.dones.last() == Some(&true) {
            0.0
        } else {
            self.policies[i].value(next_obs)?
        };
        ppo_update(rollout, &mut self.policies[i], &mut self.optimizers[i], &self.cfg, &mut self.rngs[i])
    }
}
