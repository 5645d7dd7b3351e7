use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::env::N_ACTIONS;
use crate::error::{Error, Result};
use crate::experience::EpisodeBatch;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{clip_grad_norm, ParamStore};
use crate::tensor::Tensor;

use super::agent::AgentNetParams;
use super::mixer::{Mixer, MixerKind, MixerParams};

#[derive(Clone, Debug, PartialEq)]
pub struct ValueConfig {
    pub mixer: MixerKind,
    pub gamma: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub target_update_interval: u64,
    pub double_q: bool,
    pub hidden_dim: usize,
    pub mix_embed: usize,
    pub hyper_hidden: usize,
    pub optimizer: OptimizerKind,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            mixer: MixerKind::Qmix,
            gamma: 0.99,
            learning_rate: 0.0005,
            grad_clip: 10.0,
            target_update_interval: 200,
            double_q: false,
            hidden_dim: 64,
            mix_embed: 32,
            hyper_hidden: 64,
            optimizer: OptimizerKind::rmsprop(),
        }
    }
}

/// Frozen copies of the agent and mixer parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetParams {
    pub agent: ParamStore,
    pub mixer: ParamStore,
}

/// Network shapes plus the live parameter stores.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNets {
    pub agent: AgentNetParams,
    pub mixer: Mixer,
    pub agent_store: ParamStore,
    pub mixer_store: ParamStore,
}

impl ValueNets {
    pub fn init(
        cfg: &ValueConfig,
        obs_dim: usize,
        state_dim: usize,
        n_agents: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut agent_store = ParamStore::new("agent");
        let mut mixer_store = ParamStore::new("mixer");
        let agent = AgentNetParams::init(&mut agent_store, obs_dim, n_agents, cfg.hidden_dim, rng);
        let mixer = match cfg.mixer {
            MixerKind::Qmix => Mixer::Qmix(MixerParams::init(
                &mut mixer_store,
                n_agents,
                state_dim,
                cfg.mix_embed,
                cfg.hyper_hidden,
                rng,
            )),
            MixerKind::Vdn => Mixer::Vdn { n_agents },
        };
        Self {
            agent,
            mixer,
            agent_store,
            mixer_store,
        }
    }

    pub fn snapshot(&self) -> TargetParams {
        let mut agent = self.agent_store.clone();
        agent.set_tag("target_agent");
        agent.zero_grads();
        let mut mixer = self.mixer_store.clone();
        mixer.set_tag("target_mixer");
        mixer.zero_grads();
        TargetParams { agent, mixer }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub target_updated: bool,
}

/// Rows `(t, b)` of the `[B][T + 1][sd]` state array for `t` in
/// `offset..offset + steps`.
fn state_rows(batch: &EpisodeBatch, offset: usize, steps: usize) -> Result<Tensor> {
    let (b, sd) = (batch.batch_size, batch.state_dim);
    let mut data = Vec::with_capacity(steps * b * sd);
    for t in offset..offset + steps {
        for e in 0..b {
            data.extend_from_slice(batch.state_at(e, t));
        }
    }
    Tensor::new(vec![steps * b, sd], data)
}

/// `[B][T]` field reordered to `(t, b)` rows.
fn time_major(batch: &EpisodeBatch, field: &[f64]) -> Tensor {
    let (b, t) = (batch.batch_size, batch.max_len);
    let mut data = Vec::with_capacity(b * t);
    for s in 0..t {
        for e in 0..b {
            data.push(batch.at(field, e, s));
        }
    }
    Tensor::new(vec![b * t, 1], data).expect("b·t values")
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// TD targets `r + γ(1 - done)·Q_tot^target(s', argmax)` as `[T·B, 1]`.
fn td_targets(
    batch: &EpisodeBatch,
    nets: &ValueNets,
    target: &TargetParams,
    cfg: &ValueConfig,
    live_next: Option<&Tensor>,
) -> Result<Tensor> {
    let (b, t, n) = (batch.batch_size, batch.max_len, batch.n_agents);
    let inputs = nets.agent.batch_inputs(batch, t + 1)?;
    let mut tape = Tape::new();
    let tq = nets
        .agent
        .forward_sequence(&mut tape, &target.agent, false, &inputs, t + 1, b * n)?;
    let tq = tape.value(tq);
    // Rows for steps 1..=T.
    let mut next = Vec::with_capacity(t * b * n);
    for r in b * n..(t + 1) * b * n {
        let row = tq.row(r);
        let a = match live_next {
            Some(live) => argmax(live.row(r)),
            None => argmax(row),
        };
        next.push(row[a]);
    }
    let next_q = tape.constant(Tensor::new(vec![t * b, n], next)?);
    let next_s = tape.constant(state_rows(batch, 1, t)?);
    let next_tot = nets
        .mixer
        .forward(&mut tape, &target.mixer, false, next_q, next_s)?;
    let next_tot = tape.value(next_tot);
    let rewards = time_major(batch, &batch.rewards);
    let dones = time_major(batch, &batch.dones);
    let data = (0..t * b)
        .map(|k| rewards.data()[k] + cfg.gamma * (1.0 - dones.data()[k]) * next_tot.data()[k])
        .collect();
    Tensor::new(vec![t * b, 1], data)
}

/// Builds the TD loss on `tape` with the live parameters bound trainable.
pub fn td_loss_on_tape(
    tape: &mut Tape,
    batch: &EpisodeBatch,
    nets: &ValueNets,
    target: &TargetParams,
    cfg: &ValueConfig,
) -> Result<Var> {
    let (b, t, n) = (batch.batch_size, batch.max_len, batch.n_agents);
    let valid = batch.valid_steps();
    if b == 0 || t == 0 || valid == 0.0 {
        return Err(Error::Replay("td_loss on an empty batch".into()));
    }
    let live_steps = if cfg.double_q { t + 1 } else { t };
    let inputs = nets.agent.batch_inputs(batch, live_steps)?;
    let q = nets
        .agent
        .forward_sequence(tape, &nets.agent_store, true, &inputs, live_steps, b * n)?;
    let live_next = cfg.double_q.then(|| tape.value(q).clone());
    let q = if cfg.double_q {
        tape.slice_rows(q, 0, t * b * n)?
    } else {
        q
    };
    let mut cols = Vec::with_capacity(t * b * n);
    for s in 0..t {
        for e in 0..b {
            for i in 0..n {
                cols.push(batch.action_at(e, s, i));
            }
        }
    }
    let chosen = tape.gather(q, &cols)?;
    let chosen = tape.reshape(chosen, &[t * b, n])?;
    let states = tape.constant(state_rows(batch, 0, t)?);
    let q_tot = nets
        .mixer
        .forward(tape, &nets.mixer_store, true, chosen, states)?;
    let y = tape.constant(td_targets(batch, nets, target, cfg, live_next.as_ref())?);
    let mask = tape.constant(time_major(batch, &batch.mask));
    let err = tape.sub(q_tot, y)?;
    let sq = tape.square(err);
    let masked = tape.mul(sq, mask)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / valid))
}

/// Masked mean squared TD error.
pub fn td_loss(batch: &EpisodeBatch, nets: &ValueNets, target: &TargetParams, cfg: &ValueConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = td_loss_on_tape(&mut tape, batch, nets, target, cfg)?;
    Ok(tape.value(loss).item())
}

/// Makes `target` a bit-identical copy of the live parameters.
pub fn hard_update_target(nets: &ValueNets, target: &mut TargetParams) -> Result<()> {
    target.agent.copy_values_from(&nets.agent_store)?;
    target.mixer.copy_values_from(&nets.mixer_store)
}

/// Epsilon-greedy choice per agent row of `qs: [n, n_actions]`.
///
/// A uniform draw is consumed for every agent so the random stream does not
/// depend on the values.
pub fn select_actions(qs: &Tensor, epsilon: f64, rng: &mut impl Rng) -> Vec<usize> {
    (0..qs.rows())
        .map(|i| {
            let u: f64 = rng.gen();
            if u < epsilon {
                rng.gen_range(0..N_ACTIONS)
            } else {
                argmax(qs.row(i))
            }
        })
        .collect()
}

/// Recurrent state of the shared agent network during one episode.
#[derive(Clone, Debug)]
pub struct AgentRunner {
    hidden: Tensor,
    prev: Vec<Option<usize>>,
}

impl AgentRunner {
    pub fn new(net: &AgentNetParams) -> Self {
        Self {
            hidden: net.initial_hidden(net.n_agents),
            prev: vec![None; net.n_agents],
        }
    }

    /// Action values for every agent given the current observations.
    /// `obs` is the concatenation of per-agent observations.
    pub fn q_values(&mut self, net: &AgentNetParams, store: &ParamStore, obs: &[f64]) -> Result<Tensor> {
        let (n, d, od) = (net.n_agents, net.input_dim(), net.obs_dim);
        if obs.len() != n * od {
            return Err(Error::Shape(format!("observations of length {}, expected {}", obs.len(), n * od)));
        }
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            net.write_input(&mut data[i * d..(i + 1) * d], &obs[i * od..(i + 1) * od], self.prev[i], i);
        }
        let (q, h) = net.step(store, &Tensor::new(vec![n, d], data)?, &self.hidden)?;
        self.hidden = h;
        Ok(q)
    }

    pub fn set_previous_actions(&mut self, actions: &[usize]) {
        for (p, &a) in self.prev.iter_mut().zip(actions) {
            *p = Some(a);
        }
    }

    pub fn act(
        &mut self,
        net: &AgentNetParams,
        store: &ParamStore,
        obs: &[f64],
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let q = self.q_values(net, store, obs)?;
        let actions = select_actions(&q, epsilon, rng);
        self.set_previous_actions(&actions);
        Ok(actions)
    }
}

/// QMIX or VDN learner: live networks, target copies and optimizer state.
#[derive(Clone, Debug)]
pub struct ValueLearner {
    pub cfg: ValueConfig,
    pub nets: ValueNets,
    pub target: TargetParams,
    optimizer: Optimizer,
    train_iterations: u64,
    target_updates: u64,
}

impl ValueLearner {
    pub fn new(cfg: ValueConfig, obs_dim: usize, state_dim: usize, n_agents: usize, rng: &mut impl Rng) -> Self {
        let nets = ValueNets::init(&cfg, obs_dim, state_dim, n_agents, rng);
        let target = nets.snapshot();
        let optimizer = Optimizer::new(cfg.optimizer);
        Self {
            cfg,
            nets,
            target,
            optimizer,
            train_iterations: 0,
            target_updates: 0,
        }
    }

    pub fn from_nets(cfg: ValueConfig, nets: ValueNets) -> Self {
        let target = nets.snapshot();
        let optimizer = Optimizer::new(cfg.optimizer);
        Self {
            cfg,
            nets,
            target,
            optimizer,
            train_iterations: 0,
            target_updates: 0,
        }
    }

    pub fn train_iterations(&self) -> u64 {
        self.train_iterations
    }

    pub fn target_updates(&self) -> u64 {
        self.target_updates
    }

    pub fn runner(&self) -> AgentRunner {
        AgentRunner::new(&self.nets.agent)
    }

    /// One gradient step on `batch`; copies to the target every
    /// `target_update_interval` iterations.
    pub fn train(&mut self, batch: &EpisodeBatch) -> Result<TrainStats> {
        let mut tape = Tape::new();
        let loss = td_loss_on_tape(&mut tape, batch, &self.nets, &self.target, &self.cfg)?;
        let loss_value = tape.value(loss).item();
        self.nets.agent_store.zero_grads();
        self.nets.mixer_store.zero_grads();
        tape.backward(loss, &mut [&mut self.nets.agent_store, &mut self.nets.mixer_store])?;
        let norm = clip_grad_norm(
            &mut [&mut self.nets.agent_store, &mut self.nets.mixer_store],
            self.cfg.grad_clip,
        );
        self.optimizer.step(&mut self.nets.agent_store, self.cfg.learning_rate);
        self.optimizer.step(&mut self.nets.mixer_store, self.cfg.learning_rate);
        self.train_iterations += 1;
        let target_updated = self.train_iterations.is_multiple_of(self.cfg.target_update_interval);
        if target_updated {
            hard_update_target(&self.nets, &mut self.target)?;
            self.target_updates += 1;
        }
        Ok(TrainStats {
            loss: loss_value,
            grad_norm: norm,
            target_updated,
        })
    }
}
