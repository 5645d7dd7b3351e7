use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::env::N_ACTIONS;
use crate::error::{Error, Result};
use crate::experience::EpisodeBatch;
use crate::layers::{affine_forward, gru_step, Affine, GruCellParams};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Recurrent per-agent utility network, shared across agents.
///
/// Input per step is the observation, the previous action one-hot and the
/// agent-id one-hot; `fc1 -> relu -> GRU -> fc2` produces one value per
/// action.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentNetParams {
    pub obs_dim: usize,
    pub n_agents: usize,
    pub hidden_dim: usize,
    pub fc1: Affine,
    pub gru: GruCellParams,
    pub fc2: Affine,
}

impl AgentNetParams {
    pub fn init(
        store: &mut ParamStore,
        obs_dim: usize,
        n_agents: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input = obs_dim + N_ACTIONS + n_agents;
        let fc1 = Affine::init(store, "agent.fc1", input, hidden_dim, rng);
        let gru = GruCellParams::init(store, "agent.gru", hidden_dim, hidden_dim, rng);
        let fc2 = Affine::init(store, "agent.fc2", hidden_dim, N_ACTIONS, rng);
        Self {
            obs_dim,
            n_agents,
            hidden_dim,
            fc1,
            gru,
            fc2,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + N_ACTIONS + self.n_agents
    }

    /// Writes one input row: observation, previous action, agent id.
    pub fn write_input(&self, row: &mut [f64], obs: &[f64], prev_action: Option<usize>, agent: usize) {
        row[..self.obs_dim].copy_from_slice(obs);
        row[self.obs_dim..].fill(0.0);
        if let Some(a) = prev_action {
            row[self.obs_dim + a] = 1.0;
        }
        row[self.obs_dim + N_ACTIONS + agent] = 1.0;
    }

    /// Input rows for the first `steps` steps of a batch, ordered
    /// `(t, episode, agent)`.
    pub fn batch_inputs(&self, batch: &EpisodeBatch, steps: usize) -> Result<Tensor> {
        if batch.obs_dim != self.obs_dim || batch.n_agents != self.n_agents {
            return Err(Error::Shape(format!(
                "batch has obs_dim {} / {} agents, network expects {} / {}",
                batch.obs_dim, batch.n_agents, self.obs_dim, self.n_agents
            )));
        }
        let (b, n, d) = (batch.batch_size, self.n_agents, self.input_dim());
        let mut data = vec![0.0; steps * b * n * d];
        for t in 0..steps {
            for e in 0..b {
                for i in 0..n {
                    let row = ((t * b + e) * n + i) * d;
                    let prev = (t > 0).then(|| batch.action_at(e, t - 1, i));
                    self.write_input(&mut data[row..row + d], batch.obs_at(e, t, i), prev, i);
                }
            }
        }
        Tensor::new(vec![steps * b * n, d], data)
    }

    /// Unrolls the network over `steps` blocks of `rows` input rows, starting
    /// from a zero hidden state. Returns `[steps·rows, n_actions]` values.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        inputs: &Tensor,
        steps: usize,
        rows: usize,
    ) -> Result<Var> {
        if inputs.shape() != [steps * rows, self.input_dim()] {
            return Err(Error::Shape(format!(
                "agent inputs {:?}, expected [{}, {}]",
                inputs.shape(),
                steps * rows,
                self.input_dim()
            )));
        }
        let fc1 = self.fc1.bind(tape, store, trainable);
        let gru = self.gru.bind(tape, store, trainable);
        let fc2 = self.fc2.bind(tape, store, trainable);
        let x = tape.constant(inputs.clone());
        let a = fc1.forward(tape, x)?;
        let a = tape.relu(a);
        let gx = gru.project_input(tape, a)?;
        let mut h = tape.constant(Tensor::zeros(&[rows, self.hidden_dim]));
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gxt = tape.slice_rows(gx, t * rows, rows)?;
            h = gru.step_projected(tape, gxt, h)?;
            hs.push(h);
        }
        let hcat = tape.concat_rows(&hs)?;
        fc2.forward(tape, hcat)
    }

    pub fn initial_hidden(&self, rows: usize) -> Tensor {
        Tensor::zeros(&[rows, self.hidden_dim])
    }

    /// One inference step: `(action values, next hidden)`.
    pub fn step(&self, store: &ParamStore, inputs: &Tensor, hidden: &Tensor) -> Result<(Tensor, Tensor)> {
        let a = affine_forward(
            inputs,
            store.value(&self.fc1.weight_name()),
            store.value(&self.fc1.bias_name()),
        )?
        .map(|v| v.max(0.0));
        let h = gru_step(&a, hidden, &self.gru, store)?;
        let q = affine_forward(
            &h,
            store.value(&self.fc2.weight_name()),
            store.value(&self.fc2.bias_name()),
        )?;
        Ok((q, h))
    }
}

/// Per-step, per-agent action values for a batch, `[T·B·n, n_actions]` with
/// rows ordered `(t, episode, agent)`.
pub fn agent_q_sequence(batch: &EpisodeBatch, net: &AgentNetParams, store: &ParamStore) -> Result<Tensor> {
    let steps = batch.max_len;
    let inputs = net.batch_inputs(batch, steps)?;
    let mut tape = Tape::new();
    let q = net.forward_sequence(&mut tape, store, false, &inputs, steps, batch.batch_size * batch.n_agents)?;
    Ok(tape.value(q).clone())
}
