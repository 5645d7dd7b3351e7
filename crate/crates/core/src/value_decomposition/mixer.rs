use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Affine;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    Qmix,
    Vdn,
}

impl MixerKind {
    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Qmix => "qmix",
            MixerKind::Vdn => "vdn",
        }
    }
}

/// State-conditioned monotonic mixer.
///
/// `Q_tot = |w2(s)|ᵀ · elu(|W1(s)|·q + b1(s)) + v(s)` where `W1` and `w2`
/// come from two-layer hypernetworks and `v` from a two-layer value head.
/// Taking absolute values of the generated weights keeps `∂Q_tot/∂q_i ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams {
    pub n_agents: usize,
    pub state_dim: usize,
    pub embed: usize,
    pub hyper_hidden: usize,
    hyper_w1: [Affine; 2],
    hyper_b1: Affine,
    hyper_w2: [Affine; 2],
    value: [Affine; 2],
}

impl MixerParams {
    pub fn init(
        store: &mut ParamStore,
        n_agents: usize,
        state_dim: usize,
        embed: usize,
        hyper_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hyper_w1 = [
            Affine::init(store, "mixer.hyper_w1.0", state_dim, hyper_hidden, rng),
            Affine::init(store, "mixer.hyper_w1.1", hyper_hidden, n_agents * embed, rng),
        ];
        let hyper_b1 = Affine::init(store, "mixer.hyper_b1", state_dim, embed, rng);
        let hyper_w2 = [
            Affine::init(store, "mixer.hyper_w2.0", state_dim, hyper_hidden, rng),
            Affine::init(store, "mixer.hyper_w2.1", hyper_hidden, embed, rng),
        ];
        let value = [
            Affine::init(store, "mixer.value.0", state_dim, embed, rng),
            Affine::init(store, "mixer.value.1", embed, 1, rng),
        ];
        Self {
            n_agents,
            state_dim,
            embed,
            hyper_hidden,
            hyper_w1,
            hyper_b1,
            hyper_w2,
            value,
        }
    }

    /// Parameter name of the final scalar bias.
    pub fn final_bias_name(&self) -> String {
        self.value[1].bias_name()
    }

    fn two_layer(
        tape: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        layers: &[Affine; 2],
        s: Var,
    ) -> Result<Var> {
        let l0 = layers[0].bind(tape, store, trainable);
        let l1 = layers[1].bind(tape, store, trainable);
        let h = l0.forward(tape, s)?;
        let h = tape.relu(h);
        l1.forward(tape, h)
    }

    /// `|W1(s)|` flattened per row, `[B, n_agents·embed]`.
    pub fn hyper_w1(&self, tape: &mut Tape, store: &ParamStore, trainable: bool, states: Var) -> Result<Var> {
        let w = Self::two_layer(tape, store, trainable, &self.hyper_w1, states)?;
        Ok(tape.abs(w))
    }

    /// `|w2(s)|`, `[B, embed]`.
    pub fn hyper_w2(&self, tape: &mut Tape, store: &ParamStore, trainable: bool, states: Var) -> Result<Var> {
        let w = Self::two_layer(tape, store, trainable, &self.hyper_w2, states)?;
        Ok(tape.abs(w))
    }

    /// `b1(s)`, `[B, embed]`.
    pub fn hyper_b1(&self, tape: &mut Tape, store: &ParamStore, trainable: bool, states: Var) -> Result<Var> {
        let b1 = self.hyper_b1.bind(tape, store, trainable);
        b1.forward(tape, states)
    }

    /// State-value bias `v(s)`, `[B, 1]`.
    pub fn state_value(&self, tape: &mut Tape, store: &ParamStore, trainable: bool, states: Var) -> Result<Var> {
        Self::two_layer(tape, store, trainable, &self.value, states)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        qs: Var,
        states: Var,
    ) -> Result<Var> {
        let w1 = self.hyper_w1(tape, store, trainable, states)?;
        let b1 = self.hyper_b1(tape, store, trainable, states)?;
        let hidden = tape.mix_weights(qs, w1, self.embed)?;
        let hidden = tape.add(hidden, b1)?;
        let hidden = tape.elu(hidden);
        let w2 = self.hyper_w2(tape, store, trainable, states)?;
        let y = tape.row_dot(hidden, w2)?;
        let v = self.state_value(tape, store, trainable, states)?;
        tape.add(y, v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Qmix(MixerParams),
    /// `Q_tot = Σ_i q_i`
    Vdn { n_agents: usize },
}

impl Mixer {
    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Qmix(_) => MixerKind::Qmix,
            Mixer::Vdn { .. } => MixerKind::Vdn,
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Mixer::Qmix(p) => p.n_agents,
            Mixer::Vdn { n_agents } => *n_agents,
        }
    }

    /// `qs: [B, n_agents]`, `states: [B, state_dim]` → `[B, 1]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        trainable: bool,
        qs: Var,
        states: Var,
    ) -> Result<Var> {
        let n = self.n_agents();
        let qshape = tape.shape(qs).to_vec();
        if qshape.len() != 2 || qshape[1] != n || tape.shape(states)[0] != qshape[0] {
            return Err(Error::Shape(format!(
                "mixer input {qshape:?} with states {:?}",
                tape.shape(states)
            )));
        }
        match self {
            Mixer::Vdn { .. } => Ok(tape.sum_cols(qs)),
            Mixer::Qmix(p) => {
                if tape.shape(states)[1] != p.state_dim {
                    return Err(Error::Shape(format!(
                        "state width {} != {}",
                        tape.shape(states)[1],
                        p.state_dim
                    )));
                }
                p.forward(tape, store, trainable, qs, states)
            }
        }
    }
}

/// `Q_tot` for chosen per-agent values on plain tensors.
pub fn mix(chosen_qs: &Tensor, states: &Tensor, mixer: &Mixer, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(chosen_qs.clone());
    let s = tape.constant(states.clone());
    let out = mixer.forward(&mut tape, store, false, q, s)?;
    Ok(tape.value(out).clone())
}
