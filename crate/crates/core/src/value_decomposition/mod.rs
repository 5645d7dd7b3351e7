//! Value-decomposition learners: shared recurrent agent utilities combined by
//! a monotonic state-conditioned mixer (QMIX) or by a plain sum (VDN).

mod agent;
mod learner;
mod mixer;

pub use agent::{agent_q_sequence, AgentNetParams};
pub use learner::{
    argmax, hard_update_target, select_actions, td_loss, td_loss_on_tape, AgentRunner, TargetParams, TrainStats,
    ValueConfig, ValueLearner, ValueNets,
};
pub use mixer::{mix, Mixer, MixerKind, MixerParams};
