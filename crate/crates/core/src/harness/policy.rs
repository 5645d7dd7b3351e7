//! Frozen policies for evaluation, playback and the C interface.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{restore_into, Checkpoint};
use crate::env::{EnvConfig, JointAction, Warehouse, N_ACTIONS};
use crate::error::{Error, Result};
use crate::ippo::AgentPolicy;
use crate::value_decomposition::{AgentNetParams, AgentRunner, ValueNets};

use super::config::{LearnerKind, TrainConfig};
use super::{eval_episode_seed, mean_std, mix_seed};

/// Greedy decentralized policy restored from a run.
#[derive(Clone, Debug)]
pub enum LoadedPolicy {
    Value {
        kind: LearnerKind,
        net: AgentNetParams,
        store: crate::params::ParamStore,
    },
    Ippo(Vec<AgentPolicy>),
    Random { n_agents: usize },
}

/// Per-episode recurrent state.
#[derive(Clone, Debug)]
pub enum EpisodeActor {
    Value(AgentRunner),
    Ippo,
    Random(ChaCha8Rng),
}

impl LoadedPolicy {
    pub fn kind(&self) -> LearnerKind {
        match self {
            LoadedPolicy::Value { kind, .. } => *kind,
            LoadedPolicy::Ippo(_) => LearnerKind::Ippo,
            LoadedPolicy::Random { .. } => LearnerKind::Random,
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            LoadedPolicy::Value { net, .. } => net.n_agents,
            LoadedPolicy::Ippo(p) => p.len(),
            LoadedPolicy::Random { n_agents } => *n_agents,
        }
    }

    /// Rebuilds the networks described by the checkpoint's config for `env`
    /// and loads the stored values.
    pub fn from_checkpoint(ck: &Checkpoint, env: &EnvConfig) -> Result<Self> {
        let cfg = TrainConfig::parse(&ck.config_text)
            .map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;
        let kind: LearnerKind = ck.learner.parse()?;
        if kind != cfg.learner {
            return Err(Error::Checkpoint(format!(
                "header says {kind}, config says {}",
                cfg.learner
            )));
        }
        let (od, sd, n) = (crate::env::obs_dim(env), crate::env::state_dim(env), env.n_agents);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match kind {
            LearnerKind::Qmix | LearnerKind::Vdn => {
                let mut nets = ValueNets::init(&cfg.value_config(), od, sd, n, &mut rng);
                restore_into(&mut nets.agent_store, ck.store("agent")?)?;
                Ok(LoadedPolicy::Value {
                    kind,
                    net: nets.agent,
                    store: nets.agent_store,
                })
            }
            LearnerKind::Ippo => {
                if ck.stores.len() != n {
                    return Err(Error::Incompatible(format!(
                        "checkpoint holds {} agent policies, environment has {n} agents",
                        ck.stores.len()
                    )));
                }
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let tag = format!("ippo{i}");
                    let mut p = AgentPolicy::init(&tag, od, cfg.hidden_dim, &mut rng);
                    restore_into(&mut p.store, ck.store(&tag)?)?;
                    out.push(p);
                }
                Ok(LoadedPolicy::Ippo(out))
            }
            LearnerKind::Random => Ok(LoadedPolicy::Random { n_agents: n }),
        }
    }

    /// Fresh per-episode state; `seed` drives the random policy only.
    pub fn begin_episode(&self, seed: u64) -> EpisodeActor {
        match self {
            LoadedPolicy::Value { net, .. } => EpisodeActor::Value(AgentRunner::new(net)),
            LoadedPolicy::Ippo(_) => EpisodeActor::Ippo,
            LoadedPolicy::Random { .. } => EpisodeActor::Random(ChaCha8Rng::seed_from_u64(mix_seed(seed, 1))),
        }
    }

    /// Greedy joint action for the concatenated observations `obs`.
    pub fn act(&self, actor: &mut EpisodeActor, obs: &[f64]) -> Result<Vec<usize>> {
        match (self, actor) {
            (LoadedPolicy::Value { net, store, .. }, EpisodeActor::Value(runner)) => {
                let q = runner.q_values(net, store, obs)?;
                let actions: Vec<usize> = (0..q.rows()).map(|i| crate::value_decomposition::argmax(q.row(i))).collect();
                runner.set_previous_actions(&actions);
                Ok(actions)
            }
            (LoadedPolicy::Ippo(policies), EpisodeActor::Ippo) => {
                let od = policies.first().map_or(0, |p| p.obs_dim);
                if obs.len() != od * policies.len() {
                    return Err(Error::Shape(format!("observations of length {}", obs.len())));
                }
                policies
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.greedy(&obs[i * od..(i + 1) * od]))
                    .collect()
            }
            (LoadedPolicy::Random { n_agents }, EpisodeActor::Random(rng)) => {
                Ok((0..*n_agents).map(|_| rng.gen_range(0..N_ACTIONS)).collect())
            }
            _ => Err(Error::Config("episode state does not belong to this policy".into())),
        }
    }
}

pub fn flat_obs(obs: &[crate::env::Observation]) -> Vec<f64> {
    obs.iter().flat_map(|o| o.0.iter().copied()).collect()
}

/// Undiscounted return of one greedy episode.
pub fn run_episode(policy: &LoadedPolicy, env: &mut Warehouse, seed: u64) -> Result<f64> {
    let mut obs = flat_obs(&env.reset(seed)?);
    let mut actor = policy.begin_episode(seed);
    let mut total = 0.0;
    loop {
        let a = policy.act(&mut actor, &obs)?;
        let out = env.step(&JointAction::from_indices(&a)?)?;
        total += out.reward;
        if out.done {
            return Ok(total);
        }
        obs = flat_obs(&out.observations);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over episodes.
    pub std: f64,
}

/// Greedy evaluation on `episodes` environments reset from seeds derived
/// from `seed`.
pub fn evaluate(policy: &LoadedPolicy, env_cfg: &EnvConfig, episodes: usize, seed: u64) -> Result<EvalSummary> {
    if policy.n_agents() != env_cfg.n_agents {
        return Err(Error::Incompatible(format!(
            "policy controls {} agents, environment has {}",
            policy.n_agents(),
            env_cfg.n_agents
        )));
    }
    let mut env = Warehouse::new(env_cfg.clone())?;
    let returns = (0..episodes)
        .map(|k| run_episode(policy, &mut env, eval_episode_seed(seed, k)))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&returns);
    Ok(EvalSummary { returns, mean, std })
}

/// Loads a checkpoint and evaluates it; `env` defaults to the training
/// environment recorded in the checkpoint.
pub fn evaluate_checkpoint(ck: &Checkpoint, env: Option<&EnvConfig>, episodes: usize, seed: u64) -> Result<EvalSummary> {
    let cfg = TrainConfig::parse(&ck.config_text)?;
    let env_cfg = match env {
        Some(e) => e.clone(),
        None => cfg.env_config()?,
    };
    let policy = LoadedPolicy::from_checkpoint(ck, &env_cfg)?;
    evaluate(&policy, &env_cfg, episodes, seed)
}
