//! The training loop for every learner kind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::env::{EnvConfig, JointAction, Warehouse, N_ACTIONS};
use crate::error::{Error, Result};
use crate::experience::{EpisodeRecord, ReplayBuffer};
use crate::ippo::IppoLearner;
use crate::value_decomposition::{MixerKind, ValueLearner};

use super::config::{epsilon_at, LearnerKind, TrainConfig};
use super::metrics::{metrics_csv, timing_csv, MetricsRow};
use super::policy::{evaluate, flat_obs, EvalSummary, LoadedPolicy};
use super::{mix_seed, train_episode_seed, STREAM_ACT, STREAM_PARAMS, STREAM_REPLAY};

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub final_eval: EvalSummary,
    pub updates: u64,
}

fn value_policy(l: &ValueLearner) -> LoadedPolicy {
    LoadedPolicy::Value {
        kind: match l.cfg.mixer {
            MixerKind::Vdn => LearnerKind::Vdn,
            MixerKind::Qmix => LearnerKind::Qmix,
        },
        net: l.nets.agent.clone(),
        store: l.nets.agent_store.clone(),
    }
}

enum Learner {
    Value(Box<ValueLearner>),
    Ippo(Box<IppoLearner>),
    Random,
}

impl Learner {
    fn snapshot(&self, n_agents: usize) -> LoadedPolicy {
        match self {
            Learner::Value(l) => value_policy(l),
            Learner::Ippo(l) => LoadedPolicy::Ippo(l.policies.clone()),
            Learner::Random => LoadedPolicy::Random { n_agents },
        }
    }

    fn stores(&self) -> Vec<crate::params::ParamStore> {
        match self {
            Learner::Value(l) => vec![l.nets.agent_store.clone(), l.nets.mixer_store.clone()],
            Learner::Ippo(l) => l.policies.iter().map(|p| p.store.clone()).collect(),
            Learner::Random => Vec::new(),
        }
    }
}

/// Collects metrics rows at every multiple of `eval_interval`.
struct Recorder<'a> {
    cfg: &'a TrainConfig,
    out_dir: &'a Path,
    env_cfg: &'a EnvConfig,
    start: Instant,
    rows: Vec<MetricsRow>,
    loss_sum: f64,
    loss_count: u64,
    last_eval: Option<EvalSummary>,
}

impl Recorder<'_> {
    fn add_loss(&mut self, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss became {loss}")));
        }
        self.loss_sum += loss;
        self.loss_count += 1;
        Ok(())
    }

    fn row(&mut self, step: u64, episodes: u64, policy: &LoadedPolicy) -> Result<()> {
        let eval = evaluate(policy, self.env_cfg, self.cfg.eval_episodes, self.cfg.seed)?;
        let train_loss = (self.loss_count > 0).then(|| self.loss_sum / self.loss_count as f64);
        self.loss_sum = 0.0;
        self.loss_count = 0;
        self.rows.push(MetricsRow {
            env_step: step,
            episodes_seen: episodes,
            epsilon: match self.cfg.learner {
                LearnerKind::Qmix | LearnerKind::Vdn => epsilon_at(step, self.cfg),
                LearnerKind::Ippo => 0.0,
                LearnerKind::Random => 1.0,
            },
            train_loss,
            eval_mean_return: eval.mean,
            eval_return_std: eval.std,
            wall_seconds: self.start.elapsed().as_secs_f64(),
        });
        self.last_eval = Some(eval);
        fs::write(self.out_dir.join("metrics.csv"), metrics_csv(&self.rows))?;
        fs::write(self.out_dir.join("timing.csv"), timing_csv(&self.rows))?;
        Ok(())
    }

    fn due(&self, step: u64) -> bool {
        step.is_multiple_of(self.cfg.eval_interval)
    }
}

fn run_value(cfg: &TrainConfig, env_cfg: &EnvConfig, learner: &mut Learner, rec: &mut Recorder) -> Result<(u64, u64)> {
    let Learner::Value(l) = learner else { unreachable!() };
    let mut env = Warehouse::new(env_cfg.clone())?;
    let (n, od, sd) = (env.n_agents(), env.obs_dim(), env.state_dim());
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, env_cfg.episode_limit)?;
    let mut act_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_ACT));
    let mut replay_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_REPLAY));
    let (mut steps, mut episodes) = (0u64, 0u64);
    while steps < cfg.total_steps {
        let mut obs = flat_obs(&env.reset(train_episode_seed(cfg.seed, episodes))?);
        let mut record = EpisodeRecord::new(n, od, sd, &obs, &env.global_state());
        let mut runner = l.runner();
        loop {
            let eps = epsilon_at(steps, cfg);
            let actions = runner.act(&l.nets.agent, &l.nets.agent_store, &obs, eps, &mut act_rng)?;
            let out = env.step(&JointAction::from_indices(&actions)?)?;
            obs = flat_obs(&out.observations);
            record.push_step(&actions, out.reward, out.done, &obs, &env.global_state());
            steps += 1;
            if rec.due(steps) {
                rec.row(steps, episodes, &value_policy(l))?;
            }
            if out.done || steps >= cfg.total_steps {
                break;
            }
        }
        episodes += 1;
        buffer.push(record)?;
        if buffer.len() >= cfg.train_start() {
            let batch_size = if cfg.desk_scale {
                cfg.batch_size.min(buffer.len())
            } else {
                cfg.batch_size
            };
            let batch = buffer.sample(batch_size, &mut replay_rng)?;
            let stats = l.train(&batch)?;
            rec.add_loss(stats.loss)?;
        }
    }
    Ok((steps, episodes))
}

fn run_ippo(cfg: &TrainConfig, env_cfg: &EnvConfig, learner: &mut Learner, rec: &mut Recorder) -> Result<(u64, u64)> {
    let Learner::Ippo(l) = learner else { unreachable!() };
    let mut env = Warehouse::new(env_cfg.clone())?;
    let (mut steps, mut episodes) = (0u64, 0u64);
    let as_vecs = |o: &[crate::env::Observation]| o.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
    let mut obs = as_vecs(&env.reset(train_episode_seed(cfg.seed, 0))?);
    while steps < cfg.total_steps {
        let samples = l.act(&obs)?;
        let actions: Vec<usize> = samples.iter().map(|s| s.0).collect();
        let out = env.step(&JointAction::from_indices(&actions)?)?;
        l.record(&obs, &samples, out.reward, out.done);
        steps += 1;
        if out.done {
            episodes += 1;
            obs = as_vecs(&env.reset(train_episode_seed(cfg.seed, episodes))?);
        } else {
            obs = as_vecs(&out.observations);
        }
        if l.ready() {
            for s in l.update(&obs)? {
                rec.add_loss(s.loss)?;
            }
        }
        if rec.due(steps) {
            rec.row(steps, episodes, &LoadedPolicy::Ippo(l.policies.clone()))?;
        }
    }
    Ok((steps, episodes))
}

fn run_random(cfg: &TrainConfig, env_cfg: &EnvConfig, rec: &mut Recorder) -> Result<(u64, u64)> {
    let mut env = Warehouse::new(env_cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_ACT));
    let (mut steps, mut episodes) = (0u64, 0u64);
    env.reset(train_episode_seed(cfg.seed, 0))?;
    while steps < cfg.total_steps {
        let actions: Vec<usize> = (0..env_cfg.n_agents).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
        let out = env.step(&JointAction::from_indices(&actions)?)?;
        steps += 1;
        if out.done {
            episodes += 1;
            env.reset(train_episode_seed(cfg.seed, episodes))?;
        }
        if rec.due(steps) {
            rec.row(steps, episodes, &LoadedPolicy::Random { n_agents: env_cfg.n_agents })?;
        }
    }
    Ok((steps, episodes))
}

/// Runs a full training job and writes `metrics.csv`, `timing.csv`,
/// `config.resolved` and `checkpoint.bin` into `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let env_cfg = cfg.env_config()?;
    let resolved = cfg.resolved();
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.resolved"), &resolved)?;

    let obs_dim = crate::env::obs_dim(&env_cfg);
    let state_dim = crate::env::state_dim(&env_cfg);
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_PARAMS));
    let mut learner = match cfg.learner {
        LearnerKind::Qmix | LearnerKind::Vdn => Learner::Value(Box::new(ValueLearner::new(
            cfg.value_config(),
            obs_dim,
            state_dim,
            env_cfg.n_agents,
            &mut init_rng,
        ))),
        LearnerKind::Ippo => Learner::Ippo(Box::new(IppoLearner::new(
            cfg.ppo_config(),
            obs_dim,
            env_cfg.n_agents,
            init_rng.gen(),
        ))),
        LearnerKind::Random => Learner::Random,
    };
    let mut rec = Recorder {
        cfg,
        out_dir,
        env_cfg: &env_cfg,
        start: Instant::now(),
        rows: Vec::new(),
        loss_sum: 0.0,
        loss_count: 0,
        last_eval: None,
    };
    let (steps, episodes) = match cfg.learner {
        LearnerKind::Qmix | LearnerKind::Vdn => run_value(cfg, &env_cfg, &mut learner, &mut rec)?,
        LearnerKind::Ippo => run_ippo(cfg, &env_cfg, &mut learner, &mut rec)?,
        LearnerKind::Random => run_random(cfg, &env_cfg, &mut rec)?,
    };
    if rec.rows.last().map(|r| r.env_step) != Some(steps) {
        let policy = learner.snapshot(env_cfg.n_agents);
        rec.row(steps, episodes, &policy)?;
    }
    let updates = match &learner {
        Learner::Value(l) => l.train_iterations(),
        Learner::Ippo(l) => l.updates(),
        Learner::Random => 0,
    };
    let ck = Checkpoint {
        learner: cfg.learner.name().to_string(),
        config_text: resolved,
        stores: learner.stores(),
    };
    ck.save(&out_dir.join("checkpoint.bin"))?;
    let final_eval = rec.last_eval.clone().expect("at least one row");
    Ok(TrainOutcome {
        run_dir: out_dir.to_path_buf(),
        rows: rec.rows,
        final_eval,
        updates,
    })
}
