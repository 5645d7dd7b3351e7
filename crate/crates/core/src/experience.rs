//! Whole-episode replay storage for recurrent value learners.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};

/// One recorded episode of length `len`.
///
/// Observations and global states hold `len + 1` entries: the last one is
/// what the agents see after the final transition and feeds the TD target.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// `[len + 1][n_agents][obs_dim]`
    pub obs: Vec<f64>,
    /// `[len + 1][state_dim]`
    pub states: Vec<f64>,
    /// `[len][n_agents]`
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl EpisodeRecord {
    pub fn new(n_agents: usize, obs_dim: usize, state_dim: usize, obs: &[f64], state: &[f64]) -> Self {
        debug_assert_eq!(obs.len(), n_agents * obs_dim);
        debug_assert_eq!(state.len(), state_dim);
        Self {
            n_agents,
            obs_dim,
            state_dim,
            obs: obs.to_vec(),
            states: state.to_vec(),
            actions: Vec::new(),
            rewards: Vec::new(),
            dones: Vec::new(),
        }
    }

    pub fn push_step(&mut self, actions: &[usize], reward: f64, done: bool, next_obs: &[f64], next_state: &[f64]) {
        debug_assert_eq!(actions.len(), self.n_agents);
        self.actions.extend_from_slice(actions);
        self.rewards.push(reward);
        self.dones.push(done);
        self.obs.extend_from_slice(next_obs);
        self.states.extend_from_slice(next_state);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Validity mask padded to `padded_len`.
    pub fn mask(&self, padded_len: usize) -> Vec<f64> {
        (0..padded_len).map(|t| f64::from(u8::from(t < self.len()))).collect()
    }

    fn check(&self) -> Result<()> {
        let t = self.len();
        let ok = self.obs.len() == (t + 1) * self.n_agents * self.obs_dim
            && self.states.len() == (t + 1) * self.state_dim
            && self.actions.len() == t * self.n_agents
            && self.dones.len() == t;
        if ok {
            Ok(())
        } else {
            Err(Error::Replay("episode arrays are inconsistent".into()))
        }
    }
}

/// Episodes stacked and zero-padded to the longest member.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub batch_size: usize,
    pub max_len: usize,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    /// `[B][T + 1][n][obs_dim]`
    pub obs: Vec<f64>,
    /// `[B][T + 1][state_dim]`
    pub states: Vec<f64>,
    /// `[B][T][n]`
    pub actions: Vec<usize>,
    /// `[B][T]`
    pub rewards: Vec<f64>,
    pub dones: Vec<f64>,
    pub mask: Vec<f64>,
    pub episode_ids: Vec<u64>,
}

impl EpisodeBatch {
    pub fn from_episodes(episodes: &[&EpisodeRecord], ids: &[u64]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::Replay("empty batch".into()))?;
        let (n, od, sd) = (first.n_agents, first.obs_dim, first.state_dim);
        if episodes
            .iter()
            .any(|e| (e.n_agents, e.obs_dim, e.state_dim) != (n, od, sd))
        {
            return Err(Error::Replay("episodes of different shapes in one batch".into()));
        }
        let b = episodes.len();
        let t = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        let mut batch = Self {
            batch_size: b,
            max_len: t,
            n_agents: n,
            obs_dim: od,
            state_dim: sd,
            obs: vec![0.0; b * (t + 1) * n * od],
            states: vec![0.0; b * (t + 1) * sd],
            actions: vec![0; b * t * n],
            rewards: vec![0.0; b * t],
            dones: vec![1.0; b * t],
            mask: vec![0.0; b * t],
            episode_ids: ids.to_vec(),
        };
        for (k, e) in episodes.iter().enumerate() {
            let len = e.len();
            let ob = k * (t + 1) * n * od;
            batch.obs[ob..ob + e.obs.len()].copy_from_slice(&e.obs);
            let sb = k * (t + 1) * sd;
            batch.states[sb..sb + e.states.len()].copy_from_slice(&e.states);
            let ab = k * t * n;
            batch.actions[ab..ab + e.actions.len()].copy_from_slice(&e.actions);
            for s in 0..len {
                batch.rewards[k * t + s] = e.rewards[s];
                batch.dones[k * t + s] = f64::from(u8::from(e.dones[s]));
                batch.mask[k * t + s] = 1.0;
            }
        }
        Ok(batch)
    }

    pub fn obs_at(&self, b: usize, t: usize, agent: usize) -> &[f64] {
        let od = self.obs_dim;
        let base = ((b * (self.max_len + 1) + t) * self.n_agents + agent) * od;
        &self.obs[base..base + od]
    }

    pub fn state_at(&self, b: usize, t: usize) -> &[f64] {
        let sd = self.state_dim;
        let base = (b * (self.max_len + 1) + t) * sd;
        &self.states[base..base + sd]
    }

    pub fn action_at(&self, b: usize, t: usize, agent: usize) -> usize {
        self.actions[(b * self.max_len + t) * self.n_agents + agent]
    }

    pub fn at(&self, field: &[f64], b: usize, t: usize) -> f64 {
        field[b * self.max_len + t]
    }

    pub fn valid_steps(&self) -> f64 {
        self.mask.iter().sum()
    }
}

/// FIFO ring of whole episodes.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episode_limit: usize,
    episodes: VecDeque<(u64, EpisodeRecord)>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, episode_limit: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Replay("capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            episode_limit,
            episodes: VecDeque::with_capacity(capacity.min(4096)),
            inserted: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of episodes ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Stores an episode, evicting the oldest when full. Returns its id.
    pub fn push(&mut self, episode: EpisodeRecord) -> Result<u64> {
        if episode.len() > self.episode_limit {
            return Err(Error::Replay(format!(
                "episode of length {} exceeds limit {}",
                episode.len(),
                self.episode_limit
            )));
        }
        episode.check()?;
        if let Some((_, e)) = self.episodes.front() {
            if (e.n_agents, e.obs_dim, e.state_dim)
                != (episode.n_agents, episode.obs_dim, episode.state_dim)
            {
                return Err(Error::Replay("episode shape differs from stored ones".into()));
            }
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        let id = self.inserted;
        self.episodes.push_back((id, episode));
        self.inserted += 1;
        Ok(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.episodes.iter().map(|(id, _)| *id)
    }

    pub fn get(&self, index: usize) -> Option<&EpisodeRecord> {
        self.episodes.get(index).map(|(_, e)| e)
    }

    /// Uniform sampling with replacement.
    pub fn sample(&self, batch_size: usize, rng: &mut impl Rng) -> Result<EpisodeBatch> {
        if batch_size == 0 || self.episodes.len() < batch_size {
            return Err(Error::NotReady {
                have: self.episodes.len(),
                need: batch_size.max(1),
            });
        }
        let picks: Vec<usize> = (0..batch_size)
            .map(|_| rng.gen_range(0..self.episodes.len()))
            .collect();
        let eps: Vec<&EpisodeRecord> = picks.iter().map(|&i| &self.episodes[i].1).collect();
        let ids: Vec<u64> = picks.iter().map(|&i| self.episodes[i].0).collect();
        EpisodeBatch::from_episodes(&eps, &ids)
    }
}
