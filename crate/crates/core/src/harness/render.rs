//! ASCII playback of a greedy episode.

use crate::env::{EnvConfig, JointAction, Warehouse};
use crate::error::Result;

use super::policy::{flat_obs, LoadedPolicy};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub step: usize,
    pub actions: Vec<usize>,
    pub total_return: f64,
    pub grid: String,
}

impl Frame {
    pub fn to_text(&self) -> String {
        let acts: Vec<String> = self.actions.iter().map(|a| a.to_string()).collect();
        format!(
            "step {} actions [{}] return {}\n{}",
            self.step,
            acts.join(" "),
            self.total_return,
            self.grid
        )
    }
}

/// Plays one episode from `seed`; the first frame is the reset state.
pub fn playback(policy: &LoadedPolicy, env_cfg: &EnvConfig, seed: u64) -> Result<Vec<Frame>> {
    let mut env = Warehouse::new(env_cfg.clone())?;
    let mut obs = flat_obs(&env.reset(seed)?);
    let mut actor = policy.begin_episode(seed);
    let mut total = 0.0;
    let mut frames = vec![Frame {
        step: 0,
        actions: Vec::new(),
        total_return: 0.0,
        grid: env.render_ascii(),
    }];
    loop {
        let actions = policy.act(&mut actor, &obs)?;
        let out = env.step(&JointAction::from_indices(&actions)?)?;
        total += out.reward;
        frames.push(Frame {
            step: env.state().step,
            actions,
            total_return: total,
            grid: env.render_ascii(),
        });
        if out.done {
            return Ok(frames);
        }
        obs = flat_obs(&out.observations);
    }
}
