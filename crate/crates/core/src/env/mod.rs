//! Grid-world warehouse with a sparse shared delivery reward.
//!
//! Agents move on a grid, pick up shelves and carry requested ones to goal
//! cells. Each delivery of a requested shelf pays the team `+1.0` and a new
//! request is drawn. Every agent only sees a square window around itself.

mod config;

use std::collections::BTreeSet;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{joint_action_count, EnvConfig, Layout, Pos, PRESETS};

use crate::error::{Error, Result};

pub const N_ACTIONS: usize = 5;
/// Per-window-cell features: wall, other agent, shelf, requested shelf, goal.
pub const CELL_FEATURES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn left(self) -> Self {
        Self::ALL[(self.index() + 3) % 4]
    }

    pub fn right(self) -> Self {
        Self::ALL[(self.index() + 1) % 4]
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    TurnLeft,
    TurnRight,
    Forward,
    LoadUnload,
    Noop,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::TurnLeft,
        Action::TurnRight,
        Action::Forward,
        Action::LoadUnload,
        Action::Noop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Action(format!("action index {i} out of range")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointAction(pub Vec<Action>);

impl JointAction {
    pub fn from_indices(idx: &[usize]) -> Result<Self> {
        idx.iter().map(|&i| Action::from_index(i)).collect::<Result<_>>().map(JointAction)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.0.iter().map(|a| a.index()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AgentPose {
    pub pos: Pos,
    pub heading: Heading,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShelfPlace {
    Floor(Pos),
    Carried(usize),
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WarehouseState {
    pub agents: Vec<AgentPose>,
    pub carrying: Vec<Option<usize>>,
    pub shelves: Vec<ShelfPlace>,
    pub requested: BTreeSet<usize>,
    pub step: usize,
}

impl WarehouseState {
    pub fn agent_at(&self, p: Pos) -> Option<usize> {
        self.agents.iter().position(|a| a.pos == p)
    }

    pub fn floor_shelf_at(&self, p: Pos) -> Option<usize> {
        self.shelves.iter().position(|s| *s == ShelfPlace::Floor(p))
    }

    pub fn shelf_pos(&self, shelf: usize) -> Pos {
        match self.shelves[shelf] {
            ShelfPlace::Floor(p) => p,
            ShelfPlace::Carried(a) => self.agents[a].pos,
        }
    }

    /// Checks exclusion, conservation and request-count invariants.
    pub fn check_invariants(&self, cfg: &EnvConfig) -> std::result::Result<(), String> {
        if self.agents.len() != cfg.n_agents || self.carrying.len() != cfg.n_agents {
            return Err("agent count mismatch".into());
        }
        let cells: BTreeSet<Pos> = self.agents.iter().map(|a| a.pos).collect();
        if cells.len() != self.agents.len() {
            return Err("two agents share a cell".into());
        }
        if let Some(a) = self.agents.iter().find(|a| !cfg.in_grid(a.pos)) {
            return Err(format!("agent outside grid at {}", a.pos));
        }
        if self.shelves.len() != cfg.n_shelves {
            return Err("shelf count changed".into());
        }
        let mut floor = BTreeSet::new();
        for (s, place) in self.shelves.iter().enumerate() {
            match *place {
                ShelfPlace::Floor(p) => {
                    if !floor.insert(p) {
                        return Err(format!("two shelves at {p}"));
                    }
                    if self.carrying.contains(&Some(s)) {
                        return Err(format!("shelf {s} both on floor and carried"));
                    }
                }
                ShelfPlace::Carried(a) => {
                    if self.carrying.get(a) != Some(&Some(s)) {
                        return Err(format!("shelf {s} carried by {a} who does not hold it"));
                    }
                    if self.carrying.iter().filter(|c| **c == Some(s)).count() != 1 {
                        return Err(format!("shelf {s} held by several agents"));
                    }
                }
            }
        }
        for (a, c) in self.carrying.iter().enumerate() {
            if let Some(s) = *c {
                if self.shelves.get(s) != Some(&ShelfPlace::Carried(a)) {
                    return Err(format!("agent {a} holds shelf {s} inconsistently"));
                }
            }
        }
        if self.requested.len() != cfg.n_requested {
            return Err(format!(
                "{} requests outstanding, expected {}",
                self.requested.len(),
                cfg.n_requested
            ));
        }
        if self.requested.iter().any(|&s| s >= cfg.n_shelves) {
            return Err("request for unknown shelf".into());
        }
        Ok(())
    }
}

/// Per-agent local view, all entries in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn obs_dim(cfg: &EnvConfig) -> usize {
    let w = 2 * cfg.obs_radius + 1;
    w * w * CELL_FEATURES + 4 + 1
}

/// Global state vector: per agent row/column one-hots, heading one-hot and
/// carrying flag; per cell a shelf flag and a requested-shelf flag.
pub fn state_dim(cfg: &EnvConfig) -> usize {
    cfg.n_agents * (cfg.grid_height + cfg.grid_width + 5) + 2 * cfg.n_cells()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub deliveries: usize,
    pub observations: Vec<Observation>,
}

#[derive(Clone, Debug)]
pub struct Warehouse {
    config: EnvConfig,
    state: WarehouseState,
    rng: ChaCha8Rng,
    goal_mask: Vec<bool>,
    slot_mask: Vec<bool>,
}

impl Warehouse {
    /// Builds the environment and resets it with `config.seed`.
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let mut goal_mask = vec![false; config.n_cells()];
        let mut slot_mask = vec![false; config.n_cells()];
        for p in &config.goal_cells {
            goal_mask[p.row * config.grid_width + p.col] = true;
        }
        for p in &config.shelf_slots {
            slot_mask[p.row * config.grid_width + p.col] = true;
        }
        let seed = config.seed;
        let mut env = Self {
            state: WarehouseState {
                agents: Vec::new(),
                carrying: Vec::new(),
                shelves: Vec::new(),
                requested: BTreeSet::new(),
                step: 0,
            },
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            goal_mask,
            slot_mask,
        };
        env.reset(seed)?;
        Ok(env)
    }

    /// Starts from a hand-built state. The generator used for later request
    /// draws is seeded with `seed`.
    pub fn from_state(config: EnvConfig, state: WarehouseState, seed: u64) -> Result<Self> {
        let mut env = Self::new(config)?;
        state
            .check_invariants(&env.config)
            .map_err(Error::Placement)?;
        env.state = state;
        env.rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &WarehouseState {
        &self.state
    }

    pub fn obs_dim(&self) -> usize {
        obs_dim(&self.config)
    }

    pub fn state_dim(&self) -> usize {
        state_dim(&self.config)
    }

    pub fn n_agents(&self) -> usize {
        self.config.n_agents
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.episode_limit
    }

    fn idx(&self, p: Pos) -> usize {
        p.row * self.config.grid_width + p.col
    }

    pub fn is_goal(&self, p: Pos) -> bool {
        self.goal_mask[self.idx(p)]
    }

    pub fn is_slot(&self, p: Pos) -> bool {
        self.slot_mask[self.idx(p)]
    }

    pub fn reset(&mut self, seed: u64) -> Result<Vec<Observation>> {
        let cfg = &self.config;
        cfg.check_placement()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut slots = cfg.shelf_slots.clone();
        slots.shuffle(&mut rng);
        let mut shelf_cells = slots[..cfg.n_shelves].to_vec();
        shelf_cells.sort();

        let mut free: Vec<Pos> = (0..cfg.grid_height)
            .flat_map(|r| (0..cfg.grid_width).map(move |c| Pos::new(r, c)))
            .filter(|p| !shelf_cells.contains(p))
            .collect();
        free.shuffle(&mut rng);
        let agents = free[..cfg.n_agents]
            .iter()
            .map(|&pos| AgentPose {
                pos,
                heading: Heading::ALL[rng.gen_range(0..4)],
            })
            .collect();

        let requested = index::sample(&mut rng, cfg.n_shelves, cfg.n_requested)
            .into_iter()
            .collect();

        self.state = WarehouseState {
            agents,
            carrying: vec![None; cfg.n_agents],
            shelves: shelf_cells.into_iter().map(ShelfPlace::Floor).collect(),
            requested,
            step: 0,
        };
        self.rng = rng;
        Ok(self.observe_all())
    }

    pub fn step(&mut self, actions: &JointAction) -> Result<StepOutcome> {
        let n = self.config.n_agents;
        if actions.len() != n {
            return Err(Error::Action(format!(
                "expected {n} actions, got {}",
                actions.len()
            )));
        }
        if self.is_done() {
            return Err(Error::EpisodeDone);
        }

        for (pose, a) in self.state.agents.iter_mut().zip(&actions.0) {
            match a {
                Action::TurnLeft => pose.heading = pose.heading.left(),
                Action::TurnRight => pose.heading = pose.heading.right(),
                _ => {}
            }
        }

        self.resolve_moves(actions);

        for (a, act) in actions.0.iter().enumerate() {
            if *act != Action::LoadUnload {
                continue;
            }
            let pos = self.state.agents[a].pos;
            match self.state.carrying[a] {
                Some(s) => {
                    if self.is_slot(pos) && self.state.floor_shelf_at(pos).is_none() {
                        self.state.shelves[s] = ShelfPlace::Floor(pos);
                        self.state.carrying[a] = None;
                    }
                }
                None => {
                    if let Some(s) = self.state.floor_shelf_at(pos) {
                        self.state.shelves[s] = ShelfPlace::Carried(a);
                        self.state.carrying[a] = Some(s);
                    }
                }
            }
        }

        let delivered: Vec<usize> = (0..n)
            .filter_map(|a| {
                let s = self.state.carrying[a]?;
                (self.is_goal(self.state.agents[a].pos) && self.state.requested.contains(&s))
                    .then_some(s)
            })
            .collect();
        for s in &delivered {
            self.state.requested.remove(s);
        }
        for _ in &delivered {
            let pool: Vec<usize> = (0..self.config.n_shelves)
                .filter(|s| !self.state.requested.contains(s) && !delivered.contains(s))
                .collect();
            if let Some(&s) = pool.choose(&mut self.rng) {
                self.state.requested.insert(s);
            }
        }

        self.state.step += 1;
        Ok(StepOutcome {
            reward: delivered.len() as f64,
            done: self.is_done(),
            deliveries: delivered.len(),
            observations: self.observe_all(),
        })
    }

    /// Simultaneous move resolution. A move is cancelled when its target is
    /// held by an agent that stays, is targeted by another mover, or would
    /// swap two agents; cancellation repeats until stable.
    fn resolve_moves(&mut self, actions: &JointAction) {
        let cfg = &self.config;
        let st = &self.state;
        let mut target: Vec<Option<Pos>> = st
            .agents
            .iter()
            .zip(&actions.0)
            .enumerate()
            .map(|(a, (pose, act))| {
                if *act != Action::Forward {
                    return None;
                }
                let (dr, dc) = pose.heading.delta();
                let r = pose.pos.row.checked_add_signed(dr)?;
                let c = pose.pos.col.checked_add_signed(dc)?;
                let p = Pos::new(r, c);
                if !cfg.in_grid(p) {
                    return None;
                }
                if st.carrying[a].is_some() && st.floor_shelf_at(p).is_some() {
                    return None;
                }
                Some(p)
            })
            .collect();

        loop {
            let mut cancel = vec![false; target.len()];
            for i in 0..target.len() {
                let Some(t) = target[i] else { continue };
                for j in 0..target.len() {
                    if i == j {
                        continue;
                    }
                    let occupant_stays = st.agents[j].pos == t && target[j].is_none();
                    let contested = target[j] == Some(t);
                    let swap = st.agents[j].pos == t && target[j] == Some(st.agents[i].pos);
                    if occupant_stays || contested || swap {
                        cancel[i] = true;
                        break;
                    }
                }
            }
            if !cancel.contains(&true) {
                break;
            }
            for (t, c) in target.iter_mut().zip(cancel) {
                if c {
                    *t = None;
                }
            }
        }

        for (pose, t) in self.state.agents.iter_mut().zip(target) {
            if let Some(p) = t {
                pose.pos = p;
            }
        }
    }

    pub fn observe(&self, agent: usize) -> Result<Observation> {
        if agent >= self.config.n_agents {
            return Err(Error::Action(format!(
                "agent index {agent} out of range for {} agents",
                self.config.n_agents
            )));
        }
        Ok(self.encode_obs(agent))
    }

    pub fn observe_all(&self) -> Vec<Observation> {
        (0..self.config.n_agents).map(|a| self.encode_obs(a)).collect()
    }

    fn encode_obs(&self, agent: usize) -> Observation {
        let cfg = &self.config;
        let st = &self.state;
        let r = cfg.obs_radius as isize;
        let me = st.agents[agent];
        let mut v = Vec::with_capacity(obs_dim(cfg));
        for dr in -r..=r {
            for dc in -r..=r {
                let cell = me
                    .pos
                    .row
                    .checked_add_signed(dr)
                    .zip(me.pos.col.checked_add_signed(dc))
                    .map(|(row, col)| Pos::new(row, col))
                    .filter(|p| cfg.in_grid(*p));
                let Some(p) = cell else {
                    v.extend_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0]);
                    continue;
                };
                let other = st.agent_at(p).is_some_and(|a| a != agent);
                let shelf = st.floor_shelf_at(p).or_else(|| {
                    st.agent_at(p).and_then(|a| st.carrying[a])
                });
                v.push(0.0);
                v.push(f64::from(u8::from(other)));
                v.push(f64::from(u8::from(shelf.is_some())));
                v.push(f64::from(u8::from(
                    shelf.is_some_and(|s| st.requested.contains(&s)),
                )));
                v.push(f64::from(u8::from(self.is_goal(p))));
            }
        }
        for h in Heading::ALL {
            v.push(f64::from(u8::from(me.heading == h)));
        }
        v.push(f64::from(u8::from(st.carrying[agent].is_some())));
        Observation(v)
    }

    pub fn global_state(&self) -> Vec<f64> {
        let cfg = &self.config;
        let st = &self.state;
        let (h, w) = (cfg.grid_height, cfg.grid_width);
        let mut v = vec![0.0; state_dim(cfg)];
        let per_agent = h + w + 5;
        for (a, pose) in st.agents.iter().enumerate() {
            let base = a * per_agent;
            v[base + pose.pos.row] = 1.0;
            v[base + h + pose.pos.col] = 1.0;
            v[base + h + w + pose.heading.index()] = 1.0;
            if st.carrying[a].is_some() {
                v[base + h + w + 4] = 1.0;
            }
        }
        let grid = cfg.n_agents * per_agent;
        for s in 0..st.shelves.len() {
            let c = self.idx(st.shelf_pos(s));
            v[grid + 2 * c] = 1.0;
            if st.requested.contains(&s) {
                v[grid + 2 * c + 1] = 1.0;
            }
        }
        v
    }

    /// One glyph per cell: `A` agent, `C` agent carrying a shelf, `R`
    /// requested shelf, `S` other shelf, `G` goal, `.` empty.
    pub fn render_ascii(&self) -> String {
        render_ascii(&self.config, &self.state)
    }
}

pub fn render_ascii(cfg: &EnvConfig, st: &WarehouseState) -> String {
    let mut out = String::with_capacity(cfg.n_cells() + cfg.grid_height);
    for r in 0..cfg.grid_height {
        for c in 0..cfg.grid_width {
            let p = Pos::new(r, c);
            let ch = if let Some(a) = st.agent_at(p) {
                if st.carrying[a].is_some() {
                    'C'
                } else {
                    'A'
                }
            } else if let Some(s) = st.floor_shelf_at(p) {
                if st.requested.contains(&s) {
                    'R'
                } else {
                    'S'
                }
            } else if cfg.goal_cells.contains(&p) {
                'G'
            } else {
                '.'
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;
