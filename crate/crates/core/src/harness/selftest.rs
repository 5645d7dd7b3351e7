//! Invariant suites behind `marl selftest`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{joint_action_count, EnvConfig, JointAction, Warehouse, WarehouseState, N_ACTIONS};
use crate::error::Result;
use crate::gradcheck;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::value_decomposition::{mix, select_actions, AgentRunner, Mixer, ValueConfig, ValueNets};

use super::config::{epsilon_at, TrainConfig};

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn perturb(store: &mut ParamStore, rng: &mut impl Rng) {
    let scale = rng.gen_range(0.1..3.0);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

fn random_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Raising one agent's utility never lowers the mixed value.
pub fn mixer_monotonicity(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ValueConfig::default();
    let sd = 12;
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let n = rng.gen_range(2..=6);
        let mut nets = ValueNets::init(&cfg, 4, sd, n, &mut rng);
        perturb(&mut nets.mixer_store, &mut rng);
        let q = random_vec(&mut rng, n, 10.0);
        let s = Tensor::new(vec![1, sd], random_vec(&mut rng, sd, 3.0))?;
        let i = rng.gen_range(0..n);
        let delta = 1.0 - rng.gen::<f64>();
        let mut up = q.clone();
        up[i] += delta;
        let base = mix(&Tensor::new(vec![1, n], q)?, &s, &nets.mixer, &nets.mixer_store)?.item();
        let raised = mix(&Tensor::new(vec![1, n], up)?, &s, &nets.mixer, &nets.mixer_store)?.item();
        worst = worst.min(raised - base);
    }
    Ok((worst >= -1e-9, format!("{trials} trials, smallest change {worst:.3e}")))
}

fn joint_actions(n: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..N_ACTIONS).map(move |a| {
                    let mut v = p.clone();
                    v.push(a);
                    v
                })
            })
            .collect();
    }
    out
}

/// Per-agent greedy actions reach the maximum of the mixed value over all
/// joint actions.
pub fn decentralized_argmax(n_agents: usize, states: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ValueConfig::default();
    let (od, sd) = (9, 12);
    let joint = joint_actions(n_agents);
    let mut mismatches = 0;
    for _ in 0..states {
        let mut nets = ValueNets::init(&cfg, od, sd, n_agents, &mut rng);
        perturb(&mut nets.agent_store, &mut rng);
        perturb(&mut nets.mixer_store, &mut rng);
        let mut runner = AgentRunner::new(&nets.agent);
        let obs = random_vec(&mut rng, n_agents * od, 1.0);
        let qs = runner.q_values(&nets.agent, &nets.agent_store, &obs)?;
        let s = random_vec(&mut rng, sd, 2.0);
        let chosen: Vec<f64> = joint
            .iter()
            .flat_map(|ja| ja.iter().enumerate().map(|(i, &a)| qs.get(i, a)).collect::<Vec<_>>())
            .collect();
        let tiled: Vec<f64> = joint.iter().flat_map(|_| s.iter().copied()).collect();
        let tot = mix(
            &Tensor::new(vec![joint.len(), n_agents], chosen)?,
            &Tensor::new(vec![joint.len(), sd], tiled)?,
            &nets.mixer,
            &nets.mixer_store,
        )?;
        let best = tot.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let greedy = select_actions(&qs, 0.0, &mut rng);
        let k = joint.iter().position(|ja| *ja == greedy).expect("enumerated");
        if tot.data()[k] != best {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0,
        format!("{n_agents} agents, {states} states, {mismatches} mismatches over {} joint actions", joint.len()),
    ))
}

/// Central finite differences for every differentiable building block.
pub fn gradient_fidelity(points: usize, seed: u64) -> Result<(bool, String)> {
    let mut worst: (f64, &str) = (0.0, "");
    for check in gradcheck::CHECKS {
        let e = gradcheck::run(check, points, seed)?;
        if e > worst.0 {
            worst = (e, check);
        }
    }
    Ok((
        worst.0 < 1e-4,
        format!("{} checks x {points} points, worst {:.2e} ({})", gradcheck::CHECKS.len(), worst.0, worst.1),
    ))
}

/// The additive mixer returns the plain sum.
pub fn vdn_reduction(inputs: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..inputs {
        let n = rng.gen_range(1..=8);
        let mixer = Mixer::Vdn { n_agents: n };
        let rows = rng.gen_range(1..=4);
        let q = random_vec(&mut rng, rows * n, 100.0);
        let out = mix(
            &Tensor::new(vec![rows, n], q.clone())?,
            &Tensor::zeros(&[rows, 3]),
            &mixer,
            &ParamStore::new("mixer"),
        )?;
        for r in 0..rows {
            let sum: f64 = q[r * n..(r + 1) * n].iter().sum();
            worst = worst.max((out.data()[r] - sum).abs());
        }
    }
    Ok((worst <= 1e-12, format!("{inputs} inputs, max deviation {worst:.1e}")))
}

pub fn joint_action_arithmetic() -> Result<(bool, String)> {
    let two = joint_action_count(2);
    let six = joint_action_count(6);
    Ok((two == 25 && six == 15_625, format!("2 agents: {two}, 6 agents: {six}")))
}

fn deliveries(cfg: &EnvConfig, before: &WarehouseState, after: &WarehouseState) -> usize {
    (0..cfg.n_agents)
        .filter(|&a| {
            after.carrying[a].is_some_and(|s| before.requested.contains(&s))
                && cfg.goal_cells.contains(&after.agents[a].pos)
        })
        .count()
}

/// Random play on a preset: exclusion, conservation, reward accounting and
/// replay determinism.
pub fn env_sweep(preset: &str, seeds: u64, steps: usize) -> Result<(bool, String)> {
    let cfg = EnvConfig::preset(preset)?;
    let mut violations = Vec::new();
    let mut delivered = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = Warehouse::new(cfg.clone())?;
        let mut replay = Warehouse::new(cfg.clone())?;
        let mut episode_seed = seed;
        env.reset(episode_seed)?;
        replay.reset(episode_seed)?;
        for t in 0..steps {
            if env.is_done() {
                episode_seed = rng.gen();
                env.reset(episode_seed)?;
                replay.reset(episode_seed)?;
            }
            let before = env.state().clone();
            let idx: Vec<usize> = (0..cfg.n_agents).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
            let ja = JointAction::from_indices(&idx)?;
            let out = env.step(&ja)?;
            let again = replay.step(&ja)?;
            if let Err(e) = env.state().check_invariants(&cfg) {
                violations.push(format!("seed {seed} step {t}: {e}"));
            }
            if out.reward != deliveries(&cfg, &before, env.state()) as f64 {
                violations.push(format!("seed {seed} step {t}: reward {} does not match deliveries", out.reward));
            }
            if env.state() != replay.state() || out.observations != again.observations || out.reward != again.reward {
                violations.push(format!("seed {seed} step {t}: replay diverged"));
            }
            delivered += out.reward;
        }
    }
    let detail = match violations.first() {
        None => format!("{seeds} seeds x {steps} steps, {delivered} deliveries, 0 violations"),
        Some(v) => format!("{} violations, first: {v}", violations.len()),
    };
    Ok((violations.is_empty(), detail))
}

pub fn epsilon_schedule() -> Result<(bool, String)> {
    let mut cfg = TrainConfig::default();
    cfg.epsilon_start = 1.0;
    cfg.epsilon_end = 0.05;
    cfg.epsilon_anneal_steps = 50_000;
    let a = cfg.epsilon_anneal_steps;
    let points = [(0, 1.0), (a, 0.05), (a / 2, 0.525), (10 * a, 0.05)];
    let exact = points.iter().all(|&(s, want)| (epsilon_at(s, &cfg) - want).abs() < 1e-12);
    let grid: Vec<f64> = (0..=2 * a).step_by(7).map(|s| epsilon_at(s, &cfg)).collect();
    let monotone = grid.windows(2).all(|w| w[1] <= w[0]);
    Ok((
        exact && monotone,
        format!(
            "eps(0)={}, eps({a})={}, eps({})={}, nonincreasing over {} points: {monotone}",
            epsilon_at(0, &cfg),
            epsilon_at(a, &cfg),
            a / 2,
            epsilon_at(a / 2, &cfg),
            grid.len()
        ),
    ))
}

/// Runs every suite at full size.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        timed("mixer monotonicity", || mixer_monotonicity(10_000, seed)),
        timed("decentralized argmax, 2 agents", || decentralized_argmax(2, 100, seed)),
        timed("decentralized argmax, 3 agents", || decentralized_argmax(3, 100, seed)),
        timed("gradient fidelity", || gradient_fidelity(100, seed)),
        timed("vdn reduction", || vdn_reduction(1_000, seed)),
        timed("joint action arithmetic", joint_action_arithmetic),
        timed("environment invariants", || env_sweep("tiny-2ag", 100, 1_000)),
        timed("epsilon schedule", epsilon_schedule),
    ]
}
