//! Central finite-difference checks of the tape gradients for every
//! parameterized building block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::env::N_ACTIONS;
use crate::error::Result;
use crate::experience::{EpisodeBatch, EpisodeRecord};
use crate::ippo::{log_softmax, ppo_loss_on_tape, AgentPolicy, PpoBatch, PpoConfig};
use crate::layers::{Affine, GruCellParams};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::value_decomposition::{td_loss_on_tape, MixerKind, MixerParams, ValueConfig, ValueNets};

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so parameters with vanishing
/// gradients are judged on absolute error.
pub const FLOOR: f64 = 1e-4;
/// Central errors above this trigger the one-sided comparison.
const KINK_SCREEN: f64 = 1e-6;
/// One-sided slopes further apart than this mean the step crossed a relu or
/// abs kink; the tape gradient must then match the slope on its own side.
const KINK_GAP: f64 = 1e-3;

pub const CHECKS: [&str; 10] = [
    "affine",
    "gru",
    "agent_network",
    "mixer",
    "hypernetworks",
    "actor",
    "critic",
    "td_loss",
    "ppo_surrogate",
    "ppo_loss",
];

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

type LossFn<'a> = dyn Fn(&mut Tape, &[ParamStore]) -> Result<Var> + 'a;

/// Largest relative error between tape gradients and central differences
/// over every scalar of every store. Where the two one-sided differences
/// disagree the function is not smooth within one step, and the closer
/// one-sided difference is used instead.
pub fn compare(stores: &[ParamStore], loss: &LossFn) -> Result<f64> {
    let mut tape = Tape::new();
    let l = loss(&mut tape, stores)?;
    let grads = tape.param_gradients(l)?;
    let eval = |s: &[ParamStore]| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(&mut t, s)?;
        Ok(t.value(l).item())
    };
    let base = tape.value(l).item();
    let mut work = stores.to_vec();
    let mut worst = 0.0f64;
    for (si, store) in stores.iter().enumerate() {
        for (name, p) in store.iter() {
            let analytic = grads
                .iter()
                .find(|g| g.store == store.tag() && g.name == *name)
                .map(|g| g.grad.clone())
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            for k in 0..p.value.len() {
                let orig = p.value.data()[k];
                work[si].value_mut(name).data_mut()[k] = orig + STEP;
                let up = eval(&work)?;
                work[si].value_mut(name).data_mut()[k] = orig - STEP;
                let down = eval(&work)?;
                work[si].value_mut(name).data_mut()[k] = orig;
                let a = analytic.data()[k];
                let mut err = relative_error(a, (up - down) / (2.0 * STEP));
                if err >= KINK_SCREEN {
                    let (left, right) = ((base - down) / STEP, (up - base) / STEP);
                    if relative_error(left, right) > KINK_GAP {
                        err = err.min(relative_error(a, left)).min(relative_error(a, right));
                    }
                }
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
}

/// `Σ c ⊙ y` for a fixed random `c`, turning any output into a scalar.
fn project(tape: &mut Tape, y: Var, rng: &mut impl Rng) -> Result<Var> {
    let c = random_tensor(rng, tape.value(y).shape(), 1.0);
    let c = tape.constant(c);
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn affine_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new("affine");
    let layer = Affine::init(&mut store, "l", 4, 3, rng);
    randomize(&mut store, rng);
    let x = random_tensor(rng, &[3, 4], 1.0);
    let c = rng.gen::<u64>();
    compare(&[store], &|tape, s| {
        let b = layer.bind(tape, &s[0], true);
        let xv = tape.constant(x.clone());
        let y = b.forward(tape, xv)?;
        project(tape, y, &mut seeded(c))
    })
}

fn gru_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new("gru");
    let cell = GruCellParams::init(&mut store, "g", 4, 5, rng);
    randomize(&mut store, rng);
    let x0 = random_tensor(rng, &[3, 4], 1.0);
    let x1 = random_tensor(rng, &[3, 4], 1.0);
    let h = random_tensor(rng, &[3, 5], 1.0);
    let c = rng.gen::<u64>();
    compare(&[store], &|tape, s| {
        let g = cell.bind(tape, &s[0], true);
        let (a, b, hv) = (tape.constant(x0.clone()), tape.constant(x1.clone()), tape.constant(h.clone()));
        let h1 = g.step(tape, a, hv)?;
        let h2 = g.step(tape, b, h1)?;
        project(tape, h2, &mut seeded(c))
    })
}

fn random_batch(rng: &mut impl Rng, n: usize, od: usize, sd: usize, lens: &[usize]) -> EpisodeBatch {
    let eps: Vec<EpisodeRecord> = lens
        .iter()
        .map(|&len| {
            let mut ep = EpisodeRecord::new(
                n,
                od,
                sd,
                random_tensor(rng, &[n * od], 1.0).data(),
                random_tensor(rng, &[sd], 1.0).data(),
            );
            for t in 0..len {
                let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
                let o = random_tensor(rng, &[n * od], 1.0);
                let s = random_tensor(rng, &[sd], 1.0);
                ep.push_step(&a, f64::from(u8::from(rng.gen_bool(0.4))), t + 1 == len && rng.gen_bool(0.5), o.data(), s.data());
            }
            ep
        })
        .collect();
    let refs: Vec<&EpisodeRecord> = eps.iter().collect();
    let ids: Vec<u64> = (0..eps.len() as u64).collect();
    EpisodeBatch::from_episodes(&refs, &ids).expect("consistent episodes")
}

fn small_value_cfg() -> ValueConfig {
    ValueConfig {
        hidden_dim: 4,
        mix_embed: 3,
        hyper_hidden: 4,
        ..ValueConfig::default()
    }
}

fn agent_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut nets = ValueNets::init(&small_value_cfg(), 3, 4, 2, rng);
    randomize(&mut nets.agent_store, rng);
    let batch = random_batch(rng, 2, 3, 4, &[3, 2]);
    let inputs = nets.agent.batch_inputs(&batch, 3)?;
    let c = rng.gen::<u64>();
    compare(&[nets.agent_store.clone()], &|tape, s| {
        let q = nets.agent.forward_sequence(tape, &s[0], true, &inputs, 3, 4)?;
        project(tape, q, &mut seeded(c))
    })
}

fn mixer_setup(rng: &mut ChaCha8Rng) -> (MixerParams, ParamStore) {
    let mut store = ParamStore::new("mixer");
    let p = MixerParams::init(&mut store, 3, 5, 4, 6, rng);
    randomize(&mut store, rng);
    (p, store)
}

fn mixer_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (mixer, store) = mixer_setup(rng);
    let q = random_tensor(rng, &[4, 3], 2.0);
    let s = random_tensor(rng, &[4, 5], 1.0);
    let c = rng.gen::<u64>();
    compare(&[store], &|tape, st| {
        let (qv, sv) = (tape.constant(q.clone()), tape.constant(s.clone()));
        let y = mixer.forward(tape, &st[0], true, qv, sv)?;
        project(tape, y, &mut seeded(c))
    })
}

fn hyper_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (mixer, store) = mixer_setup(rng);
    let s = random_tensor(rng, &[4, 5], 1.0);
    let c = rng.gen::<u64>();
    compare(&[store], &|tape, st| {
        let mut r = seeded(c);
        let sv = tape.constant(s.clone());
        let w1 = mixer.hyper_w1(tape, &st[0], true, sv)?;
        let w2 = mixer.hyper_w2(tape, &st[0], true, sv)?;
        let b1 = mixer.hyper_b1(tape, &st[0], true, sv)?;
        let v = mixer.state_value(tape, &st[0], true, sv)?;
        let mut total = project(tape, w1, &mut r)?;
        for y in [w2, b1, v] {
            let p = project(tape, y, &mut r)?;
            total = tape.add(total, p)?;
        }
        Ok(total)
    })
}

fn policy_point(rng: &mut ChaCha8Rng, critic: bool) -> Result<f64> {
    let mut policy = AgentPolicy::init("policy", 4, 5, rng);
    randomize(&mut policy.store, rng);
    let obs = random_tensor(rng, &[6, 4], 1.0);
    let c = rng.gen::<u64>();
    let shape = policy.clone();
    compare(&[policy.store], &|tape, st| {
        let p = shape.with_store(st[0].clone());
        let x = tape.constant(obs.clone());
        let y = if critic {
            p.values_on_tape(tape, x)?
        } else {
            p.logits_on_tape(tape, x)?
        };
        project(tape, y, &mut seeded(c))
    })
}

fn td_point(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = small_value_cfg();
    let mut nets = ValueNets::init(&cfg, 3, 4, 2, rng);
    randomize(&mut nets.agent_store, rng);
    randomize(&mut nets.mixer_store, rng);
    let mut target = nets.snapshot();
    randomize(&mut target.agent, rng);
    randomize(&mut target.mixer, rng);
    let batch = random_batch(rng, 2, 3, 4, &[3, 2]);
    let kind = if rng.gen_bool(0.2) { MixerKind::Vdn } else { MixerKind::Qmix };
    if kind == MixerKind::Vdn {
        nets.mixer = crate::value_decomposition::Mixer::Vdn { n_agents: 2 };
    }
    let stores = [nets.agent_store.clone(), nets.mixer_store.clone()];
    compare(&stores, &|tape, st| {
        let mut n = nets.clone();
        n.agent_store = st[0].clone();
        n.mixer_store = st[1].clone();
        td_loss_on_tape(tape, &batch, &n, &target, &cfg)
    })
}

fn ppo_point(rng: &mut ChaCha8Rng, surrogate_only: bool) -> Result<f64> {
    let cfg = PpoConfig::default();
    let mut policy = AgentPolicy::init("policy", 4, 5, rng);
    randomize(&mut policy.store, rng);
    let m = 6;
    let obs = random_tensor(rng, &[m, 4], 1.0);
    let actions: Vec<usize> = (0..m).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
    let logits = policy.logits(&obs)?;
    let old_log_probs = (0..m)
        .map(|r| log_softmax(logits.row(r))[actions[r]] + rng.gen_range(-0.4..0.4))
        .collect();
    let batch = PpoBatch {
        obs,
        actions,
        old_log_probs,
        advantages: (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        returns: (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let shape = policy.clone();
    compare(&[policy.store], &|tape, st| {
        let p = shape.with_store(st[0].clone());
        let t = ppo_loss_on_tape(tape, &p, &batch, &cfg)?;
        Ok(if surrogate_only { t.surrogate } else { t.loss })
    })
}

/// Worst relative error of the named check over `points` random points.
pub fn run(check: &str, points: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let e = match check {
            "affine" => affine_point(&mut rng)?,
            "gru" => gru_point(&mut rng)?,
            "agent_network" => agent_point(&mut rng)?,
            "mixer" => mixer_point(&mut rng)?,
            "hypernetworks" => hyper_point(&mut rng)?,
            "actor" => policy_point(&mut rng, false)?,
            "critic" => policy_point(&mut rng, true)?,
            "td_loss" => td_point(&mut rng)?,
            "ppo_surrogate" => ppo_point(&mut rng, true)?,
            "ppo_loss" => ppo_point(&mut rng, false)?,
            other => {
                return Err(crate::Error::Config(format!("unknown gradient check {other}")));
            }
        };
        worst = worst.max(e);
    }
    Ok(worst)
}
