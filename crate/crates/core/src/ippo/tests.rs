use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn small_cfg() -> PpoConfig {
    PpoConfig {
        hidden_dim: 4,
        horizon: 16,
        minibatch_size: 8,
        ..PpoConfig::default()
    }
}

fn toy_rollout(rng: &mut impl Rng, policy: &AgentPolicy, n: usize) -> RolloutBuffer {
    let mut buf = RolloutBuffer::new(policy.obs_dim);
    for t in 0..n {
        let obs: Vec<f64> = (0..policy.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, lp, v) = sample_action(&obs, policy, rng).unwrap();
        let r = f64::from(u8::from(rng.gen_bool(0.3)));
        buf.push(&obs, a, lp, r, v, t % 5 == 4);
    }
    buf.bootstrap_value = 0.1;
    buf
}

#[test]
fn uniform_logits_are_uniform() {
    let lp = log_softmax(&[0.3; 5]);
    for l in lp {
        assert!((l.exp() - 0.2).abs() < 1e-15);
    }
}

#[test]
fn dominant_logit_is_almost_always_drawn() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = [0.0, 0.0, 50.0, 0.0, 0.0];
    let hits = (0..10_000).filter(|_| sample_from_logits(&logits, &mut rng).0 == 2).count();
    assert!(hits as f64 / 10_000.0 > 0.999);
}

#[test]
fn log_prob_matches_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let policy = AgentPolicy::init("p", 3, 4, &mut rng);
    for _ in 0..100 {
        let obs: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, lp, v) = sample_action(&obs, &policy, &mut rng).unwrap();
        let logits = policy.logits(&Tensor::new(vec![1, 3], obs.clone()).unwrap()).unwrap();
        let z: f64 = logits.data().iter().map(|x| x.exp()).sum();
        assert!((lp.exp() - logits.data()[a].exp() / z).abs() < 1e-12);
        assert_eq!(v, policy.value(&obs).unwrap());
    }
}

#[test]
fn sampling_frequencies_follow_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = [1.0, 0.0, -1.0, 0.5, 0.2];
    let p: Vec<f64> = log_softmax(&logits).iter().map(|l| l.exp()).collect();
    let n = 50_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[sample_from_logits(&logits, &mut rng).0] += 1;
    }
    for (c, q) in counts.iter().zip(&p) {
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        assert!((*c as f64 - n as f64 * q).abs() < 4.0 * sigma);
    }
}

fn three_step() -> RolloutBuffer {
    let mut buf = RolloutBuffer::new(1);
    for (r, v) in [(1.0, 0.5), (0.0, 0.4), (2.0, 0.3)] {
        buf.push(&[0.0], 0, 0.0, r, v, false);
    }
    buf.bootstrap_value = 0.2;
    buf
}

#[test]
fn gae_lambda_zero_is_td_error() {
    let buf = three_step();
    let (adv, ret) = compute_gae(&buf, 0.9, 0.0).unwrap();
    let expect = [1.0 + 0.9 * 0.4 - 0.5, 0.9 * 0.3 - 0.4, 2.0 + 0.9 * 0.2 - 0.3];
    for k in 0..3 {
        assert!((adv[k] - expect[k]).abs() < 1e-12);
        assert!((ret[k] - adv[k] - buf.values[k]).abs() < 1e-15);
    }
}

#[test]
fn gae_gamma_zero_is_reward_minus_value() {
    let buf = three_step();
    let (adv, _) = compute_gae(&buf, 0.0, 0.95).unwrap();
    for k in 0..3 {
        assert!((adv[k] - (buf.rewards[k] - buf.values[k])).abs() < 1e-15);
    }
}

#[test]
fn gae_three_step_hand_trace() {
    // δ = [0.896, -0.103, 1.898], γλ = 0.9405
    // A2 = 1.898, A1 = -0.103 + 0.9405·1.898, A0 = 0.896 + 0.9405·A1
    let (adv, ret) = compute_gae(&three_step(), 0.99, 0.95).unwrap();
    let expect = [2.4779858945, 1.682069, 1.898];
    for k in 0..3 {
        assert!((adv[k] - expect[k]).abs() < 1e-10, "{adv:?}");
    }
    assert!((ret[0] - 2.9779858945).abs() < 1e-10);
}

#[test]
fn gae_stops_at_episode_boundaries() {
    let mut buf = three_step();
    buf.dones[1] = true;
    let (adv, _) = compute_gae(&buf, 0.99, 0.95).unwrap();
    assert!((adv[1] - (0.0 - 0.4)).abs() < 1e-12);
}

#[test]
fn gae_on_empty_rollout_fails() {
    assert!(compute_gae(&RolloutBuffer::new(2), 0.99, 0.95).is_err());
}

fn batch_for(policy: &AgentPolicy, rng: &mut impl Rng, m: usize, shift: f64, adv: f64) -> PpoBatch {
    let obs = Tensor::new(vec![m, policy.obs_dim], (0..m * policy.obs_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let actions: Vec<usize> = (0..m).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
    let logits = policy.logits(&obs).unwrap();
    let old = (0..m)
        .map(|r| log_softmax(logits.row(r))[actions[r]] + shift)
        .collect();
    PpoBatch {
        obs,
        actions,
        old_log_probs: old,
        advantages: vec![adv; m],
        returns: vec![0.0; m],
    }
}

fn surrogate_grads(policy: &AgentPolicy, batch: &PpoBatch, cfg: &PpoConfig) -> Vec<f64> {
    let mut tape = Tape::new();
    let terms = ppo_loss_on_tape(&mut tape, policy, batch, cfg).unwrap();
    let mut out = Vec::new();
    for g in tape.param_gradients(terms.surrogate).unwrap() {
        out.extend_from_slice(g.grad.data());
    }
    out
}

#[test]
fn saturated_clip_gives_zero_surrogate_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = small_cfg();
    let policy = AgentPolicy::init("p", 3, 4, &mut rng);
    // ratio = e > 1.2 with positive advantage, and e^-1 < 0.8 with negative.
    for (shift, adv) in [(-1.0, 1.0), (1.0, -1.0)] {
        let batch = batch_for(&policy, &mut rng, 6, shift, adv);
        assert!(surrogate_grads(&policy, &batch, &cfg).iter().all(|&g| g == 0.0));
    }
}

#[test]
fn unit_ratio_reduces_to_policy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = small_cfg();
    let policy = AgentPolicy::init("p", 3, 4, &mut rng);
    let mut batch = batch_for(&policy, &mut rng, 6, 0.0, 0.0);
    batch.advantages = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let got = surrogate_grads(&policy, &batch, &cfg);

    let mut tape = Tape::new();
    let x = tape.constant(batch.obs.clone());
    let logits = policy.logits_on_tape(&mut tape, x).unwrap();
    let lsm = tape.log_softmax(logits);
    let lp = tape.gather(lsm, &batch.actions).unwrap();
    let adv = tape.constant(Tensor::new(vec![6, 1], batch.advantages.clone()).unwrap());
    let w = tape.mul(lp, adv).unwrap();
    let pg = tape.mean(w);
    let mut expect = Vec::new();
    for g in tape.param_gradients(pg).unwrap() {
        expect.extend_from_slice(g.grad.data());
    }
    assert_eq!(got.len(), expect.len());
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn applied_surrogate_never_exceeds_unclipped() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = small_cfg();
    let policy = AgentPolicy::init("p", 3, 4, &mut rng);
    for _ in 0..200 {
        let shift = rng.gen_range(-1.5..1.5);
        let mut batch = batch_for(&policy, &mut rng, 4, shift, 0.0);
        batch.advantages = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let t = ppo_loss_on_tape(&mut tape, &policy, &batch, &cfg).unwrap();
        let (s, u) = (tape.value(t.surrogate).item(), tape.value(t.unclipped).item());
        assert!(s.is_finite() && s <= u + 1e-12);
    }
}

fn flat_params(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn sgd_step_follows_finite_difference_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = PpoConfig {
        epochs: 1,
        minibatch_size: 1000,
        max_grad_norm: 1e9,
        learning_rate: 1e-4,
        optimizer: OptimizerKind::Sgd,
        ..small_cfg()
    };
    let mut policy = AgentPolicy::init("p", 3, 4, &mut rng);
    let mut rollout = toy_rollout(&mut rng, &policy, 12);
    let (adv, ret) = compute_gae(&rollout, cfg.gamma, cfg.gae_lambda).unwrap();
    let adv = normalize(&adv);
    let idx: Vec<usize> = (0..rollout.len()).collect();
    let batch = PpoBatch::select(&rollout, &adv, &ret, &idx);
    let loss_at = |p: &AgentPolicy| {
        let mut tape = Tape::new();
        let t = ppo_loss_on_tape(&mut tape, p, &batch, &cfg).unwrap();
        tape.value(t.loss).item()
    };

    let names: Vec<String> = policy.store.iter().map(|(n, _)| n.clone()).collect();
    let mut fd = Vec::new();
    let h = 1e-6;
    for name in &names {
        for k in 0..policy.store.value(name).len() {
            let mut p = policy.clone();
            p.store.value_mut(name).data_mut()[k] += h;
            let up = loss_at(&p);
            p.store.value_mut(name).data_mut()[k] -= 2.0 * h;
            let down = loss_at(&p);
            fd.push((up - down) / (2.0 * h));
        }
    }
    let before = flat_params(&policy.store);
    let mut opt = Optimizer::new(cfg.optimizer);
    ppo_update(&mut rollout, &mut policy, &mut opt, &cfg, &mut rng).unwrap();
    let delta: Vec<f64> = flat_params(&policy.store).iter().zip(&before).map(|(a, b)| a - b).collect();
    let dot: f64 = delta.iter().zip(&fd).map(|(d, g)| -d * g).sum();
    let nd = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    let ng = fd.iter().map(|g| g * g).sum::<f64>().sqrt();
    let cosine = dot / (nd * ng);
    assert!(cosine > 0.99, "cosine {cosine}");
    assert!(rollout.is_empty());
}

fn filled_learner(seed: u64) -> IppoLearner {
    let mut learner = IppoLearner::new(small_cfg(), 3, 2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for t in 0..16 {
        let obs: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let s = learner.act(&obs).unwrap();
        learner.record(&obs, &s, f64::from(u8::from(t % 3 == 0)), t % 7 == 6);
    }
    learner
}

#[test]
fn agents_update_independently() {
    let mut a = filled_learner(8);
    let mut b = a.clone();
    let r = &mut b.rollouts[1];
    let n = r.len();
    let d = r.obs_dim;
    let perm: Vec<usize> = (0..n).rev().collect();
    let old = r.clone();
    for (dst, &src) in perm.iter().enumerate() {
        r.obs[dst * d..(dst + 1) * d].copy_from_slice(&old.obs[src * d..(src + 1) * d]);
        r.actions[dst] = old.actions[src];
        r.log_probs[dst] = old.log_probs[src];
        r.rewards[dst] = old.rewards[src];
        r.values[dst] = old.values[src];
        r.dones[dst] = old.dones[src];
    }
    let next = vec![vec![0.1, 0.2, 0.3], vec![0.3, 0.2, 0.1]];
    a.update(&next).unwrap();
    b.update(&next).unwrap();
    assert_eq!(a.policies[0], b.policies[0]);
    assert_ne!(a.policies[1], b.policies[1]);
}

#[test]
fn updates_keep_probabilities_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut learner = filled_learner(9);
    for round in 0..20 {
        assert!(learner.ready());
        let next = vec![vec![0.0; 3]; 2];
        learner.update(&next).unwrap();
        assert!(learner.rollouts.iter().all(|r| r.is_empty()));
        for t in 0..16 {
            let obs: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let s = learner.act(&obs).unwrap();
            learner.record(&obs, &s, f64::from(u8::from((t + round) % 4 == 0)), false);
        }
        for p in &learner.policies {
            let obs = Tensor::new(vec![1, 3], vec![0.5, -0.5, 0.25]).unwrap();
            let logits = p.logits(&obs).unwrap();
            assert!(logits.is_finite());
            let total: f64 = log_softmax(logits.data()).iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
    assert_eq!(learner.updates(), 20);
}
