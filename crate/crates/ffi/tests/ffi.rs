use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use warehouse_marl::harness::{train, LearnerKind, TrainConfig};
use warehouse_marl_ffi::*;

fn preset(name: &str) -> *mut WmEnv {
    let name = CString::new(name).unwrap();
    let mut env = ptr::null_mut();
    assert_eq!(unsafe { wm_env_new_preset(name.as_ptr(), &mut env) }, WmStatus::Ok);
    env
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(wm_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn joint_action_counts() {
    assert_eq!(wm_joint_action_count(2), 25);
    assert_eq!(wm_joint_action_count(6), 15_625);
    assert_eq!(wm_joint_action_count(40), 0);
}

#[test]
fn epsilon_schedule() {
    assert_eq!(wm_epsilon_at(0, 1.0, 0.05, 100), 1.0);
    assert!((wm_epsilon_at(50, 1.0, 0.05, 100) - 0.525).abs() < 1e-12);
    assert_eq!(wm_epsilon_at(500, 1.0, 0.05, 100), 0.05);
}

#[test]
fn episode_through_the_handle() {
    let env = preset("micro-2ag");
    unsafe {
        let n = wm_env_n_agents(env);
        let od = wm_env_obs_dim(env);
        assert_eq!(n, 2);
        let mut obs = vec![0.0; n * od];
        assert_eq!(wm_env_reset(env, 7, obs.as_mut_ptr(), obs.len()), WmStatus::Ok);
        let mut state = vec![0.0; wm_env_state_dim(env)];
        assert_eq!(wm_env_global_state(env, state.as_mut_ptr(), state.len()), WmStatus::Ok);
        let (mut reward, mut done) = (0.0, false);
        let mut steps = 0;
        while !done {
            let acts = [1u32, (steps % 5) as u32];
            let s = wm_env_step(env, acts.as_ptr(), 2, &mut reward, &mut done, obs.as_mut_ptr(), obs.len());
            assert_eq!(s, WmStatus::Ok);
            steps += 1;
        }
        assert_eq!(steps, 50);
        let acts = [0u32, 0];
        let s = wm_env_step(env, acts.as_ptr(), 2, &mut reward, &mut done, obs.as_mut_ptr(), obs.len());
        assert_eq!(s, WmStatus::EpisodeDone);
        let pic = wm_env_render(env);
        assert!(!pic.is_null());
        assert_eq!(CStr::from_ptr(pic).to_str().unwrap().lines().count(), 5);
        wm_string_free(pic);
        wm_env_free(env);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let bad = CString::new("nowhere").unwrap();
        let mut env = ptr::null_mut();
        assert_eq!(wm_env_new_preset(bad.as_ptr(), &mut env), WmStatus::Environment);
        assert!(env.is_null());
        assert!(last_error().contains("nowhere"));
        assert_eq!(wm_env_new_preset(ptr::null(), &mut env), WmStatus::NullPointer);

        let env = preset("micro-2ag");
        let mut small = [0.0; 3];
        assert_eq!(wm_env_reset(env, 0, small.as_mut_ptr(), 3), WmStatus::BufferTooSmall);
        let mut obs = vec![0.0; 2 * wm_env_obs_dim(env)];
        wm_env_reset(env, 0, obs.as_mut_ptr(), obs.len());
        let (mut r, mut d) = (0.0, false);
        let acts = [9u32, 0];
        let s = wm_env_step(env, acts.as_ptr(), 2, &mut r, &mut d, obs.as_mut_ptr(), obs.len());
        assert_eq!(s, WmStatus::InvalidArgument);
        let s = wm_env_step(env, acts.as_ptr(), 1, &mut r, &mut d, obs.as_mut_ptr(), obs.len());
        assert_eq!(s, WmStatus::InvalidArgument);
        wm_env_free(env);
        wm_env_free(ptr::null_mut());
    }
}

#[test]
fn layout_text_environment() {
    let text = CString::new("3 4\nS..G\n....\nS...\n").unwrap();
    let mut env = ptr::null_mut();
    unsafe {
        assert_eq!(wm_env_new_layout(text.as_ptr(), 2, &mut env), WmStatus::Ok);
        assert_eq!(wm_env_n_agents(env), 2);
        wm_env_free(env);
    }
}

#[test]
fn trained_policy_matches_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::default();
    cfg.learner = LearnerKind::Qmix;
    cfg.env = "micro-2ag".into();
    cfg.desk_scale = true;
    cfg.batch_size = 4;
    cfg.total_steps = 600;
    cfg.eval_interval = 600;
    cfg.eval_episodes = 3;
    let run = train(&cfg, dir.path()).unwrap();
    let path = CString::new(dir.path().join("checkpoint.bin").to_str().unwrap()).unwrap();
    let env = preset("micro-2ag");
    unsafe {
        let (mut mean, mut std) = (f64::NAN, f64::NAN);
        assert_eq!(wm_evaluate(path.as_ptr(), 3, cfg.seed, &mut mean, &mut std), WmStatus::Ok);
        assert_eq!(mean, run.final_eval.mean);
        assert_eq!(std, run.final_eval.std);

        let mut policy = ptr::null_mut();
        assert_eq!(wm_policy_load(path.as_ptr(), env, &mut policy), WmStatus::Ok);
        let mut obs = vec![0.0; 2 * wm_env_obs_dim(env)];
        wm_env_reset(env, 1, obs.as_mut_ptr(), obs.len());
        assert_eq!(wm_policy_begin_episode(policy, 1), WmStatus::Ok);
        let mut acts = [99u32; 2];
        assert_eq!(wm_policy_act(policy, obs.as_ptr(), obs.len(), acts.as_mut_ptr(), 2), WmStatus::Ok);
        assert!(acts.iter().all(|&a| a < 5));
        wm_policy_free(policy);

        let tiny = preset("small-4ag");
        let mut other = ptr::null_mut();
        assert_eq!(wm_policy_load(path.as_ptr(), tiny, &mut other), WmStatus::Incompatible);
        wm_env_free(tiny);

        let missing = CString::new("/nonexistent/checkpoint.bin").unwrap();
        assert_eq!(wm_policy_load(missing.as_ptr(), env, &mut other), WmStatus::Io);
        wm_env_free(env);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/warehouse_marl.h");
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler, skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
