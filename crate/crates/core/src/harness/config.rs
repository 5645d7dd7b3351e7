//! Run configuration: `key = value` text, profiles and validation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::env::{EnvConfig, Layout};
use crate::error::{Error, Result};
use crate::ippo::PpoConfig;
use crate::optim::OptimizerKind;
use crate::value_decomposition::{MixerKind, ValueConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LearnerKind {
    Qmix,
    Vdn,
    Ippo,
    Random,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 4] = [LearnerKind::Qmix, LearnerKind::Vdn, LearnerKind::Ippo, LearnerKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            LearnerKind::Qmix => "qmix",
            LearnerKind::Vdn => "vdn",
            LearnerKind::Ippo => "ippo",
            LearnerKind::Random => "random",
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LearnerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown learner {s:?} (qmix, vdn, ippo, random)")))
    }
}

/// Hyperparameter baseline a config starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Tuned values: large batch, long anneal, 20M steps.
    Optimized,
    /// Untuned starting values.
    Default,
    /// Small budget for a single workstation on the micro map.
    Desk,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Optimized => "optimized",
            Profile::Default => "default",
            Profile::Desk => "desk",
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimized" => Ok(Profile::Optimized),
            "default" => Ok(Profile::Default),
            "desk" => Ok(Profile::Desk),
            _ => Err(Error::Config(format!("unknown profile {s:?} (optimized, default, desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub learner: LearnerKind,
    /// Preset name or path to a layout file.
    pub env: String,
    pub seed: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Replay capacity in episodes.
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    pub learning_rate: f64,
    pub gamma: f64,
    pub target_update_interval: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Start updating once 8 episodes are stored, with the batch clamped to
    /// the buffer size.
    pub desk_scale: bool,
    pub hidden_dim: usize,
    pub mix_embed: usize,
    pub hyper_hidden: usize,
    pub grad_clip: f64,
    pub double_q: bool,
    pub ppo_clip: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub ppo_epochs: usize,
    pub ppo_horizon: usize,
    pub ppo_minibatch: usize,
    pub ppo_max_grad_norm: f64,
    pub n_agents: Option<usize>,
    pub n_shelves: Option<usize>,
    pub n_requested: Option<usize>,
    pub episode_limit: Option<usize>,
    pub obs_radius: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Optimized)
    }
}

pub const DESK_TRAIN_START: usize = 8;

const KEYS: [&str; 34] = [
    "profile",
    "learner",
    "env",
    "seed",
    "total_steps",
    "batch_size",
    "buffer_capacity",
    "epsilon_start",
    "epsilon_end",
    "epsilon_anneal_steps",
    "learning_rate",
    "gamma",
    "target_update_interval",
    "eval_interval",
    "eval_episodes",
    "desk_scale",
    "hidden_dim",
    "mix_embed",
    "hyper_hidden",
    "grad_clip",
    "double_q",
    "ppo_clip",
    "gae_lambda",
    "entropy_coef",
    "value_coef",
    "ppo_epochs",
    "ppo_horizon",
    "ppo_minibatch",
    "ppo_max_grad_norm",
    "n_agents",
    "n_shelves",
    "n_requested",
    "episode_limit",
    "obs_radius",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_count(key: &str, value: &str) -> Result<u64> {
    parse(key, &value.replace('_', ""))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        Ok(Some(parse_count(key, value)? as usize))
    }
}

fn show_opt(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        let (batch_size, buffer_capacity, epsilon_anneal_steps, total_steps) = match profile {
            Profile::Optimized => (256, 512, 5_000_000, 20_000_000),
            Profile::Default => (32, 32, 50_000, 2_000_000),
            Profile::Desk => (32, 512, 50_000, 300_000),
        };
        let ppo = PpoConfig::default();
        Self {
            profile,
            learner: LearnerKind::Qmix,
            env: if profile == Profile::Desk { "micro-2ag" } else { "tiny-2ag" }.into(),
            seed: 0,
            total_steps,
            batch_size,
            buffer_capacity,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps,
            learning_rate: 0.0005,
            gamma: 0.99,
            target_update_interval: 200,
            eval_interval: 10_000,
            eval_episodes: 32,
            desk_scale: profile == Profile::Desk,
            hidden_dim: 64,
            mix_embed: 32,
            hyper_hidden: 64,
            grad_clip: 10.0,
            double_q: false,
            ppo_clip: ppo.clip,
            gae_lambda: ppo.gae_lambda,
            entropy_coef: ppo.entropy_coef,
            value_coef: ppo.value_coef,
            ppo_epochs: ppo.epochs,
            ppo_horizon: ppo.horizon,
            ppo_minibatch: ppo.minibatch_size,
            ppo_max_grad_norm: ppo.max_grad_norm,
            n_agents: None,
            n_shelves: None,
            n_requested: None,
            episode_limit: None,
            obs_radius: None,
        }
    }

    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    /// Sets one key from its text form. `profile` resets every other key to
    /// that profile's values.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "profile" => {
                let learner = self.learner;
                *self = Self::profile(v.parse()?);
                self.learner = learner;
            }
            "learner" => self.learner = v.parse()?,
            "env" => self.env = v.to_string(),
            "seed" => self.seed = parse_count(key, v)?,
            "total_steps" => self.total_steps = parse_count(key, v)?,
            "batch_size" => self.batch_size = parse_count(key, v)? as usize,
            "buffer_capacity" => self.buffer_capacity = parse_count(key, v)? as usize,
            "epsilon_start" => self.epsilon_start = parse(key, v)?,
            "epsilon_end" => self.epsilon_end = parse(key, v)?,
            "epsilon_anneal_steps" => self.epsilon_anneal_steps = parse_count(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "target_update_interval" => self.target_update_interval = parse_count(key, v)?,
            "eval_interval" => self.eval_interval = parse_count(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_count(key, v)? as usize,
            "desk_scale" => self.desk_scale = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse_count(key, v)? as usize,
            "mix_embed" => self.mix_embed = parse_count(key, v)? as usize,
            "hyper_hidden" => self.hyper_hidden = parse_count(key, v)? as usize,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "double_q" => self.double_q = parse(key, v)?,
            "ppo_clip" => self.ppo_clip = parse(key, v)?,
            "gae_lambda" => self.gae_lambda = parse(key, v)?,
            "entropy_coef" => self.entropy_coef = parse(key, v)?,
            "value_coef" => self.value_coef = parse(key, v)?,
            "ppo_epochs" => self.ppo_epochs = parse_count(key, v)? as usize,
            "ppo_horizon" => self.ppo_horizon = parse_count(key, v)? as usize,
            "ppo_minibatch" => self.ppo_minibatch = parse_count(key, v)? as usize,
            "ppo_max_grad_norm" => self.ppo_max_grad_norm = parse(key, v)?,
            "n_agents" => self.n_agents = parse_opt(key, v)?,
            "n_shelves" => self.n_shelves = parse_opt(key, v)?,
            "n_requested" => self.n_requested = parse_opt(key, v)?,
            "episode_limit" => self.episode_limit = parse_opt(key, v)?,
            "obs_radius" => self.obs_radius = parse_opt(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "profile" => self.profile.name().into(),
            "learner" => self.learner.name().into(),
            "env" => self.env.clone(),
            "seed" => self.seed.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "buffer_capacity" => self.buffer_capacity.to_string(),
            "epsilon_start" => self.epsilon_start.to_string(),
            "epsilon_end" => self.epsilon_end.to_string(),
            "epsilon_anneal_steps" => self.epsilon_anneal_steps.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "gamma" => self.gamma.to_string(),
            "target_update_interval" => self.target_update_interval.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "desk_scale" => self.desk_scale.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "mix_embed" => self.mix_embed.to_string(),
            "hyper_hidden" => self.hyper_hidden.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "double_q" => self.double_q.to_string(),
            "ppo_clip" => self.ppo_clip.to_string(),
            "gae_lambda" => self.gae_lambda.to_string(),
            "entropy_coef" => self.entropy_coef.to_string(),
            "value_coef" => self.value_coef.to_string(),
            "ppo_epochs" => self.ppo_epochs.to_string(),
            "ppo_horizon" => self.ppo_horizon.to_string(),
            "ppo_minibatch" => self.ppo_minibatch.to_string(),
            "ppo_max_grad_norm" => self.ppo_max_grad_norm.to_string(),
            "n_agents" => show_opt(self.n_agents),
            "n_shelves" => show_opt(self.n_shelves),
            "n_requested" => show_opt(self.n_requested),
            "episode_limit" => show_opt(self.episode_limit),
            "obs_radius" => show_opt(self.obs_radius),
            _ => return None,
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. A `profile` line is
    /// applied first wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        if let Some((_, p)) = pairs.iter().find(|(k, _)| k == "profile") {
            cfg = Self::profile(p.parse()?);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "profile") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The environment this config trains on, with overrides applied.
    pub fn env_config(&self) -> Result<EnvConfig> {
        let mut env = if crate::env::PRESETS.contains(&self.env.as_str()) {
            EnvConfig::preset(&self.env)?
        } else {
            let path = Path::new(&self.env);
            if !path.exists() {
                return Err(Error::Config(format!(
                    "env {:?} is neither a preset ({:?}) nor a layout file",
                    self.env,
                    crate::env::PRESETS
                )));
            }
            let layout = Layout::load(path)?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("layout");
            EnvConfig::from_layout(name, layout, self.n_agents.unwrap_or(2))
        };
        if let Some(n) = self.n_agents {
            env.n_agents = n;
        }
        if let Some(n) = self.n_shelves {
            env.n_shelves = n;
            if self.n_requested.is_none() {
                env.n_requested = env.n_requested.min(n.saturating_sub(1));
            }
        }
        if let Some(n) = self.n_requested {
            env.n_requested = n;
        }
        if let Some(n) = self.episode_limit {
            env.episode_limit = n;
        }
        if let Some(r) = self.obs_radius {
            env.obs_radius = r;
        }
        env.validate()?;
        env.check_placement()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let counts = [
            ("total_steps", self.total_steps),
            ("batch_size", self.batch_size as u64),
            ("buffer_capacity", self.buffer_capacity as u64),
            ("epsilon_anneal_steps", self.epsilon_anneal_steps),
            ("target_update_interval", self.target_update_interval),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes as u64),
            ("hidden_dim", self.hidden_dim as u64),
            ("mix_embed", self.mix_embed as u64),
            ("hyper_hidden", self.hyper_hidden as u64),
            ("ppo_epochs", self.ppo_epochs as u64),
            ("ppo_horizon", self.ppo_horizon as u64),
            ("ppo_minibatch", self.ppo_minibatch as u64),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{k} must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilon values must lie in [0, 1]".into());
        }
        if self.epsilon_end > self.epsilon_start {
            return bad(format!(
                "epsilon_end {} exceeds epsilon_start {}",
                self.epsilon_end, self.epsilon_start
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]".into());
        }
        if !(self.grad_clip > 0.0) || !(self.ppo_max_grad_norm > 0.0) || !(self.ppo_clip > 0.0) {
            return bad("clipping thresholds must be positive".into());
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return bad("loss coefficients must be non-negative".into());
        }
        if !self.desk_scale && self.batch_size > self.buffer_capacity {
            return bad(format!(
                "batch_size {} exceeds buffer_capacity {}",
                self.batch_size, self.buffer_capacity
            ));
        }
        self.env_config().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })?;
        Ok(())
    }

    /// Every key with its effective value; environment overrides are
    /// expanded to the numbers actually used.
    pub fn resolved(&self) -> String {
        let mut full = self.clone();
        if let Ok(env) = self.env_config() {
            full.n_agents = Some(env.n_agents);
            full.n_shelves = Some(env.n_shelves);
            full.n_requested = Some(env.n_requested);
            full.episode_limit = Some(env.episode_limit);
            full.obs_radius = Some(env.obs_radius);
        }
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!("{k} = {}\n", full.get(k).expect("known key")));
        }
        out.push_str(&format!(
            "# train_start = {} episodes, then one update per completed episode\n",
            self.train_start()
        ));
        out.push_str("# buffer_capacity counts episodes; total_steps counts environment steps\n");
        out.push_str("# shelf return before the next pickup is not enforced\n");
        out
    }

    /// Episodes stored before the first update.
    pub fn train_start(&self) -> usize {
        if self.desk_scale {
            DESK_TRAIN_START.min(self.buffer_capacity)
        } else {
            self.batch_size
        }
    }

    pub fn value_config(&self) -> ValueConfig {
        ValueConfig {
            mixer: if self.learner == LearnerKind::Vdn {
                MixerKind::Vdn
            } else {
                MixerKind::Qmix
            },
            gamma: self.gamma,
            learning_rate: self.learning_rate,
            grad_clip: self.grad_clip,
            target_update_interval: self.target_update_interval,
            double_q: self.double_q,
            hidden_dim: self.hidden_dim,
            mix_embed: self.mix_embed,
            hyper_hidden: self.hyper_hidden,
            optimizer: OptimizerKind::rmsprop(),
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            hidden_dim: self.hidden_dim,
            clip: self.ppo_clip,
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
            epochs: self.ppo_epochs,
            horizon: self.ppo_horizon,
            minibatch_size: self.ppo_minibatch,
            learning_rate: self.learning_rate,
            max_grad_norm: self.ppo_max_grad_norm,
            optimizer: OptimizerKind::adam(),
        }
    }
}

/// Linear decay from `epsilon_start` to `epsilon_end` over
/// `epsilon_anneal_steps`, constant afterwards.
pub fn epsilon_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step >= cfg.epsilon_anneal_steps {
        return cfg.epsilon_end;
    }
    let frac = step as f64 / cfg.epsilon_anneal_steps as f64;
    cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimized_defaults() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 256);
        assert_eq!(c.epsilon_anneal_steps, 5_000_000);
        assert_eq!(c.total_steps, 20_000_000);
        assert_eq!(c.learning_rate, 0.0005);
        assert_eq!(c.eval_episodes, 32);
        c.validate().unwrap();
        let d = TrainConfig::profile(Profile::Default);
        assert_eq!((d.batch_size, d.epsilon_anneal_steps, d.total_steps), (32, 50_000, 2_000_000));
        let k: TrainConfig = TrainConfig::parse("profile = desk\n").unwrap();
        assert_eq!((k.env.as_str(), k.buffer_capacity, k.total_steps), ("micro-2ag", 512, 300_000));
        assert!(k.desk_scale);
        k.validate().unwrap();
    }

    #[test]
    fn epsilon_schedule_points() {
        let c = TrainConfig {
            epsilon_anneal_steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(epsilon_at(0, &c), 1.0);
        assert_eq!(epsilon_at(1000, &c), 0.05);
        assert_eq!(epsilon_at(10_000, &c), 0.05);
        assert!((epsilon_at(500, &c) - 0.525).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..2000 {
            let e = epsilon_at(s, &c);
            assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn parse_and_resolve_round_trip() {
        let text = "# run\nlearner = vdn\nenv = micro-2ag\nseed = 7\ntotal_steps = 1_000\nprofile = default\n";
        let c = TrainConfig::parse(text).unwrap();
        assert_eq!(c.learner, LearnerKind::Vdn);
        assert_eq!(c.profile, Profile::Default);
        assert_eq!(c.total_steps, 1000);
        assert_eq!(c.batch_size, 32);
        let resolved = c.resolved();
        assert!(resolved.contains("episode_limit = 50\n"));
        let again = TrainConfig::parse(&resolved).unwrap();
        assert_eq!(again.resolved(), resolved);
        assert_eq!(again.env_config().unwrap(), c.env_config().unwrap());
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(TrainConfig::parse("nonsense").is_err());
        assert!(TrainConfig::parse("color = red").is_err());
        assert!(TrainConfig::parse("batch_size = many").is_err());
        for (k, v) in [
            ("total_steps", "0"),
            ("epsilon_end", "1.5"),
            ("learning_rate", "-1"),
            ("env", "no-such-map"),
            ("n_requested", "5"),
        ] {
            let mut c = TrainConfig {
                env: "micro-2ag".into(),
                ..TrainConfig::default()
            };
            c.set(k, v).unwrap();
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{k}={v}");
        }
        let c = TrainConfig {
            epsilon_start: 0.1,
            epsilon_end: 0.2,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn layout_files_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("room.txt");
        std::fs::write(&path, "3 4\nS..S\n....\n.G..\n").unwrap();
        let mut c = TrainConfig::default();
        c.set("env", path.to_str().unwrap()).unwrap();
        let env = c.env_config().unwrap();
        assert_eq!((env.grid_height, env.grid_width, env.n_shelves), (3, 4, 2));
        assert_eq!(env.n_requested, 1);
    }

    proptest::proptest! {
        #[test]
        fn epsilon_is_bounded_and_nonincreasing(anneal in 1u64..1_000_000, a in 0u64..2_000_000, b in 0u64..2_000_000) {
            let c = TrainConfig { epsilon_anneal_steps: anneal, ..TrainConfig::default() };
            let (lo, hi) = (a.min(b), a.max(b));
            let (e_lo, e_hi) = (epsilon_at(lo, &c), epsilon_at(hi, &c));
            proptest::prop_assert!(e_hi <= e_lo);
            proptest::prop_assert!((c.epsilon_end..=c.epsilon_start).contains(&e_lo));
            proptest::prop_assert!((c.epsilon_end..=c.epsilon_start).contains(&e_hi));
        }
    }
}
