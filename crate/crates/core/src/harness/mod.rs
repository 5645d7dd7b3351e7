//! Training, evaluation and benchmarking orchestration behind the `marl`
//! command.

pub mod benchmark;
pub mod config;
pub mod metrics;
pub mod policy;
pub mod render;
pub mod selftest;
pub mod train;

pub use benchmark::{benchmark, BenchmarkCell, BenchmarkReport};
pub use config::{epsilon_at, LearnerKind, Profile, TrainConfig};
pub use metrics::MetricsRow;
pub use policy::{evaluate, evaluate_checkpoint, EvalSummary, LoadedPolicy};
pub use train::{train, TrainOutcome};

/// SplitMix64 finalizer, used to derive independent seeds from one run seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_PARAMS: u64 = 1;
pub(crate) const STREAM_ACT: u64 = 2;
pub(crate) const STREAM_REPLAY: u64 = 3;
pub(crate) const STREAM_TRAIN_ENV: u64 = 4;
pub(crate) const STREAM_EVAL: u64 = 5;

/// Reset seed of the `k`-th evaluation episode for a given eval seed.
pub fn eval_episode_seed(seed: u64, k: usize) -> u64 {
    mix_seed(mix_seed(seed, STREAM_EVAL), k as u64)
}

/// Reset seed of the `k`-th training episode.
pub fn train_episode_seed(seed: u64, k: u64) -> u64 {
    mix_seed(mix_seed(seed, STREAM_TRAIN_ENV), k)
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_sample_std(xs: &[f64]) -> (f64, f64) {
    if xs.len() < 2 {
        return (xs.first().copied().unwrap_or(0.0), 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
