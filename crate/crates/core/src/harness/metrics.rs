//! Per-run metrics CSV.

use std::fmt::Write as _;

/// One evaluation point.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub env_step: u64,
    pub episodes_seen: u64,
    /// Exploration rate of the value learners; 0 for ippo, 1 for random.
    pub epsilon: f64,
    /// Mean TD or PPO loss since the previous row; `None` before any update.
    pub train_loss: Option<f64>,
    pub eval_mean_return: f64,
    pub eval_return_std: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "env_step,episodes_seen,epsilon,train_loss,eval_mean_return,eval_return_std";
pub const TIMING_HEADER: &str = "env_step,wall_seconds";

/// `metrics.csv` content. Wall-clock time is kept out so identical runs give
/// identical files; see [`timing_csv`].
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let loss = r.train_loss.map(|l| l.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.env_step, r.episodes_seen, r.epsilon, loss, r.eval_mean_return, r.eval_return_std
        );
    }
    out
}

pub fn timing_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(TIMING_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{:.3}", r.env_step, r.wall_seconds);
    }
    out
}

/// Reads back the columns written by [`metrics_csv`]; `wall_seconds` is 0.
pub fn parse_metrics_csv(text: &str) -> Option<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next()? != METRICS_HEADER {
        return None;
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return None;
            }
            Some(MetricsRow {
                env_step: f[0].parse().ok()?,
                episodes_seen: f[1].parse().ok()?,
                epsilon: f[2].parse().ok()?,
                train_loss: if f[3].is_empty() { None } else { Some(f[3].parse().ok()?) },
                eval_mean_return: f[4].parse().ok()?,
                eval_return_std: f[5].parse().ok()?,
                wall_seconds: 0.0,
            })
        })
        .collect()
}
