//! Returns normalized against the random baseline.

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub domain: String,
    pub instance: String,
    pub algo: String,
    pub mean: f64,
    pub std: f64,
    /// `|r̄ - r̄_rand| / |r̄_rand|`; `None` when the baseline mean is ~0.
    pub score_abs: Option<f64>,
    /// `(r̄ - r̄_rand) / |r̄_rand|`.
    pub score_signed: Option<f64>,
    /// `σ / |r̄_rand|`.
    pub score_std: Option<f64>,
}

/// Baseline means below this are treated as zero.
pub const BASELINE_EPS: f64 = 1e-9;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (0 for a single value).
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// `(absolute, signed, std)` scores of an algorithm with mean `m` and standard
/// deviation `s` against baseline mean `base`.
pub fn normalized(m: f64, s: f64, base: f64) -> (Option<f64>, Option<f64>, Option<f64>) {
    if base.abs() < BASELINE_EPS {
        return (None, None, None);
    }
    let d = base.abs();
    (Some((m - base).abs() / d), Some((m - base) / d), Some(s / d))
}

pub fn score(domain: &str, instance: &str, algo: &str, returns: &[f64], baseline: &[f64]) -> ScoreRecord {
    let (m, s) = (mean(returns), std_dev(returns));
    let (score_abs, score_signed, score_std) = normalized(m, s, mean(baseline));
    ScoreRecord {
        domain: domain.into(),
        instance: instance.into(),
        algo: algo.into(),
        mean: m,
        std: s,
        score_abs,
        score_signed,
        score_std,
    }
}
