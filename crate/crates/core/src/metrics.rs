//! Observer-side measures: entropy, swarm diversity, success detection and
//! the circular statistics used to summarize directions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cimax::{normalize_angle, StoredObservation};
use crate::swarm::Point;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("entropy base must exceed 1, got {0}")]
    BadBase(f64),
    #[error("probabilities must be non-negative and finite")]
    NegativeProbability,
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
}

/// Shannon entropy `-Σ p log_b p`; zero-probability terms contribute 0.
pub fn shannon_entropy(probabilities: &[f64], base: f64) -> Result<f64, MetricsError> {
    if !(base > 1.0 && base.is_finite()) {
        return Err(MetricsError::BadBase(base));
    }
    if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(MetricsError::NegativeProbability);
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MetricsError::NotNormalized(total));
    }
    let ln_base = base.ln();
    Ok(-probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln() / ln_base)
        .sum::<f64>())
}

/// Joint distribution of independent variables, first variable slowest.
pub fn product_distribution(marginals: &[Vec<f64>]) -> Vec<f64> {
    marginals.iter().fold(vec![1.0], |acc, m| {
        acc.iter().flat_map(|a| m.iter().map(move |p| a * p)).collect()
    })
}

/// Mean over agents of the mean stored variance. Agents with an empty
/// store are skipped; `None` when every store is empty.
pub fn average_diversity<'a, I>(stores: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a [StoredObservation]>,
{
    let per_agent: Vec<f64> = stores
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.iter().map(|o| o.variance).sum::<f64>() / s.len() as f64)
        .collect();
    (!per_agent.is_empty()).then(|| per_agent.iter().sum::<f64>() / per_agent.len() as f64)
}

/// Variance of all readings pooled across one agent's stored messages.
pub fn pooled_variance(store: &[StoredObservation]) -> Option<f64> {
    let n: usize = store.iter().map(|o| o.len).sum();
    if n == 0 {
        return None;
    }
    let grand = store.iter().map(|o| o.mean * o.len as f64).sum::<f64>() / n as f64;
    let m2: f64 = store
        .iter()
        .map(|o| o.len as f64 * (o.variance + (o.mean - grand).powi(2)))
        .sum();
    Some(m2 / n as f64)
}

/// Mean over agents of [`pooled_variance`].
pub fn pooled_diversity<'a, I>(stores: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a [StoredObservation]>,
{
    let per_agent: Vec<f64> = stores.into_iter().filter_map(pooled_variance).collect();
    (!per_agent.is_empty()).then(|| per_agent.iter().sum::<f64>() / per_agent.len() as f64)
}

/// Swarm diversity at evaluation instants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiversityTrace {
    /// (period index, diversity); periods where no agent stored anything are skipped.
    pub samples: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Timestep at which the swarm sits at `center`.
    pub t: u64,
    pub period: u64,
    pub center: Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuccessCriterion {
    /// `|x - border_x| < threshold`.
    BorderProximity { border_x: f64, threshold: f64 },
    /// `x >= x_min`.
    PositionThreshold { x_min: f64 },
    /// `| |p - center| - radius | < threshold`.
    RingProximity { center: Point, radius: f64, threshold: f64 },
}

impl SuccessCriterion {
    pub fn holds(&self, p: Point) -> bool {
        match *self {
            SuccessCriterion::BorderProximity { border_x, threshold } => (p.x - border_x).abs() < threshold,
            SuccessCriterion::PositionThreshold { x_min } => p.x >= x_min,
            SuccessCriterion::RingProximity {
                center,
                radius,
                threshold,
            } => (p.distance(center) - radius).abs() < threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessOutcome {
    pub success: bool,
    pub time: Option<u64>,
}

/// First trajectory time at or before `deadline` where the criterion holds.
pub fn detect_success(trajectory: &[TrajectoryPoint], criterion: SuccessCriterion, deadline: u64) -> SuccessOutcome {
    let hit = trajectory
        .iter()
        .take_while(|p| p.t <= deadline)
        .find(|p| criterion.holds(p.center));
    SuccessOutcome {
        success: hit.is_some(),
        time: hit.map(|p| p.t),
    }
}

/// Circular mean direction, or `None` for an empty or perfectly balanced set.
pub fn circular_mean(angles: &[f64]) -> Option<f64> {
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    if angles.is_empty() || (s == 0.0 && c == 0.0) {
        return None;
    }
    Some(normalize_angle(s.atan2(c)))
}

/// Mean resultant length in `[0, 1]`; 0 for an empty set.
pub fn mean_resultant_length(angles: &[f64]) -> f64 {
    if angles.is_empty() {
        return 0.0;
    }
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), a| (s + a.sin(), c + a.cos()));
    (s.hypot(c) / angles.len() as f64).min(1.0)
}

/// Rayleigh test of circular uniformity. Returns the p-value; small values
/// reject uniformity. Uses Zar's approximation, accurate for n >= 10.
pub fn rayleigh_p_value(angles: &[f64]) -> f64 {
    let n = angles.len() as f64;
    if angles.is_empty() {
        return 1.0;
    }
    let rn = mean_resultant_length(angles) * n;
    let p = ((1.0 + 4.0 * n + 4.0 * (n * n - rn * rn)).sqrt() - (1.0 + 2.0 * n)).exp();
    p.clamp(0.0, 1.0)
}

/// Absolute angular deviation in `[0, π]`.
pub fn angular_deviation(a: f64, b: f64) -> f64 {
    crate::cimax::signed_angle_diff(a, b).abs()
}

/// Wilson score interval for a binomial proportion at the given z.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}
