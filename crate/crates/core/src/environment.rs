//! Scalar environment fields sampled by the agents.

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::swarm::Point;

/// Slope of the linear-gradient field per unit of perception range, equal
/// to the cloud ramp (5 over 1.5 R).
pub const DEFAULT_GRADIENT_SLOPE: f64 = 5.0 / 1.5;
pub const DEFAULT_NOISE_HALFWIDTH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    /// Constant level everywhere; used for null-model runs.
    Uniform { level: f64 },
    /// `low` left of `border_x`, `high` from `border_x` on.
    DiscreteBorder { border_x: f64, low: f64, high: f64 },
    /// `0` left of `onset_x`, then rising with `slope` per unit x.
    LinearGradient { onset_x: f64, slope: f64 },
    /// `low` within `inner_radius` of `center`, linear ramp to `high` at
    /// `outer_radius`, `high` beyond. `inverted` swaps the two levels.
    RadialCloud {
        center: Point,
        inner_radius: f64,
        outer_radius: f64,
        low: f64,
        high: f64,
        #[serde(default)]
        inverted: bool,
    },
    /// Piecewise-constant cells along x, starting at `origin_x`. Positions
    /// outside the list take the nearest end cell.
    OneDimensionalPattern {
        origin_x: f64,
        cell_width: f64,
        levels: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentField {
    #[serde(flatten)]
    pub kind: FieldKind,
    #[serde(default = "default_noise")]
    pub noise_halfwidth: f64,
    /// Constant added to every value.
    #[serde(default)]
    pub offset: f64,
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_HALFWIDTH
}

impl Default for EnvironmentField {
    fn default() -> Self {
        Self::discrete()
    }
}

impl EnvironmentField {
    pub fn new(kind: FieldKind) -> Self {
        Self {
            kind,
            noise_halfwidth: DEFAULT_NOISE_HALFWIDTH,
            offset: 0.0,
        }
    }

    pub fn with_noise(mut self, halfwidth: f64) -> Self {
        self.noise_halfwidth = halfwidth;
        self
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn discrete() -> Self {
        Self::new(FieldKind::DiscreteBorder {
            border_x: 0.0,
            low: 0.0,
            high: 5.0,
        })
    }

    pub fn gradient() -> Self {
        Self::new(FieldKind::LinearGradient {
            onset_x: 0.0,
            slope: DEFAULT_GRADIENT_SLOPE,
        })
    }

    pub fn cloud() -> Self {
        Self::new(FieldKind::RadialCloud {
            center: Point::new(0.0, 0.0),
            inner_radius: 3.0,
            outer_radius: 4.5,
            low: 0.0,
            high: 5.0,
            inverted: false,
        })
    }

    pub fn uniform(level: f64) -> Self {
        Self::new(FieldKind::Uniform { level })
    }

    /// Binary light pattern: one cell per agent, bright = 1.
    pub fn light_pattern(origin_x: f64, cell_width: f64, pattern: &[bool]) -> Self {
        Self::new(FieldKind::OneDimensionalPattern {
            origin_x,
            cell_width,
            levels: pattern.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        })
        .with_noise(0.0)
    }

    /// Noise-free value at `position`.
    pub fn base(&self, position: Point) -> f64 {
        let value = match &self.kind {
            FieldKind::Uniform { level } => *level,
            FieldKind::DiscreteBorder { border_x, low, high } => {
                if position.x < *border_x {
                    *low
                } else {
                    *high
                }
            }
            FieldKind::LinearGradient { onset_x, slope } => {
                if position.x < *onset_x {
                    0.0
                } else {
                    slope * (position.x - onset_x)
                }
            }
            FieldKind::RadialCloud {
                center,
                inner_radius,
                outer_radius,
                low,
                high,
                inverted,
            } => {
                let (inside, outside) = if *inverted { (*high, *low) } else { (*low, *high) };
                let d = position.distance(*center);
                if d < *inner_radius {
                    inside
                } else if d > *outer_radius {
                    outside
                } else {
                    let span = outer_radius - inner_radius;
                    let frac = if span > 0.0 { (d - inner_radius) / span } else { 1.0 };
                    inside + frac * (outside - inside)
                }
            }
            FieldKind::OneDimensionalPattern {
                origin_x,
                cell_width,
                levels,
            } => {
                if levels.is_empty() {
                    0.0
                } else {
                    let cell = ((position.x - origin_x) / cell_width).floor();
                    let idx = cell.clamp(0.0, (levels.len() - 1) as f64) as usize;
                    levels[idx]
                }
            }
        };
        value + self.offset
    }

    /// Noisy reading: base value plus white noise uniform in
    /// `(-noise_halfwidth, noise_halfwidth)`. Always consumes exactly one draw.
    pub fn sample<R: Rng + ?Sized>(&self, position: Point, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        self.base(position) + self.noise_halfwidth * (2.0 * u - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn at(x: f64, y: f64) -> Point {
        Point::new(x, y)
    }

    #[test]
    fn discrete_domains() {
        let f = EnvironmentField::discrete();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let lo = f.sample(at(-3.0, 0.0), &mut rng);
            assert!(lo > -0.5 && lo < 0.5);
            let hi = f.sample(at(3.0, 1.0), &mut rng);
            assert!(hi > 4.5 && hi < 5.5);
        }
        assert_eq!(f.base(at(0.0, 0.0)), 5.0);
        assert_eq!(f.base(at(-1e-12, 0.0)), 0.0);
    }

    #[test]
    fn gradient_is_flat_then_linear() {
        let f = EnvironmentField::gradient();
        assert_eq!(f.base(at(-1.0, 0.0)), 0.0);
        assert_eq!(f.base(at(0.0, 0.0)), 0.0);
        assert!((f.base(at(1.5, 0.0)) - 5.0).abs() < 1e-12);
        // continuity at the onset
        assert!(f.base(at(1e-9, 0.0)).abs() < 1e-8);
    }

    #[test]
    fn cloud_ramp() {
        let f = EnvironmentField::cloud().with_noise(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(f.sample(at(3.75, 0.0), &mut rng), 2.5);
        assert_eq!(f.base(at(10.0, 0.0)), 5.0);
        assert_eq!(f.base(at(0.0, 1.0)), 0.0);
        assert!((f.base(at(0.0, 3.0 + 1e-9))).abs() < 1e-8);
        assert!((f.base(at(0.0, 4.5 - 1e-9)) - 5.0).abs() < 1e-8);
        let inv = EnvironmentField::new(FieldKind::RadialCloud {
            center: at(0.0, 0.0),
            inner_radius: 3.0,
            outer_radius: 4.5,
            low: 0.0,
            high: 5.0,
            inverted: true,
        });
        assert_eq!(inv.base(at(0.0, 0.0)), 5.0);
        assert_eq!(inv.base(at(9.0, 0.0)), 0.0);
    }

    #[test]
    fn pattern_cells() {
        let f = EnvironmentField::light_pattern(-0.45, 0.9, &[true, true, false, false]);
        let xs = [0.0, 0.9, 1.8, 2.7];
        let got: Vec<f64> = xs.iter().map(|&x| f.base(at(x, 0.0))).collect();
        assert_eq!(got, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(f.base(at(-10.0, 0.0)), 1.0);
        assert_eq!(f.base(at(10.0, 0.0)), 0.0);
    }

    #[test]
    fn noise_statistics() {
        let f = EnvironmentField::discrete();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| f.sample(at(1.0, 0.0), &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 5.0).abs() < 0.01, "mean {mean}");
        let expected = 0.25 / 3.0;
        assert!((var - expected).abs() < 0.1 * expected, "var {var}");
    }

    #[test]
    fn sample_uses_one_draw() {
        use rand::RngCore;
        let f = EnvironmentField::gradient();
        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = a.clone();
        f.sample(at(1.0, 0.0), &mut a);
        let _: f64 = b.sample(Open01);
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
