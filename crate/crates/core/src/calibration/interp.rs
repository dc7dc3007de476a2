//! Shape-preserving piecewise-cubic Hermite interpolation (Fritsch–Carlson
//! tangents with the Fritsch–Butland weighted harmonic mean), plus inversion
//! on monotone data.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Knots", into = "Knots")]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    slopes: Vec<f64>,
}

/// Serialized form: knots only, tangents are recomputed on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Knots {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InterpError {
    #[error("need at least 2 knots, got {0}")]
    TooFewKnots(usize),
    #[error("x and y lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("knot abscissae must be strictly increasing and finite (at index {0})")]
    NotIncreasing(usize),
    #[error("knot value at index {0} is not finite")]
    NonFinite(usize),
}

impl TryFrom<Knots> for MonotoneCubic {
    type Error = InterpError;
    fn try_from(k: Knots) -> Result<Self, Self::Error> {
        MonotoneCubic::new(k.x, k.y)
    }
}

impl From<MonotoneCubic> for Knots {
    fn from(m: MonotoneCubic) -> Knots {
        Knots { x: m.x, y: m.y }
    }
}

fn same_sign(a: f64, b: f64) -> bool {
    (a > 0.0 && b > 0.0) || (a < 0.0 && b < 0.0)
}

fn end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if !same_sign(d, m0) {
        0.0
    } else if !same_sign(m0, m1) && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

impl MonotoneCubic {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, InterpError> {
        let n = x.len();
        if n != y.len() {
            return Err(InterpError::LengthMismatch(n, y.len()));
        }
        if n < 2 {
            return Err(InterpError::TooFewKnots(n));
        }
        for i in 0..n {
            if !x[i].is_finite() || (i > 0 && x[i] <= x[i - 1]) {
                return Err(InterpError::NotIncreasing(i));
            }
            if !y[i].is_finite() {
                return Err(InterpError::NonFinite(i));
            }
        }

        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = y.windows(2).zip(&h).map(|(w, h)| (w[1] - w[0]) / h).collect();

        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = m[0];
            slopes[1] = m[0];
        } else {
            for k in 1..n - 1 {
                if same_sign(m[k - 1], m[k]) {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    slopes[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
                }
            }
            slopes[0] = end_slope(h[0], h[1], m[0], m[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }

        Ok(Self { x, y, slopes })
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.x, &self.y)
    }

    pub fn x_min(&self) -> f64 {
        self.x[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.x.last().unwrap()
    }

    pub fn y_first(&self) -> f64 {
        self.y[0]
    }

    pub fn y_last(&self) -> f64 {
        *self.y.last().unwrap()
    }

    fn segment(&self, x: f64) -> usize {
        // index k with x[k] <= x <= x[k+1]
        let i = self.x.partition_point(|&xi| xi <= x);
        i.clamp(1, self.x.len() - 1) - 1
    }

    fn hermite(&self, k: usize, x: f64) -> f64 {
        let h = self.x[k + 1] - self.x[k];
        let t = (x - self.x[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.y[k] + h * (h10 * self.slopes[k] + h11 * self.slopes[k + 1]) + h01 * self.y[k + 1]
    }

    /// Evaluates with the abscissa clamped to the knot range. The second
    /// value is `true` when clamping happened.
    pub fn eval_clamped(&self, x: f64) -> (f64, bool) {
        if x < self.x_min() {
            (self.y_first(), true)
        } else if x > self.x_max() {
            (self.y_last(), true)
        } else {
            (self.hermite(self.segment(x), x), false)
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_clamped(x).0
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.y.windows(2).all(|w| w[1] >= w[0])
    }

    /// Smallest abscissa where the interpolant reaches `target`, for
    /// non-decreasing knot values. `None` when `target` lies outside
    /// `[y_first, y_last]`.
    pub fn invert_non_decreasing(&self, target: f64) -> Option<f64> {
        debug_assert!(self.is_non_decreasing());
        if !(target >= self.y_first() && target <= self.y_last()) {
            return None;
        }
        // first knot at or above target
        let i = self.y.partition_point(|&yi| yi < target);
        if i == 0 {
            return Some(self.x[0]);
        }
        if self.y[i] == target {
            // leftmost knot of a flat run
            let j = self.y[..i].partition_point(|&yi| yi < target);
            return Some(self.x[j]);
        }
        let k = i - 1;
        let (mut lo, mut hi) = (self.x[k], self.x[k + 1]);
        let scale = hi - lo;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.hermite(k, mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * scale {
                break;
            }
        }
        Some(0.5 * (lo + hi))
    }
}
