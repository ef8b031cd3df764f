//! Portfolio loss process: compensator ν^L(t, dy), barrier intensities
//! λ(t, x), the martingales M^x and exact simulation by thinning.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;
use crate::rng::{path_rng, StreamKind};

/// Tolerance used in every comparison between loss levels and barriers, so
/// that levels reached by summing marks compare equal to their decimal value.
pub const LOSS_TOL: f64 = 1e-12;

/// Total jump intensity ν^L(t, ℐ) as a function of time and current loss.
#[derive(Clone)]
pub enum LossRate {
    Constant(f64),
    /// `intercept + slope * ℓ`.
    Affine { intercept: f64, slope: f64 },
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for LossRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossRate::Constant(r) => write!(f, "Constant({r})"),
            LossRate::Affine { intercept, slope } => write!(f, "Affine {{ intercept: {intercept}, slope: {slope} }}"),
            LossRate::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl LossRate {
    fn eval(&self, t: f64, level: f64) -> f64 {
        match self {
            LossRate::Constant(r) => *r,
            LossRate::Affine { intercept, slope } => (intercept + slope * level).max(0.0),
            LossRate::Custom(f) => f(t, level),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkAtom {
    pub y: f64,
    pub p: f64,
}

/// ν^L(t, dy) = rate(t, ℓ) · marks(ℓ)(dy) with discrete marks.
///
/// Atoms larger than `1 - ℓ` are removed in state ℓ and the rest renormalized,
/// so the loss never exceeds 1 and λ(t, 1) = 0.
#[derive(Debug, Clone)]
pub struct LossCompensatorSpec {
    rate: LossRate,
    marks: Vec<MarkAtom>,
    rate_bound: f64,
}

impl LossCompensatorSpec {
    pub fn new(rate: LossRate, marks: Vec<MarkAtom>, rate_bound: f64) -> Result<Self> {
        if marks.is_empty() {
            return Err(Error::Domain("loss mark distribution is empty".into()));
        }
        for m in &marks {
            if !(m.y > 0.0 && m.y <= 1.0 && m.p >= 0.0 && m.p.is_finite()) {
                return Err(Error::Domain(format!("invalid loss mark {m:?}: need 0 < y <= 1, p >= 0")));
            }
        }
        let total: f64 = marks.iter().map(|m| m.p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("loss mark probabilities sum to {total}, expected 1")));
        }
        if !(rate_bound.is_finite() && rate_bound >= 0.0) {
            return Err(Error::Domain(format!("rate bound must be finite and non-negative, got {rate_bound}")));
        }
        let peak = match &rate {
            LossRate::Constant(r) => {
                if !(r.is_finite() && *r >= 0.0) {
                    return Err(Error::Domain(format!("loss rate must be non-negative, got {r}")));
                }
                Some(*r)
            }
            LossRate::Affine { intercept, slope } => {
                if !(intercept.is_finite() && slope.is_finite()) {
                    return Err(Error::Domain("affine loss rate needs finite coefficients".into()));
                }
                Some(intercept.max(intercept + slope).max(0.0))
            }
            LossRate::Custom(_) => None,
        };
        if let Some(peak) = peak {
            if peak > rate_bound * (1.0 + 1e-12) {
                return Err(Error::Bound { rate: peak, bound: rate_bound, t: 0.0, level: 0.0 });
            }
        }
        Ok(Self { rate, marks, rate_bound })
    }

    /// Constant rate with the bound set to the rate.
    pub fn constant(rate: f64, marks: Vec<MarkAtom>) -> Result<Self> {
        Self::new(LossRate::Constant(rate), marks, rate)
    }

    pub fn rate(&self) -> &LossRate {
        &self.rate
    }

    pub fn marks(&self) -> &[MarkAtom] {
        &self.marks
    }

    pub fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    /// True when the compensator does not depend on calendar time.
    pub fn is_time_homogeneous(&self) -> bool {
        !matches!(self.rate, LossRate::Custom(_))
    }

    /// Mark law in state ℓ after the support rule; empty when no atom fits.
    pub fn marks_at(&self, level: f64) -> Vec<MarkAtom> {
        let room = 1.0 - level + LOSS_TOL;
        let kept: Vec<MarkAtom> = self.marks.iter().copied().filter(|m| m.y <= room && m.p > 0.0).collect();
        let total: f64 = kept.iter().map(|m| m.p).sum();
        if total <= 0.0 {
            return Vec::new();
        }
        kept.into_iter().map(|m| MarkAtom { y: m.y, p: m.p / total }).collect()
    }

    /// ν^L(t, ℐ) in state ℓ, zero when no mark fits.
    pub fn total_rate(&self, t: f64, level: f64) -> f64 {
        let room = 1.0 - level + LOSS_TOL;
        if self.marks.iter().all(|m| m.y > room || m.p == 0.0) {
            return 0.0;
        }
        self.rate.eval(t, level)
    }

    /// Atom weights ν^L(t, {y}) in state ℓ.
    pub fn weights(&self, t: f64, level: f64) -> Vec<(f64, f64)> {
        let r = self.total_rate(t, level);
        self.marks_at(level).into_iter().map(|m| (m.y, r * m.p)).collect()
    }

    /// λ(t, x) = ν^L(t, (x - ℓ, 1]).
    pub fn intensity_lambda(&self, t: f64, x: f64, level: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Domain(format!("barrier {x} outside [0, 1]")));
        }
        if !(0.0..=1.0 + LOSS_TOL).contains(&level) {
            return Err(Error::Domain(format!("loss level {level} outside [0, 1]")));
        }
        if level > x + LOSS_TOL {
            return Err(Error::Domain(format!("intensity undefined after crossing: level {level} > barrier {x}")));
        }
        Ok(self.lambda_unchecked(t, x, level))
    }

    pub(crate) fn lambda_unchecked(&self, t: f64, x: f64, level: f64) -> f64 {
        let tail: f64 = self.marks_at(level).iter().filter(|m| crosses(level, m.y, x)).map(|m| m.p).sum();
        if tail == 0.0 {
            return 0.0;
        }
        self.total_rate(t, level) * tail
    }

    /// Exact sample of the loss path on `[0, horizon]` by thinning against the
    /// declared rate bound.
    pub fn simulate_loss_path(&self, horizon: f64, seed: u64, path_index: u64) -> Result<LossPath> {
        let mut rng = path_rng(seed, path_index, StreamKind::Loss);
        self.simulate_with(horizon, &mut rng)
    }

    pub fn simulate_with(&self, horizon: f64, rng: &mut ChaCha8Rng) -> Result<LossPath> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
        }
        let mut path = LossPath { horizon, times: Vec::new(), sizes: Vec::new(), levels: Vec::new() };
        if self.rate_bound == 0.0 {
            return Ok(path);
        }
        let mut t = 0.0;
        let mut level = 0.0;
        loop {
            let e: f64 = rng.sample(Exp1);
            t += e / self.rate_bound;
            if t > horizon {
                break;
            }
            let u: f64 = rng.random();
            let r = self.total_rate(t, level);
            if !(r.is_finite() && r >= 0.0) || r > self.rate_bound * (1.0 + 1e-12) {
                return Err(Error::Bound { rate: r, bound: self.rate_bound, t, level });
            }
            if u * self.rate_bound >= r {
                continue;
            }
            let marks = self.marks_at(level);
            let v: f64 = rng.random();
            let mut acc = 0.0;
            let mut y = marks[marks.len() - 1].y;
            for m in &marks {
                acc += m.p;
                if v < acc {
                    y = m.y;
                    break;
                }
            }
            level += y;
            path.times.push(t);
            path.sizes.push(y);
            path.levels.push(level);
        }
        Ok(path)
    }

    /// M^x on `grid`: `1{L_t <= x} + ∫_0^t 1{L_s <= x} λ(s, x) ds`.
    pub fn mx_compensated(&self, path: &LossPath, x: f64, grid: &[f64]) -> Result<Vec<f64>> {
        if grid.iter().any(|&t| t < 0.0 || t > path.horizon) {
            return Err(Error::Grid("martingale grid outside the simulated horizon".into()));
        }
        if grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Grid("martingale grid must be non-decreasing".into()));
        }
        let mut out = Vec::with_capacity(grid.len());
        let mut integral = 0.0;
        let mut s = 0.0;
        let mut k = 0;
        for &t in grid {
            while s < t {
                let next_jump = path.times.get(k).copied().unwrap_or(f64::INFINITY);
                let end = next_jump.min(t);
                let level = if k == 0 { 0.0 } else { path.levels[k - 1] };
                if !crossed(level, x) {
                    integral += self.integrate_lambda(s, end, x, level)?;
                }
                s = end;
                if next_jump <= t {
                    k += 1;
                }
            }
            let alive = !crossed(path.level_at(t), x);
            out.push(if alive { 1.0 } else { 0.0 } + integral);
        }
        Ok(out)
    }

    fn integrate_lambda(&self, a: f64, b: f64, x: f64, level: f64) -> Result<f64> {
        if b <= a {
            return Ok(0.0);
        }
        if self.is_time_homogeneous() {
            return Ok(self.lambda_unchecked(a, x, level) * (b - a));
        }
        Ok(quad::integrate(|s| self.lambda_unchecked(s, x, level), a, b, 1e-10, 1e-10)?.value)
    }
}

/// Whether a jump of size `y` from `level` takes the loss above `x`.
#[inline]
pub fn crosses(level: f64, y: f64, x: f64) -> bool {
    level + y > x + LOSS_TOL
}

/// Whether `level` is already above the barrier `x`.
#[inline]
pub fn crossed(level: f64, x: f64) -> bool {
    level > x + LOSS_TOL
}

/// One realization of L: jump times, sizes and the level after each jump.
#[derive(Debug, Clone, PartialEq)]
pub struct LossPath {
    pub horizon: f64,
    pub times: Vec<f64>,
    pub sizes: Vec<f64>,
    pub levels: Vec<f64>,
}

impl LossPath {
    pub fn empty(horizon: f64) -> Self {
        Self { horizon, times: Vec::new(), sizes: Vec::new(), levels: Vec::new() }
    }

    /// L(t), right-continuous.
    pub fn level_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            0.0
        } else {
            self.levels[k - 1]
        }
    }

    /// Number of jumps in `[0, t]`.
    pub fn count_until(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t)
    }

    /// Checks monotonicity, positivity of jumps and `L <= 1`.
    pub fn check_invariants(&self) -> Result<()> {
        let mut prev_t = 0.0;
        let mut prev_l = 0.0;
        for ((&t, &y), &l) in self.times.iter().zip(&self.sizes).zip(&self.levels) {
            if !(t > prev_t || (prev_t == 0.0 && t >= 0.0)) || t > self.horizon {
                return Err(Error::State { level: l, barrier: 1.0 });
            }
            if !(y > 0.0) || (l - prev_l - y).abs() > LOSS_TOL || l > 1.0 + LOSS_TOL {
                return Err(Error::State { level: l, barrier: 1.0 });
            }
            prev_t = t;
            prev_l = l;
        }
        Ok(())
    }
}
