//! European loss payoffs and single-tranche CDOs priced from (T, x)-bonds, with
//! Monte Carlo oracles for deterministic risk-free rates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjm::ForwardSurface;
use crate::loss::{LossCompensatorSpec, LOSS_TOL};
use crate::mc::{path_moments, Execution, Moments, DEFAULT_BLOCK_SIZE};
use crate::quad::integrate;

/// Quadrature tolerance for payoff integrals.
pub const QUAD_TOL: f64 = 1e-8;
/// Annuities at or below this are treated as a written-down tranche.
pub const ANNUITY_FLOOR: f64 = 1e-14;

/// A payoff `h(L_T)` that is continuous on [0, 1] and differentiable away from
/// its declared kinks.
pub trait Payoff {
    fn value(&self, y: f64) -> f64;
    fn derivative(&self, y: f64) -> f64;
    fn kinks(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Payoffs that can be named in a scenario file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EuropeanPayoff {
    Constant { c: f64 },
    /// `a + b y`.
    Linear { a: f64, b: f64 },
    Call { strike: f64 },
    Put { strike: f64 },
    Tranche { x1: f64, x2: f64 },
}

impl Payoff for EuropeanPayoff {
    fn value(&self, y: f64) -> f64 {
        match *self {
            EuropeanPayoff::Constant { c } => c,
            EuropeanPayoff::Linear { a, b } => a + b * y,
            EuropeanPayoff::Call { strike } => (y - strike).max(0.0),
            EuropeanPayoff::Put { strike } => (strike - y).max(0.0),
            EuropeanPayoff::Tranche { x1, x2 } => tranche_notional(x1, x2, y),
        }
    }

    fn derivative(&self, y: f64) -> f64 {
        match *self {
            EuropeanPayoff::Constant { .. } => 0.0,
            EuropeanPayoff::Linear { b, .. } => b,
            EuropeanPayoff::Call { strike } => f64::from(y > strike),
            EuropeanPayoff::Put { strike } => -f64::from(y < strike),
            EuropeanPayoff::Tranche { x1, x2 } => -f64::from(y > x1 && y < x2),
        }
    }

    fn kinks(&self) -> Vec<f64> {
        match *self {
            EuropeanPayoff::Call { strike } | EuropeanPayoff::Put { strike } => vec![strike],
            EuropeanPayoff::Tranche { x1, x2 } => vec![x1, x2],
            _ => Vec::new(),
        }
    }
}

fn tranche_notional(x1: f64, x2: f64, y: f64) -> f64 {
    (x2 - y).max(0.0) - (x1 - y).max(0.0)
}

/// Tranche `(x1, x2]` paying coupons at `coupon_dates`; `effective_date` is
/// the start of protection and defaults to the valuation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranchePayoff {
    pub x1: f64,
    pub x2: f64,
    pub coupon_dates: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_date: Option<f64>,
}

impl TranchePayoff {
    pub fn new(x1: f64, x2: f64, coupon_dates: Vec<f64>) -> Result<Self> {
        let t = Self { x1, x2, coupon_dates, effective_date: None };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.x1 && self.x1 < self.x2 && self.x2 <= 1.0) {
            return Err(Error::Config(format!("tranche needs 0 <= x1 < x2 <= 1, got ({}, {})", self.x1, self.x2)));
        }
        if self.coupon_dates.is_empty() || self.coupon_dates.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("coupon dates must be non-empty and strictly increasing".into()));
        }
        Ok(())
    }

    /// H(x) = (x2 - x)^+ - (x1 - x)^+.
    pub fn notional(&self, x: f64) -> f64 {
        tranche_notional(self.x1, self.x2, x)
    }

    fn dates(&self, surface: &ForwardSurface) -> Result<(f64, &[f64])> {
        self.validate()?;
        let t = surface.t();
        let t0 = self.effective_date.unwrap_or(t);
        let last = *self.coupon_dates.last().unwrap();
        if t0 < t - 1e-12 || t0 > self.coupon_dates[0] + 1e-12 || last > surface.horizon() + 1e-9 {
            return Err(Error::Config(format!("tranche dates [{t0}, {last}] are not inside the surface window [{t}, {}]", surface.horizon())));
        }
        Ok((t0, &self.coupon_dates))
    }
}

impl Payoff for TranchePayoff {
    fn value(&self, y: f64) -> f64 {
        self.notional(y)
    }

    fn derivative(&self, y: f64) -> f64 {
        -f64::from(y > self.x1 && y < self.x2)
    }

    fn kinks(&self) -> Vec<f64> {
        vec![self.x1, self.x2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceEstimate {
    pub value: f64,
    pub error_estimate: f64,
}

/// `h(1) P(t, T) - ∫_0^1 h'(y) P(t, T, y) dy`.
///
/// `P(t, T, y)` is read from the barrier node at or below `y`, which is exact
/// when losses only take values on the barrier grid. `h'` must vanish below the
/// first barrier unless that barrier is 0.
pub fn price_european(surface: &ForwardSurface, level: f64, maturity: f64, payoff: &dyn Payoff) -> Result<PriceEstimate> {
    let barriers = surface.barriers();
    let one = surface.bond_price(level, maturity, 1.0)?;
    let mut kinks = payoff.kinks();
    kinks.retain(|k| (0.0..=1.0).contains(k));
    let cell_integral = |a: f64, b: f64| -> Result<(f64, f64)> {
        let mut cuts = vec![a];
        cuts.extend(kinks.iter().copied().filter(|&k| k > a && k < b));
        cuts.push(b);
        let mut acc = (0.0, 0.0);
        for w in cuts.windows(2) {
            let e = integrate(|y| payoff.derivative(y), w[0], w[1], QUAD_TOL, QUAD_TOL)?;
            acc.0 += e.value;
            acc.1 += e.error;
        }
        Ok(acc)
    };
    if barriers[0] > 0.0 {
        let (below, err) = cell_integral(0.0, barriers[0])?;
        if below.abs() > QUAD_TOL + err {
            return Err(Error::Config(format!("payoff varies below the first barrier {}", barriers[0])));
        }
    }
    let mut value = payoff.value(1.0) * one.price;
    let mut error = 0.0;
    for (k, w) in barriers.windows(2).enumerate() {
        let p = surface.bond_price(level, maturity, barriers[k])?.price;
        let (i, e) = cell_integral(w[0], w[1])?;
        value -= p * i;
        error += p * e;
    }
    Ok(PriceEstimate { value, error_estimate: error })
}

/// Value and legs of a single-tranche CDO, `V(t, S) = S A + N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StcdoQuote {
    pub spread: f64,
    pub value: f64,
    /// `A = Σ_i ∫_{(x1, x2]} P(t, T_i, y) dy`.
    pub annuity: f64,
    /// `S A`.
    pub payment_leg: f64,
    /// `-N`, the value of the protection payments.
    pub default_leg: f64,
    /// `∫_{(x1, x2]} ∫_{T_0}^{T_n} f(t, u) P(t, u, y) du dy`.
    pub accrual_integral: f64,
    /// `None` when the annuity is degenerate.
    pub par_spread: Option<f64>,
    pub error_estimate: f64,
    /// The closed form treats risk-free and risky bonds as independent.
    pub assumes_independence: bool,
}

/// Overlap of `(x1, x2]` with each barrier cell `[x_k, x_{k+1})`.
fn tranche_weights(surface: &ForwardSurface, tranche: &TranchePayoff) -> Result<Vec<(usize, f64)>> {
    let barriers = surface.barriers();
    if tranche.x1 < barriers[0] - LOSS_TOL {
        return Err(Error::Config(format!("tranche attachment {} lies below the first barrier {}", tranche.x1, barriers[0])));
    }
    Ok(barriers
        .windows(2)
        .enumerate()
        .map(|(k, w)| (k, (w[1].min(tranche.x2) - w[0].max(tranche.x1)).max(0.0)))
        .filter(|&(_, len)| len > 0.0)
        .collect())
}

/// `∫_a^b f(t, u) P(t, u, x_b) du` with piecewise-constant forwards, exact per cell.
fn accrual_row(surface: &ForwardSurface, b: usize, level: f64, a: f64, end: f64) -> Result<f64> {
    let x = surface.barriers()[b];
    let alive = surface.bond_price(level, a, x)?.alive;
    if !alive || end <= a {
        return Ok(0.0);
    }
    let h = surface.h();
    let one = surface.riskfree_index();
    let mut acc = 0.0;
    let mut u = a;
    while u < end - 1e-14 {
        let j = ((u / h + 1e-9).floor() as usize).min(surface.n_cells() - 1);
        let next = ((j + 1) as f64 * h).min(end);
        let len = next - u;
        let p = surface.log_pre_default(b, u)?.exp();
        let (fr, fy) = (surface.cell(one, j), surface.cell(b, j));
        let factor = if (fy * len).abs() < 1e-10 { len * (1.0 - 0.5 * fy * len) } else { (1.0 - (-fy * len).exp()) / fy };
        acc += fr * p * factor;
        u = next;
    }
    Ok(acc)
}

pub fn stcdo_value(surface: &ForwardSurface, level: f64, tranche: &TranchePayoff, spread: f64) -> Result<StcdoQuote> {
    let (t0, dates) = tranche.dates(surface)?;
    let tn = *dates.last().unwrap();
    let barriers = surface.barriers();
    let mut annuity = 0.0;
    let mut non_spread = 0.0;
    let mut accrual = 0.0;
    for (b, len) in tranche_weights(surface, tranche)? {
        let x = barriers[b];
        let mut a_b = 0.0;
        for &ti in dates {
            a_b += surface.bond_price(level, ti, x)?.price;
        }
        let acc = accrual_row(surface, b, level, t0, tn)?;
        annuity += len * a_b;
        accrual += len * acc;
        non_spread += len * (surface.bond_price(level, tn, x)?.price - surface.bond_price(level, t0, x)?.price + acc);
    }
    let par_spread = (annuity > ANNUITY_FLOOR).then(|| -non_spread / annuity);
    Ok(StcdoQuote {
        spread,
        value: spread * annuity + non_spread,
        annuity,
        payment_leg: spread * annuity,
        default_leg: -non_spread,
        accrual_integral: accrual,
        par_spread,
        error_estimate: 0.0,
        assumes_independence: true,
    })
}

/// Spread `S*` with `V(t, S*) = 0`.
pub fn par_spread(surface: &ForwardSurface, level: f64, tranche: &TranchePayoff) -> Result<f64> {
    let q = stcdo_value(surface, level, tranche, 0.0)?;
    q.par_spread.ok_or(Error::DegenerateAnnuity { annuity: q.annuity })
}

fn discount_at(surface: &ForwardSurface, u: f64) -> Result<f64> {
    Ok(surface.log_pre_default(surface.riskfree_index(), u)?.exp())
}

fn check_time_zero(surface: &ForwardSurface) -> Result<()> {
    if surface.time_index() != 0 {
        return Err(Error::Config("Monte Carlo oracles start from a surface at t = 0".into()));
    }
    Ok(())
}

/// Monte Carlo legs of a tranche under deterministic risk-free rates.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLegEstimate {
    pub payment_leg: f64,
    pub payment_se: f64,
    pub default_leg: f64,
    pub default_se: f64,
    pub value: f64,
    pub value_se: f64,
    pub n_paths: u64,
}

/// Payment leg `S Σ_i D(T_i) E[H(L_{T_i})]` and default leg
/// `E[Σ_j D(τ_j) (H(L_{τ_j-}) - H(L_{τ_j}))]` over the jumps in `(T_0, T_n]`,
/// discounted with the risk-free row of `surface`.
pub fn mc_two_leg(
    surface: &ForwardSurface,
    loss: &LossCompensatorSpec,
    tranche: &TranchePayoff,
    spread: f64,
    n_paths: u64,
    seed: u64,
    exec: Execution,
) -> Result<TwoLegEstimate> {
    check_time_zero(surface)?;
    let (t0, dates) = tranche.dates(surface)?;
    let tn = *dates.last().unwrap();
    let coupon: Vec<(f64, f64)> = dates.iter().map(|&d| Ok((d, discount_at(surface, d)?))).collect::<Result<_>>()?;
    let m: Moments = path_moments(n_paths, DEFAULT_BLOCK_SIZE, exec, 3, |p, out| {
        let path = loss.simulate_loss_path(tn, seed, p)?;
        let pay: f64 = coupon.iter().map(|&(d, df)| df * tranche.notional(path.level_at(d))).sum::<f64>() * spread;
        let mut def = 0.0;
        let mut prev = 0.0;
        for (&tau, &lvl) in path.times.iter().zip(&path.levels) {
            if tau > t0 && tau <= tn {
                def += discount_at(surface, tau)? * (tranche.notional(prev) - tranche.notional(lvl));
            }
            prev = lvl;
        }
        out[0] = pay;
        out[1] = def;
        out[2] = pay - def;
        Ok(0.0)
    })?;
    Ok(TwoLegEstimate {
        payment_leg: m.mean[0],
        payment_se: m.se[0],
        default_leg: m.mean[1],
        default_se: m.se[1],
        value: m.mean[2],
        value_se: m.se[2],
        n_paths: m.n,
    })
}

/// `E[D_T h(L_T)]` under deterministic risk-free rates.
pub fn mc_european(
    surface: &ForwardSurface,
    loss: &LossCompensatorSpec,
    maturity: f64,
    payoff: &(dyn Payoff + Sync),
    n_paths: u64,
    seed: u64,
    exec: Execution,
) -> Result<(f64, f64)> {
    check_time_zero(surface)?;
    let df = discount_at(surface, maturity)?;
    let m = path_moments(n_paths, DEFAULT_BLOCK_SIZE, exec, 1, |p, out| {
        let path = loss.simulate_loss_path(maturity, seed, p)?;
        out[0] = df * payoff.value(path.level_at(maturity));
        Ok(0.0)
    })?;
    Ok((m.mean[0], m.se[0]))
}
