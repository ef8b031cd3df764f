//! Discrete tenor and barrier structures: (T_k, x_i)-rates, forward bond
//! prices, the drift block D and the no-arbitrage drifts of forward-bond and
//! rate market models.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hjm::{ForwardSurface, HjmModel};
use crate::levy::{validate_grid, LevyTriplet, StepParts};
use crate::loss::{crossed, crosses, LossCompensatorSpec, LossPath};
use crate::rng::{path_rng, StreamKind};

/// Form of the ν^L-integrand in the drift block and in the market-model drifts.
///
/// `Compensated` carries the `-1` that makes the loss contribution vanish when
/// the contagion integrals vanish, as required for `F = 1{L <= x} g` to have
/// drift `-λ` when `g` is constant. `Uncompensated` omits it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTermConvention {
    #[default]
    Compensated,
    Uncompensated,
}

impl LossTermConvention {
    fn offset(self) -> f64 {
        match self {
            LossTermConvention::Compensated => 1.0,
            LossTermConvention::Uncompensated => 0.0,
        }
    }
}

/// Maturities `T_0 < ... < T_{n-1}` and barriers `x_0 < ... < x_{m-1} = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenorStructure {
    pub maturities: Vec<f64>,
    pub barriers: Vec<f64>,
}

impl TenorStructure {
    pub fn new(maturities: Vec<f64>, barriers: Vec<f64>) -> Result<Self> {
        let t = Self { maturities, barriers };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.maturities.len() < 2 || self.maturities[0] < 0.0 || self.maturities.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("tenor maturities must be non-negative, strictly increasing and at least two".into()));
        }
        if self.barriers.is_empty() || self.barriers.windows(2).any(|w| !(w[1] > w[0])) || self.barriers[0] < 0.0 {
            return Err(Error::Config("tenor barriers must be strictly increasing in [0, 1]".into()));
        }
        if *self.barriers.last().unwrap() != 1.0 {
            return Err(Error::Config("the last tenor barrier must be exactly 1".into()));
        }
        Ok(())
    }

    /// Number of rates, one per accrual period.
    pub fn n_rates(&self) -> usize {
        self.maturities.len() - 1
    }

    pub fn accrual(&self, k: usize) -> f64 {
        self.maturities[k + 1] - self.maturities[k]
    }

    /// Smallest `k` with `T_{k+1} > t`; `None` once the last maturity has passed.
    pub fn eta(&self, t: f64) -> Option<usize> {
        let k = self.maturities[1..].partition_point(|&m| m <= t);
        (k < self.n_rates()).then_some(k)
    }

    fn check(&self, k: usize, i: usize) -> Result<()> {
        if k >= self.n_rates() || i >= self.barriers.len() {
            return Err(Error::Index(format!("(k={k}, i={i}) outside the tenor structure ({} rates, {} barriers)", self.n_rates(), self.barriers.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteRate {
    pub k: usize,
    pub i: usize,
    pub value: f64,
    pub alive: bool,
}

/// L(t, T_k, x_i) = (p(t, T_k, x_i) / p(t, T_{k+1}, x_i) - 1) / δ_k on {L_t <= x_i}.
pub fn discrete_rate_from_surface(surface: &ForwardSurface, tenor: &TenorStructure, level: f64, k: usize, i: usize) -> Result<DiscreteRate> {
    tenor.check(k, i)?;
    let x = tenor.barriers[i];
    let p0 = surface.bond_price(level, tenor.maturities[k], x)?;
    let p1 = surface.bond_price(level, tenor.maturities[k + 1], x)?;
    let value = if p0.alive { (p0.pre_default / p1.pre_default - 1.0) / tenor.accrual(k) } else { 0.0 };
    Ok(DiscreteRate { k, i, value, alive: p0.alive })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardBondPrice {
    pub value: f64,
    /// Pre-default ratio g = p(t, S, x) / p(t, T, x).
    pub ratio: f64,
    pub alive: bool,
}

/// F(t, S, T, x) = 1{L_t <= x} p(t, S, x) / p(t, T, x).
pub fn forward_bond_price(surface: &ForwardSurface, level: f64, s: f64, maturity: f64, x: f64) -> Result<ForwardBondPrice> {
    let a = surface.bond_price(level, s, x)?;
    let b = surface.bond_price(level, maturity, x)?;
    let ratio = a.pre_default / b.pre_default;
    Ok(ForwardBondPrice { value: if a.alive { ratio } else { 0.0 }, ratio, alive: a.alive })
}

/// D from the integrated coefficients. `cstars(y)` returns
/// `(c*(t, T_k, x; y), c*(t, T_{k+1}, x; y))` for each mark.
#[allow(clippy::too_many_arguments)]
pub fn drift_block_from_stars(
    levy: &LevyTriplet,
    loss: &LossCompensatorSpec,
    t: f64,
    x: f64,
    level: f64,
    bk: &[f64],
    bk1: &[f64],
    cstars: impl Fn(f64) -> Result<(f64, f64)>,
    convention: LossTermConvention,
) -> Result<f64> {
    if crossed(level, x) {
        return Err(Error::State { level, barrier: x });
    }
    let diff: Vec<f64> = bk1.iter().zip(bk).map(|(a, b)| a - b).collect();
    let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
    let jumps = if levy.has_jumps() { levy.jump_transform(&neg)? - levy.jump_transform(bk)? + levy.jump_transform(bk1)? } else { 0.0 };
    let mut losses = 0.0;
    for (y, w) in loss.weights(t, level) {
        if crosses(level, y, x) {
            continue;
        }
        let (ck, ck1) = cstars(y)?;
        losses += w * ((ck1 - ck).exp() - (-ck).exp() + (-ck1).exp() - convention.offset());
    }
    Ok(jumps + losses + levy.sigma_inner(&diff, bk1))
}

/// D(t, T_k, T_{k+1}, x_i) for a continuous model, with `b(t, T, x) = 0` for `t > T`.
pub fn drift_block_d(model: &HjmModel, tenor: &TenorStructure, t: f64, k: usize, i: usize, level: f64, convention: LossTermConvention) -> Result<f64> {
    tenor.check(k, i)?;
    let x = tenor.barriers[i];
    let (tk, tk1) = (tenor.maturities[k].max(t), tenor.maturities[k + 1].max(t));
    let bk = model.bstar(t, tk, x, level)?;
    let bk1 = model.bstar(t, tk1, x, level)?;
    drift_block_from_stars(&model.levy, &model.loss, t, x, level, &bk, &bk1, |y| Ok((model.cstar(t, tk, x, level, y)?, model.cstar(t, tk1, x, level, y)?)), convention)
}

pub type BetaFn = Arc<dyn Fn(usize, usize, f64) -> Result<Vec<f64>> + Send + Sync>;
/// `(k, i, t, ℓ, y) -> γ_ki(t, ℓ; y)`.
pub type GammaFn = Arc<dyn Fn(usize, usize, f64, f64, f64) -> Result<f64> + Send + Sync>;

/// Volatilities β_ki(t) and loss loadings γ_ki(t, ℓ; y) of a market model.
#[derive(Clone)]
pub struct MarketCoefficientSpec {
    dim: usize,
    beta: BetaFn,
    gamma: GammaFn,
    pub beta_bound: Option<f64>,
    pub gamma_bound: Option<f64>,
}

impl fmt::Debug for MarketCoefficientSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketCoefficientSpec").field("dim", &self.dim).field("beta_bound", &self.beta_bound).field("gamma_bound", &self.gamma_bound).finish()
    }
}

impl MarketCoefficientSpec {
    pub fn new(dim: usize, beta: BetaFn, gamma: GammaFn) -> Self {
        Self { dim, beta, gamma, beta_bound: None, gamma_bound: None }
    }

    /// Time-constant coefficients, `betas[k][i]` and `gammas[k][i]`.
    pub fn constant(betas: Vec<Vec<Vec<f64>>>, gammas: Vec<Vec<f64>>) -> Result<Self> {
        let dim = betas.first().and_then(|r| r.first()).map_or(0, |b| b.len());
        if betas.iter().flatten().any(|b| b.len() != dim) {
            return Err(Error::Dimension { expected: dim, got: betas.iter().flatten().map(|b| b.len()).find(|&l| l != dim).unwrap_or(0) });
        }
        let betas = Arc::new(betas);
        let gammas = Arc::new(gammas);
        let beta: BetaFn = Arc::new(move |k, i, _t| betas.get(k).and_then(|r| r.get(i)).cloned().ok_or_else(|| Error::Index(format!("no β for (k={k}, i={i})"))));
        let gamma: GammaFn = Arc::new(move |k, i, _t, _l, _y| gammas.get(k).and_then(|r| r.get(i)).copied().ok_or_else(|| Error::Index(format!("no γ for (k={k}, i={i})"))));
        Ok(Self::new(dim, beta, gamma))
    }

    /// Integrates a continuous model over the accrual periods:
    /// `β_ki(t) = ∫_{max(t, T_k)}^{T_{k+1}} b(t, u, x_i) du`, zero once `t >= T_{k+1}`,
    /// and `γ_ki` likewise from c.
    pub fn from_model(model: &HjmModel, tenor: &TenorStructure) -> Self {
        let dim = model.levy.dim();
        let (m1, t1) = (model.clone(), tenor.clone());
        let beta: BetaFn = Arc::new(move |k, i, t| {
            t1.check(k, i)?;
            let (a, b) = (t1.maturities[k].max(t), t1.maturities[k + 1]);
            let mut out = vec![0.0; m1.levy.dim()];
            if b > a {
                m1.coeffs.vol.integral_into(t, a, b, t1.barriers[i], 0.0, &mut out)?;
            }
            Ok(out)
        });
        let (m2, t2) = (model.clone(), tenor.clone());
        let gamma: GammaFn = Arc::new(move |k, i, t, level, y| {
            t2.check(k, i)?;
            let (a, b) = (t2.maturities[k].max(t), t2.maturities[k + 1]);
            if b <= a {
                return Ok(0.0);
            }
            let x = t2.barriers[i];
            Ok(m2.cstar(t, b, x, level, y)? - m2.cstar(t, a, x, level, y)?)
        });
        Self::new(dim, beta, gamma)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta(&self, k: usize, i: usize, t: f64) -> Result<Vec<f64>> {
        let b = (self.beta)(k, i, t)?;
        if b.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: b.len() });
        }
        if let Some(bound) = self.beta_bound {
            if let Some(v) = b.iter().find(|v| v.abs() > bound) {
                return Err(Error::CoefficientBound { name: "beta", value: v.abs(), bound });
            }
        }
        Ok(b)
    }

    pub fn gamma(&self, k: usize, i: usize, t: f64, level: f64, y: f64) -> Result<f64> {
        let g = (self.gamma)(k, i, t, level, y)?;
        if let Some(bound) = self.gamma_bound {
            if g.abs() > bound {
                return Err(Error::CoefficientBound { name: "gamma", value: g.abs(), bound });
            }
        }
        Ok(g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn eta_for(tenor: &TenorStructure, t: f64, k: usize) -> Result<usize> {
    let eta = tenor.eta(t).ok_or_else(|| Error::Index(format!("no accrual period is running at t={t}")))?;
    if k < eta {
        return Err(Error::Index(format!("rate k={k} has already reset at t={t} (η={eta})")));
    }
    Ok(eta)
}

/// Loss term of the market-model drifts for one barrier:
/// `Σ_y ν^L({y}) (e^{γ_k} + (e^{-γ_k} - 1) Π_{j<k} e^{-γ_j} - offset) 1{ℓ + y <= x}`,
/// with `gammas[y][j]` running over `j = η..=k`.
fn loss_sum(weights: &[(f64, f64)], gammas: &[Vec<f64>], level: f64, x: f64, convention: LossTermConvention) -> f64 {
    let mut acc = 0.0;
    for ((y, w), g) in weights.iter().zip(gammas) {
        if crosses(level, *y, x) {
            continue;
        }
        let (gk, rest) = g.split_last().expect("at least one γ");
        let prod: f64 = rest.iter().map(|v| (-v).exp()).product();
        acc += w * (gk.exp() + ((-gk).exp() - 1.0) * prod - convention.offset());
    }
    acc
}

fn gammas_for(spec: &MarketCoefficientSpec, weights: &[(f64, f64)], eta: usize, k: usize, i: usize, t: f64, level: f64) -> Result<Vec<Vec<f64>>> {
    weights.iter().map(|&(y, _)| (eta..=k).map(|j| spec.gamma(j, i, t, level, y)).collect()).collect()
}

/// Drift α_ki of the forward-bond market model `dF/F- = α dt + ⟨β, dW⟩ + jumps`.
#[allow(clippy::too_many_arguments)]
pub fn alpha_forward_bond(
    spec: &MarketCoefficientSpec,
    levy: &LevyTriplet,
    loss: &LossCompensatorSpec,
    tenor: &TenorStructure,
    t: f64,
    k: usize,
    i: usize,
    level: f64,
    convention: LossTermConvention,
) -> Result<f64> {
    tenor.check(k, i)?;
    let x = tenor.barriers[i];
    if crossed(level, x) {
        return Err(Error::State { level, barrier: x });
    }
    let eta = eta_for(tenor, t, k)?;
    let betas: Vec<Vec<f64>> = (eta..=k).map(|j| spec.beta(j, i, t)).collect::<Result<_>>()?;
    let bk = betas.last().unwrap();
    let cov: f64 = betas.iter().map(|bj| levy.sigma_inner(bj, bk)).sum();

    let before: Vec<f64> = {
        let mut s = vec![0.0; levy.dim()];
        for bj in &betas[..betas.len() - 1] {
            for (a, v) in s.iter_mut().zip(bj) {
                *a += v;
            }
        }
        s
    };
    let jumps = match levy.atoms() {
        Some(atoms) => atoms
            .iter()
            .map(|(z, w)| {
                let prod: f64 = betas[..betas.len() - 1].iter().map(|bj| (-dot(bj, z)).exp()).product();
                w * (dot(bk, z).exp() + ((-dot(bk, z)).exp() - 1.0) * prod - 1.0)
            })
            .sum(),
        None if levy.has_jumps() => {
            let neg: Vec<f64> = bk.iter().map(|v| -v).collect();
            let after: Vec<f64> = before.iter().zip(bk).map(|(a, b)| a + b).collect();
            levy.jump_transform(&neg)? + levy.jump_transform(&after)? - levy.jump_transform(&before)?
        }
        None => 0.0,
    };

    let weights = loss.weights(t, level);
    let gammas = gammas_for(spec, &weights, eta, k, i, t, level)?;
    let lambda = loss.intensity_lambda(t, x, level)?;
    Ok(-lambda + cov + jumps + loss_sum(&weights, &gammas, level, x, convention))
}

/// Drift α_ki of the rate market model `dL/L- = α dt + ⟨β, dW⟩ + jumps`,
/// given `rates[j] = L(t-, T_j, x_i)` for every rate index up to `k`.
///
/// The covariance sum is weighted by `δ_j L_j / (1 + δ_j L_j)`, which is what
/// the telescoping `b*(t, T_{k+1}) = Σ_j β_j δ_j L_j / (1 + δ_j L_j)` produces.
#[allow(clippy::too_many_arguments)]
pub fn alpha_rate_model(
    spec: &MarketCoefficientSpec,
    levy: &LevyTriplet,
    loss: &LossCompensatorSpec,
    tenor: &TenorStructure,
    t: f64,
    k: usize,
    i: usize,
    level: f64,
    rates: &[f64],
    convention: LossTermConvention,
) -> Result<f64> {
    tenor.check(k, i)?;
    let x = tenor.barriers[i];
    if crossed(level, x) {
        return Err(Error::State { level, barrier: x });
    }
    let eta = eta_for(tenor, t, k)?;
    let betas: Vec<Vec<f64>> = (eta..=k).map(|j| spec.beta(j, i, t)).collect::<Result<_>>()?;
    let weights = loss.weights(t, level);
    let gammas = gammas_for(spec, &weights, eta, k, i, t, level)?;
    let lambda = loss.intensity_lambda(t, x, level)?;
    rate_drift(levy, tenor, eta, k, i, &betas, &weights, &gammas, level, lambda, rates, convention)
}

#[allow(clippy::too_many_arguments)]
fn rate_drift(
    levy: &LevyTriplet,
    tenor: &TenorStructure,
    eta: usize,
    k: usize,
    i: usize,
    betas: &[Vec<f64>],
    weights: &[(f64, f64)],
    gammas: &[Vec<f64>],
    level: f64,
    lambda: f64,
    rates: &[f64],
    convention: LossTermConvention,
) -> Result<f64> {
    if levy.has_jumps() {
        return Err(Error::Config("the rate market model needs a driver without jumps".into()));
    }
    if rates.len() <= k {
        return Err(Error::Index(format!("rate state of length {} does not reach k={k}", rates.len())));
    }
    let w = |j: usize| -> Result<f64> {
        let dl = tenor.accrual(j) * rates[j];
        if !(1.0 + dl > 0.0) {
            return Err(Error::Domain(format!("1 + δ L = {} is not positive for (k={j}, i={i})", 1.0 + dl)));
        }
        Ok(dl / (1.0 + dl))
    };
    let wk = w(k)?;
    if tenor.accrual(k) * rates[k] == 0.0 {
        return Err(Error::DegenerateRate { k, i });
    }
    let bk = betas.last().unwrap();
    let mut cov = 0.0;
    for (j, bj) in (eta..=k).zip(betas) {
        cov += w(j)? * levy.sigma_inner(bj, bk);
    }
    let x = tenor.barriers[i];
    Ok(-lambda + cov + loss_sum(weights, gammas, level, x, convention) / wk)
}

/// Single-name drift `-λ + ⟨β_k, Σ Σ_j δ_j L_j / (1 + δ_j L_j) β_j⟩`; the slices run
/// over `j = η..=k` with `k` last.
pub fn alpha_single_name(levy: &LevyTriplet, lambda: f64, betas: &[Vec<f64>], rates: &[f64], accruals: &[f64]) -> Result<f64> {
    if betas.is_empty() || betas.len() != rates.len() || rates.len() != accruals.len() {
        return Err(Error::Dimension { expected: betas.len(), got: rates.len().min(accruals.len()) });
    }
    let mut sum = vec![0.0; levy.dim()];
    for ((b, l), d) in betas.iter().zip(rates).zip(accruals) {
        let w = d * l / (1.0 + d * l);
        for (s, v) in sum.iter_mut().zip(b) {
            *s += w * v;
        }
    }
    Ok(-lambda + levy.sigma_inner(betas.last().unwrap(), &sum))
}

/// Rates of one barrier on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePath {
    pub times: Vec<f64>,
    /// `rates[n][k]`.
    pub rates: Vec<Vec<f64>>,
    pub alive: Vec<bool>,
    pub levels: Vec<f64>,
}

/// Simulates the rate market model for barrier `i` along the Gaussian part of
/// the Lévy stream and the loss stream of `path_index`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_market_model(
    spec: &MarketCoefficientSpec,
    levy: &LevyTriplet,
    loss: &LossCompensatorSpec,
    tenor: &TenorStructure,
    i: usize,
    initial: &[f64],
    grid: &[f64],
    seed: u64,
    path_index: u64,
    convention: LossTermConvention,
) -> Result<RatePath> {
    validate_grid(grid)?;
    let loss_path = loss.simulate_loss_path(*grid.last().unwrap(), seed, path_index)?;
    let mut rng = path_rng(seed, path_index, StreamKind::Levy);
    simulate_market_path(spec, levy, loss, tenor, i, initial, grid, &loss_path, &mut rng, convention)
}

/// As [`simulate_market_model`] with a given loss path and Gaussian stream.
///
/// Each rate evolves until its reset date `T_k` and is fixed afterwards; the
/// coefficients of already reset rates are taken as zero. Between loss jumps a
/// log-Euler step uses the drift
/// `α + λ - Σ_y ν^L({y}) (e^{γ_k} - 1) 1{ℓ + y <= x} (1 + δ L) / (δ L)`,
/// so that `α` is the compensated drift of L. Loss jumps add
/// `(1 + δ L) / δ (e^{γ_k} - 1)` at their exact times and set every rate to
/// zero when the barrier is crossed.
#[allow(clippy::too_many_arguments)]
pub fn simulate_market_path(
    spec: &MarketCoefficientSpec,
    levy: &LevyTriplet,
    loss: &LossCompensatorSpec,
    tenor: &TenorStructure,
    i: usize,
    initial: &[f64],
    grid: &[f64],
    loss_path: &LossPath,
    rng: &mut ChaCha8Rng,
    convention: LossTermConvention,
) -> Result<RatePath> {
    validate_grid(grid)?;
    tenor.check(0, i)?;
    if levy.has_jumps() {
        return Err(Error::Config("the rate market model needs a driver without jumps".into()));
    }
    let n_rates = tenor.n_rates();
    if initial.len() != n_rates {
        return Err(Error::Dimension { expected: n_rates, got: initial.len() });
    }
    if let Some(k) = initial.iter().position(|&l| !(l > 0.0)) {
        return Err(Error::DegenerateRate { k, i });
    }
    let x = tenor.barriers[i];
    let stepper = levy.stepper();
    let mut parts = StepParts::new(levy.dim());
    let mut rates = initial.to_vec();
    let mut level = 0.0;
    let mut alive = !crossed(level, x);
    if !alive {
        rates.iter_mut().for_each(|r| *r = 0.0);
    }
    let mut out = RatePath { times: vec![grid[0]], rates: vec![rates.clone()], alive: vec![alive], levels: vec![level] };
    let mut cursor = 0;
    for w in grid.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let dt = t1 - t0;
        stepper.sample(rng, t0, dt, &mut parts, None);
        let eta = tenor.eta(t0);
        if let (true, Some(eta)) = (alive, eta) {
            let beta_eff = |j: usize| -> Result<Vec<f64>> { if tenor.maturities[j] <= t0 { Ok(vec![0.0; levy.dim()]) } else { spec.beta(j, i, t0) } };
            let betas: Vec<Vec<f64>> = (eta..n_rates).map(beta_eff).collect::<Result<_>>()?;
            let weights = loss.weights(t0, level);
            let lambda = loss.intensity_lambda(t0, x, level)?;
            let gamma_eff = |j: usize, y: f64| -> Result<f64> { if tenor.maturities[j] <= t0 { Ok(0.0) } else { spec.gamma(j, i, t0, level, y) } };
            let gammas_all: Vec<Vec<f64>> = weights.iter().map(|&(y, _)| (eta..n_rates).map(|j| gamma_eff(j, y)).collect()).collect::<Result<_>>()?;
            let left = rates.clone();
            for k in eta..n_rates {
                if tenor.maturities[k] <= t0 {
                    continue;
                }
                let rel = k - eta;
                let gammas: Vec<Vec<f64>> = gammas_all.iter().map(|g| g[..=rel].to_vec()).collect();
                let alpha = rate_drift(levy, tenor, eta, k, i, &betas[..=rel], &weights, &gammas, level, lambda, &left, convention)?;
                let dl = tenor.accrual(k) * left[k];
                let jump_comp: f64 = weights.iter().zip(&gammas).filter(|((y, _), _)| !crosses(level, *y, x)).map(|((_, w), g)| w * (g[rel].exp() - 1.0)).sum::<f64>() * (1.0 + dl) / dl;
                let mu = alpha + lambda - jump_comp;
                let bk = &betas[rel];
                let var = levy.sigma_inner(bk, bk);
                rates[k] = left[k] * ((mu - 0.5 * var) * dt + dot(bk, &parts.gaussian)).exp();
                if !rates[k].is_finite() {
                    return Err(Error::Step { t: t1, maturity: tenor.maturities[k], barrier: x, reason: format!("rate {}", rates[k]) });
                }
            }
        }
        while cursor < loss_path.times.len() && loss_path.times[cursor] <= t1 {
            let (tj, y) = (loss_path.times[cursor], loss_path.sizes[cursor]);
            if alive {
                if crosses(level, y, x) {
                    alive = false;
                    rates.iter_mut().for_each(|r| *r = 0.0);
                } else if let Some(eta) = eta {
                    for k in eta..n_rates {
                        if tenor.maturities[k] <= t0 {
                            continue;
                        }
                        let g = spec.gamma(k, i, tj, level, y)?;
                        let d = tenor.accrual(k);
                        rates[k] += (1.0 + d * rates[k]) / d * (g.exp() - 1.0);
                        if rates[k] == 0.0 {
                            return Err(Error::DegenerateRate { k, i });
                        }
                    }
                }
            }
            level = loss_path.levels[cursor];
            cursor += 1;
        }
        out.times.push(t1);
        out.rates.push(rates.clone());
        out.alive.push(alive);
        out.levels.push(level);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjm::{CoefficientSpec, ContagionForm, DriftSpec, VolComponent, VolSpec};
    use crate::levy::{JumpMeasure, TableAtom};
    use crate::loss::MarkAtom;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn tenor() -> TenorStructure {
        TenorStructure::new(vec![0.5, 1.0, 1.5, 2.0], vec![0.1, 0.3, 1.0]).unwrap()
    }

    fn gaussian(d: usize) -> LevyTriplet {
        let mut s = vec![0.0; d * d];
        for k in 0..d {
            s[k * d + k] = 1.0;
        }
        LevyTriplet::gaussian(vec![0.0; d], s).unwrap()
    }

    fn no_loss() -> LossCompensatorSpec {
        LossCompensatorSpec::constant(0.0, vec![MarkAtom { y: 0.1, p: 1.0 }]).unwrap()
    }

    #[test]
    fn tenor_validation_and_eta() {
        assert!(TenorStructure::new(vec![1.0, 0.5], vec![1.0]).is_err());
        assert!(TenorStructure::new(vec![0.5, 1.0], vec![0.2, 0.9]).is_err());
        let t = tenor();
        assert_eq!(t.eta(0.2), Some(0));
        assert_eq!(t.eta(0.999), Some(0));
        assert_eq!(t.eta(1.0), Some(1));
        assert_eq!(t.eta(1.4999), Some(1));
        assert_eq!(t.eta(1.99), Some(2));
        assert_eq!(t.eta(2.0), None);
        assert_abs_diff_eq!(t.accrual(1), 0.5);
    }

    #[test]
    fn discrete_rate_examples() {
        let t = TenorStructure::new(vec![0.5, 1.0, 1.5], vec![0.3, 1.0]).unwrap();
        let flat = ForwardSurface::flat(0.05, 2.0, vec![0.3, 1.0], 0.04).unwrap();
        let r = discrete_rate_from_surface(&flat, &t, 0.0, 1, 0).unwrap();
        assert_abs_diff_eq!(r.value, ((0.04f64 * 0.5).exp() - 1.0) / 0.5, epsilon = 1e-13);
        let zero = ForwardSurface::flat(0.05, 2.0, vec![0.3, 1.0], 0.0).unwrap();
        assert_eq!(discrete_rate_from_surface(&zero, &t, 0.0, 0, 1).unwrap().value, 0.0);
        let dead = discrete_rate_from_surface(&flat, &t, 0.5, 0, 0).unwrap();
        assert_eq!((dead.value, dead.alive), (0.0, false));
        assert!(matches!(discrete_rate_from_surface(&flat, &t, 0.0, 2, 0), Err(Error::Index(_))));
        let f = forward_bond_price(&flat, 0.0, 0.5, 1.5, 0.3).unwrap();
        assert_abs_diff_eq!(f.value, (0.04f64).exp(), epsilon = 1e-13);
    }

    #[test]
    fn drift_block_examples() {
        let loss = LossCompensatorSpec::constant(2.0, vec![MarkAtom { y: 0.1, p: 1.0 }]).unwrap();
        let g = gaussian(1);
        // equal stars and no contagion
        let d = drift_block_from_stars(&g, &loss, 0.0, 0.5, 0.0, &[0.4], &[0.4], |_| Ok((0.0, 0.0)), LossTermConvention::Compensated).unwrap();
        assert_eq!(d, 0.0);
        // pure covariance
        let d = drift_block_from_stars(&g, &no_loss(), 0.0, 0.5, 0.0, &[1.0], &[2.0], |_| Ok((0.0, 0.0)), LossTermConvention::Compensated).unwrap();
        assert_abs_diff_eq!(d, 2.0, epsilon = 1e-15);
        // single atom z = 0.5 of mass 1
        let atom = LevyTriplet::new(vec![0.0], vec![0.0], JumpMeasure::UserTable { atoms: vec![TableAtom { z: vec![0.5], mass: 1.0 }] }).unwrap();
        let d = drift_block_from_stars(&atom, &no_loss(), 0.0, 0.5, 0.0, &[0.0], &[1.0], |_| Ok((0.0, 0.0)), LossTermConvention::Compensated).unwrap();
        assert_abs_diff_eq!(d, 0.5f64.exp() - 1.0 + (-0.5f64).exp() - 1.0, epsilon = 1e-15);
        assert!((d - 0.25525).abs() < 1e-5);
        assert!(matches!(drift_block_from_stars(&g, &loss, 0.0, 0.5, 0.6, &[0.0], &[0.0], |_| Ok((0.0, 0.0)), LossTermConvention::Compensated), Err(Error::State { .. })));
    }

    #[test]
    fn forward_bond_drift_examples() {
        let t = tenor();
        let zero = MarketCoefficientSpec::constant(vec![vec![vec![0.0]; 3]; 3], vec![vec![0.0; 3]; 3]).unwrap();
        let loss = LossCompensatorSpec::constant(2.0, vec![MarkAtom { y: 0.05, p: 0.5 }, MarkAtom { y: 0.2, p: 0.5 }]).unwrap();
        let g = gaussian(1);
        // x = 0.1, ℓ = 0: the 0.05 mark survives with weight 1, λ = 1
        let uncomp = alpha_forward_bond(&zero, &g, &loss, &t, 0.7, 1, 0, 0.0, LossTermConvention::Uncompensated).unwrap();
        assert_abs_diff_eq!(uncomp, -1.0 + 1.0, epsilon = 1e-15);
        let comp = alpha_forward_bond(&zero, &g, &loss, &t, 0.7, 1, 0, 0.0, LossTermConvention::Compensated).unwrap();
        assert_abs_diff_eq!(comp, -1.0, epsilon = 1e-15);
        // riskfree barrier
        let betas = vec![vec![vec![0.1]; 3], vec![vec![0.2]; 3], vec![vec![0.3]; 3]];
        let spec = MarketCoefficientSpec::constant(betas, vec![vec![0.0; 3]; 3]).unwrap();
        let a = alpha_forward_bond(&spec, &g, &loss, &t, 0.7, 2, 2, 0.0, LossTermConvention::Compensated).unwrap();
        assert_abs_diff_eq!(a, 0.3 * (0.1 + 0.2 + 0.3), epsilon = 1e-15);
        assert!(matches!(alpha_forward_bond(&spec, &g, &loss, &t, 1.2, 0, 2, 0.0, LossTermConvention::Compensated), Err(Error::Index(_))));
    }

    fn continuous_model(jumps: JumpMeasure) -> HjmModel {
        let levy = LevyTriplet::new(vec![0.01, -0.02], vec![0.04, 0.01, 0.01, 0.09], jumps).unwrap();
        let loss = LossCompensatorSpec::new(crate::loss::LossRate::Affine { intercept: 2.0, slope: 1.0 }, vec![MarkAtom { y: 0.05, p: 0.7 }, MarkAtom { y: 0.15, p: 0.3 }], 3.0).unwrap();
        let vol = VolSpec::Parametric(vec![VolComponent::ExpDecay { sigma: 0.3, decay: 0.8 }, VolComponent::Constant { sigma: -0.2 }]);
        HjmModel::new(levy, loss, CoefficientSpec::new(vol, ContagionForm::ExpDecay { kappa: 0.6, decay: 0.4 }, DriftSpec::NoArbitrage)).unwrap()
    }

    #[test]
    fn forward_bond_drift_equals_drift_block_route() {
        let atoms = JumpMeasure::UserTable { atoms: vec![TableAtom { z: vec![0.3, -0.2], mass: 1.5 }, TableAtom { z: vec![-1.5, 2.0], mass: 0.2 }] };
        let de = JumpMeasure::DoubleExponential { rate: 2.0, p_up: 0.4, eta_up: 6.0, eta_down: 5.0, direction: vec![0.6, 0.8] };
        for jumps in [atoms, de] {
            let m = continuous_model(jumps);
            let t = tenor();
            let spec = MarketCoefficientSpec::from_model(&m, &t);
            for &(time, level) in &[(0.5, 0.0), (0.8, 0.05), (1.3, 0.1), (1.9, 0.2)] {
                for k in t.eta(time).unwrap()..3 {
                    for i in 0..3 {
                        if crossed(level, t.barriers[i]) {
                            continue;
                        }
                        for conv in [LossTermConvention::Compensated, LossTermConvention::Uncompensated] {
                            let a = alpha_forward_bond(&spec, &m.levy, &m.loss, &t, time, k, i, level, conv).unwrap();
                            let d = drift_block_d(&m, &t, time, k, i, level, conv).unwrap();
                            let lambda = m.loss.intensity_lambda(time, t.barriers[i], level).unwrap();
                            assert_abs_diff_eq!(a, -lambda + d, epsilon = 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rate_drift_reductions() {
        let t = tenor();
        let g = gaussian(2);
        let zero = MarketCoefficientSpec::constant(vec![vec![vec![0.0, 0.0]; 3]; 3], vec![vec![0.0; 3]; 3]).unwrap();
        let loss = LossCompensatorSpec::constant(1.5, vec![MarkAtom { y: 0.2, p: 1.0 }]).unwrap();
        let rates = [0.03, 0.04, 0.05];
        let a = alpha_rate_model(&zero, &g, &loss, &t, 0.6, 2, 0, 0.0, &rates, LossTermConvention::Compensated).unwrap();
        assert_abs_diff_eq!(a, -1.5, epsilon = 1e-15);
        assert!(matches!(alpha_rate_model(&zero, &g, &loss, &t, 0.6, 2, 1, 0.0, &[0.03, 0.04, 0.0], LossTermConvention::Compensated), Err(Error::DegenerateRate { k: 2, i: 1 })));
        let jumpy = LevyTriplet::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0], JumpMeasure::UserTable { atoms: vec![TableAtom { z: vec![0.1, 0.0], mass: 1.0 }] }).unwrap();
        assert!(matches!(alpha_rate_model(&zero, &jumpy, &loss, &t, 0.6, 2, 1, 0.0, &rates, LossTermConvention::Compensated), Err(Error::Config(_))));
    }

    #[test]
    fn single_name_is_a_special_case() {
        // L = ½ 1{τ <= t}, barrier below ½, no contagion
        let t = TenorStructure::new(vec![0.0, 0.5, 1.0, 1.5], vec![0.25, 1.0]).unwrap();
        let g = LevyTriplet::gaussian(vec![0.0], vec![1.0]).unwrap();
        let loss = LossCompensatorSpec::constant(0.8, vec![MarkAtom { y: 0.5, p: 1.0 }]).unwrap();
        let betas = vec![vec![vec![0.15]; 2], vec![vec![0.2]; 2], vec![vec![0.25]; 2]];
        let spec = MarketCoefficientSpec::constant(betas, vec![vec![0.0; 2]; 3]).unwrap();
        let rates = [0.02, 0.03, 0.035];
        for k in 0..3 {
            let a = alpha_rate_model(&spec, &g, &loss, &t, 0.2, k, 0, 0.0, &rates, LossTermConvention::Compensated).unwrap();
            let b: Vec<Vec<f64>> = (0..=k).map(|j| vec![0.15 + 0.05 * j as f64]).collect();
            let acc: Vec<f64> = (0..=k).map(|j| t.accrual(j)).collect();
            let s = alpha_single_name(&g, 0.8, &b, &rates[..=k], &acc).unwrap();
            assert_abs_diff_eq!(a, s, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_coefficients_keep_rates_constant() {
        let t = tenor();
        let zero = MarketCoefficientSpec::constant(vec![vec![vec![0.0]; 3]; 3], vec![vec![0.0; 3]; 3]).unwrap();
        let grid: Vec<f64> = (0..=40).map(|n| n as f64 * 0.05).collect();
        let p = simulate_market_model(&zero, &gaussian(1), &no_loss(), &t, 1, &[0.03, 0.04, 0.05], &grid, 1, 0, LossTermConvention::Compensated).unwrap();
        for r in &p.rates {
            assert_eq!(r, &vec![0.03, 0.04, 0.05]);
        }
    }

    #[test]
    fn known_jump_applies_closed_form_update() {
        let t = tenor();
        let gam = 0.3;
        let spec = MarketCoefficientSpec::constant(vec![vec![vec![0.0]; 3]; 3], vec![vec![gam; 3]; 3]).unwrap();
        let grid: Vec<f64> = (0..=10).map(|n| n as f64 * 0.1).collect();
        let path = LossPath { horizon: 1.0, times: vec![0.55], sizes: vec![0.1], levels: vec![0.1] };
        let mut rng = path_rng(0, 0, StreamKind::Levy);
        let init = [0.03, 0.04, 0.05];
        let p = simulate_market_path(&spec, &gaussian(1), &no_loss(), &t, 1, &init, &grid, &path, &mut rng, LossTermConvention::Compensated).unwrap();
        // rate 0 reset at 0.5 and stays fixed; rates 1 and 2 jump
        let after = &p.rates[6];
        assert_eq!(after[0], 0.03);
        for k in 1..3 {
            let d = t.accrual(k);
            assert_abs_diff_eq!(after[k], init[k] + (1.0 + d * init[k]) / d * (gam.exp() - 1.0), epsilon = 1e-15);
        }
        // a crossing jump zeroes every rate
        let cross = LossPath { horizon: 1.0, times: vec![0.55], sizes: vec![0.4], levels: vec![0.4] };
        let p = simulate_market_path(&spec, &gaussian(1), &no_loss(), &t, 1, &init, &grid, &cross, &mut rng, LossTermConvention::Compensated).unwrap();
        assert!(!p.alive[6]);
        assert!(p.rates[10].iter().all(|&r| r == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn telescoping_reconstructs_integrated_coefficients(time in 0.5..1.999f64, i in 0usize..3, level_idx in 0usize..3) {
            let m = continuous_model(JumpMeasure::None);
            let t = tenor();
            let spec = MarketCoefficientSpec::from_model(&m, &t);
            let level = [0.0, 0.05, 0.15][level_idx];
            let eta = t.eta(time).unwrap();
            let x = t.barriers[i];
            for k in eta..3 {
                let mut sum = [0.0; 2];
                for j in eta..=k {
                    for (s, v) in sum.iter_mut().zip(spec.beta(j, i, time).unwrap()) {
                        *s += v;
                    }
                }
                let bstar = m.bstar(time, t.maturities[k + 1], x, level).unwrap();
                for (a, b) in sum.iter().zip(&bstar) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                for y in [0.05, 0.15] {
                    let c: f64 = (eta..=k).map(|j| spec.gamma(j, i, time, level, y).unwrap()).sum();
                    prop_assert!((c - m.cstar(time, t.maturities[k + 1], x, level, y).unwrap()).abs() < 1e-12);
                }
            }
        }
    }
}
