//! Continuous-parameter (T, x)-forward rate model: coefficient functions,
//! forward surfaces, bond prices and the drift conditions.
//!
//! Surfaces are stored on a uniform maturity grid with spacing `h` as cell
//! averages: cell `j` holds the average of `f(t, ·, x)` over `[j h, (j+1) h)`,
//! so `p(t, T, x) = exp(-h Σ cells)` is exact for piecewise-constant forwards.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::MarkovLossLattice;
use crate::levy::LevyTriplet;
use crate::loss::{crossed, crosses, LossCompensatorSpec, LOSS_TOL};
use crate::quad;

/// One component of the volatility vector b(t, T).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolComponent {
    Constant { sigma: f64 },
    /// `sigma * exp(-decay (T - t))`.
    ExpDecay { sigma: f64, decay: f64 },
    /// `sigma * exp(growth t) * exp(-decay T)`.
    Separable { sigma: f64, growth: f64, decay: f64 },
}

/// `∫_a^b e^{-k s} ds`, stable as `k -> 0`.
fn exp_integral(k: f64, a: f64, b: f64) -> f64 {
    if (k * (b - a)).abs() < 1e-8 {
        let mid = 0.5 * (a + b);
        (b - a) * (-k * mid).exp()
    } else {
        ((-k * a).exp() - (-k * b).exp()) / k
    }
}

impl VolComponent {
    pub fn value(&self, t: f64, maturity: f64) -> f64 {
        match *self {
            VolComponent::Constant { sigma } => sigma,
            VolComponent::ExpDecay { sigma, decay } => sigma * (-decay * (maturity - t)).exp(),
            VolComponent::Separable { sigma, growth, decay } => sigma * (growth * t).exp() * (-decay * maturity).exp(),
        }
    }

    /// `∫_a^b value(t, u) du`.
    pub fn integral(&self, t: f64, a: f64, b: f64) -> f64 {
        match *self {
            VolComponent::Constant { sigma } => sigma * (b - a),
            VolComponent::ExpDecay { sigma, decay } => sigma * exp_integral(decay, a - t, b - t),
            VolComponent::Separable { sigma, growth, decay } => sigma * (growth * t).exp() * exp_integral(decay, a, b),
        }
    }
}

pub type VolFn = Arc<dyn Fn(f64, f64, f64, f64) -> Vec<f64> + Send + Sync>;

/// Volatility b(t, T, x, ℓ) of the forward rates.
#[derive(Clone)]
pub enum VolSpec {
    /// Parametric components, identical for every barrier.
    Parametric(Vec<VolComponent>),
    /// Arbitrary `(t, T, x, ℓ) -> b`; cell integrals by quadrature.
    Custom { dim: usize, f: VolFn },
}

impl fmt::Debug for VolSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolSpec::Parametric(c) => f.debug_tuple("Parametric").field(c).finish(),
            VolSpec::Custom { dim, .. } => write!(f, "Custom {{ dim: {dim} }}"),
        }
    }
}

impl VolSpec {
    pub fn dim(&self) -> usize {
        match self {
            VolSpec::Parametric(c) => c.len(),
            VolSpec::Custom { dim, .. } => *dim,
        }
    }

    pub fn value(&self, t: f64, maturity: f64, x: f64, level: f64) -> Vec<f64> {
        match self {
            VolSpec::Parametric(c) => c.iter().map(|v| v.value(t, maturity)).collect(),
            VolSpec::Custom { f, .. } => f(t, maturity, x, level),
        }
    }

    /// `∫_a^b b(t, u, x) du` written into `out`.
    pub fn integral_into(&self, t: f64, a: f64, b: f64, x: f64, level: f64, out: &mut [f64]) -> Result<()> {
        match self {
            VolSpec::Parametric(c) => {
                for (o, v) in out.iter_mut().zip(c) {
                    *o = v.integral(t, a, b);
                }
            }
            VolSpec::Custom { f, dim } => {
                for (k, o) in out.iter_mut().enumerate().take(*dim) {
                    *o = quad::integrate(|u| f(t, u, x, level)[k], a, b, 1e-12, 1e-10)?.value;
                }
            }
        }
        Ok(())
    }

    /// b*(t, T, x) = ∫_t^T b(t, u, x) du.
    pub fn bstar(&self, t: f64, maturity: f64, x: f64, level: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        if maturity > t {
            self.integral_into(t, t, maturity, x, level, &mut out)?;
        }
        Ok(out)
    }
}

/// Contagion loading c(t, T, x; y) applied to f when the loss jumps by y.
/// Every form vanishes on the risk-free slice x = 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContagionForm {
    None,
    Constant { kappa: f64 },
    /// `kappa * exp(-decay (T - t))`.
    ExpDecay { kappa: f64, decay: f64 },
    /// `c = s(T - t; ℓ + y) - s(T - t; ℓ)` where `s = -∂_τ log Q` is the
    /// spread implied by the Markov loss process. Keeps `f(t, ·, x) - f(t, ·, 1)`
    /// equal to the loss-implied spread curve of the current state.
    LossImplied,
}

pub type DriftFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;

/// How the drift a(t, T, x) is produced.
#[derive(Clone)]
pub enum DriftSpec {
    /// Generated from (b, c) through the first drift condition; the short end
    /// is pinned by the second.
    NoArbitrage,
    Zero,
    Constant(f64),
    /// `a(t, u) = ⟨∇J(b*(t, u)), b(t, u)⟩` sampled at cell midpoints, the
    /// continuous-time HJM drift without the discrete correction. The loss part
    /// is the exact one.
    ContinuousHjm,
    Custom(DriftFn),
}

impl fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DriftSpec::NoArbitrage => write!(f, "NoArbitrage"),
            DriftSpec::Zero => write!(f, "Zero"),
            DriftSpec::Constant(a) => write!(f, "Constant({a})"),
            DriftSpec::ContinuousHjm => write!(f, "ContinuousHjm"),
            DriftSpec::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoefficientSpec {
    pub vol: VolSpec,
    pub contagion: ContagionForm,
    pub drift: DriftSpec,
    /// Declared bound on |b| components, checked on evaluation.
    pub vol_bound: Option<f64>,
    /// Declared K(T, x) bound on |c|, checked on evaluation.
    pub contagion_bound: Option<f64>,
}

impl CoefficientSpec {
    pub fn new(vol: VolSpec, contagion: ContagionForm, drift: DriftSpec) -> Self {
        Self { vol, contagion, drift, vol_bound: None, contagion_bound: None }
    }

    pub fn is_no_arbitrage(&self) -> bool {
        matches!(self.drift, DriftSpec::NoArbitrage)
    }
}

pub(crate) fn is_riskfree(x: f64) -> bool {
    x >= 1.0 - LOSS_TOL
}

/// Driver, loss compensator and coefficients of one model.
#[derive(Debug, Clone)]
pub struct HjmModel {
    pub levy: LevyTriplet,
    pub loss: LossCompensatorSpec,
    pub coeffs: CoefficientSpec,
    lattice: Option<Arc<MarkovLossLattice>>,
}

impl HjmModel {
    pub fn new(levy: LevyTriplet, loss: LossCompensatorSpec, coeffs: CoefficientSpec) -> Result<Self> {
        if coeffs.vol.dim() != levy.dim() {
            return Err(Error::Dimension { expected: levy.dim(), got: coeffs.vol.dim() });
        }
        let lattice = if loss.is_time_homogeneous() {
            Some(Arc::new(MarkovLossLattice::build(&loss, 0.0)?))
        } else if coeffs.contagion == ContagionForm::LossImplied {
            return Err(Error::Config("loss-implied contagion needs a time-homogeneous loss rate".into()));
        } else {
            None
        };
        Ok(Self { levy, loss, coeffs, lattice })
    }

    pub fn lattice(&self) -> Option<&Arc<MarkovLossLattice>> {
        self.lattice.as_ref()
    }

    fn lattice_or_err(&self) -> Result<&MarkovLossLattice> {
        self.lattice.as_deref().ok_or_else(|| Error::Config("model has no loss lattice".into()))
    }

    /// b*(t, T, x) in state ℓ.
    pub fn bstar(&self, t: f64, maturity: f64, x: f64, level: f64) -> Result<Vec<f64>> {
        let b = self.coeffs.vol.bstar(t, maturity, x, level)?;
        self.check_vol(&b, maturity - t)?;
        Ok(b)
    }

    pub(crate) fn check_vol(&self, b: &[f64], length: f64) -> Result<()> {
        if let Some(bound) = self.coeffs.vol_bound {
            for &v in b {
                if v.abs() > bound * length.abs() * (1.0 + 1e-12) + 1e-300 {
                    return Err(Error::CoefficientBound { name: "b", value: v.abs() / length.abs(), bound });
                }
            }
        }
        Ok(())
    }

    /// Contagion loading c(t, T, x; y) in state ℓ.
    pub fn contagion(&self, t: f64, maturity: f64, x: f64, level: f64, y: f64) -> Result<f64> {
        if is_riskfree(x) {
            return Ok(0.0);
        }
        let tau = maturity - t;
        let c = match self.coeffs.contagion {
            ContagionForm::None => 0.0,
            ContagionForm::Constant { kappa } => kappa,
            ContagionForm::ExpDecay { kappa, decay } => kappa * (-decay * tau).exp(),
            ContagionForm::LossImplied => {
                if crosses(level, y, x) {
                    0.0
                } else {
                    self.implied_spread(tau, x, level + y)? - self.implied_spread(tau, x, level)?
                }
            }
        };
        self.check_contagion(c)?;
        Ok(c)
    }

    pub(crate) fn check_contagion(&self, c: f64) -> Result<()> {
        if let Some(bound) = self.coeffs.contagion_bound {
            if c.abs() > bound * (1.0 + 1e-12) {
                return Err(Error::CoefficientBound { name: "c", value: c.abs(), bound });
            }
        }
        Ok(())
    }

    /// `-∂_τ log Q(τ, x, ℓ)` computed from the generator: `(G Q)(ℓ) / Q(ℓ)`.
    pub fn implied_spread(&self, tau: f64, x: f64, level: f64) -> Result<f64> {
        let lat = self.lattice_or_err()?;
        let q = lat.survival(tau, x, level)?;
        let s = lat.state_of(level).ok_or_else(|| Error::Domain(format!("level {level} not on the loss lattice")))?;
        let mut gq = 0.0;
        for (y, w) in self.loss.weights(0.0, level) {
            let next = if crosses(level, y, x) { 0.0 } else { lat.survival(tau, x, level + y)? };
            gq += w * (next - q);
        }
        let _ = s;
        Ok(-gq / q)
    }

    /// c*(t, T, x; y) = ∫_t^T c(t, u, x; y) du in state ℓ.
    pub fn cstar(&self, t: f64, maturity: f64, x: f64, level: f64, y: f64) -> Result<f64> {
        if is_riskfree(x) || maturity <= t {
            return Ok(0.0);
        }
        let tau = maturity - t;
        Ok(match self.coeffs.contagion {
            ContagionForm::None => 0.0,
            ContagionForm::Constant { kappa } => kappa * tau,
            ContagionForm::ExpDecay { kappa, decay } => kappa * exp_integral(decay, 0.0, tau),
            ContagionForm::LossImplied => {
                if crosses(level, y, x) {
                    0.0
                } else {
                    let lat = self.lattice_or_err()?;
                    lat.survival(tau, x, level)?.ln() - lat.survival(tau, x, level + y)?.ln()
                }
            }
        })
    }
}

/// a*(t, s) = J(b*(t, s)) for the risk-free slice.
pub fn riskfree_drift(levy: &LevyTriplet, bstar: &[f64], t: f64, s: f64) -> Result<f64> {
    if !levy.in_domain_b(bstar)? {
        return Err(Error::Domain(format!("b*(t={t}, s={s}) = {bstar:?} is outside B")));
    }
    levy.laplace_exponent(bstar)
}

/// Required a*(t, s, x) = J(b*) + Σ_y ν^L(t, {y}) (e^{-c*(y)} - 1) 1{ℓ + y <= x}.
pub fn dc1_drift(model: &HjmModel, t: f64, s: f64, x: f64, level: f64) -> Result<f64> {
    if crossed(level, x) {
        return Err(Error::State { level, barrier: x });
    }
    let bstar = model.bstar(t, s, x, level)?;
    let mut a = riskfree_drift(&model.levy, &bstar, t, s)?;
    for (y, w) in model.loss.weights(t, level) {
        if !crosses(level, y, x) {
            a += w * ((-model.cstar(t, s, x, level, y)?).exp() - 1.0);
        }
    }
    Ok(a)
}

/// f(t, t, x) = f(t, t) + λ(t, x).
pub fn dc2_short_rate(riskfree_short: f64, loss: &LossCompensatorSpec, t: f64, x: f64, level: f64) -> Result<f64> {
    if crossed(level, x) {
        return Err(Error::State { level, barrier: x });
    }
    Ok(riskfree_short + loss.intensity_lambda(t, x, level)?)
}

/// Price of the (T, x)-bond with its pre-default factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BondQuote {
    pub t: f64,
    pub maturity: f64,
    pub barrier: f64,
    pub price: f64,
    pub pre_default: f64,
    pub alive: bool,
}

/// Forward surface at grid time `t = n h`, cell-average representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSurface {
    h: f64,
    n: usize,
    n_cells: usize,
    barriers: Vec<f64>,
    cells: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct SurfaceRow {
    #[serde(rename = "T")]
    maturity: f64,
    x: f64,
    f0: f64,
}

impl ForwardSurface {
    /// Surface at t = 0 from barrier-major cell values.
    pub fn from_cells(h: f64, barriers: Vec<f64>, cells: Vec<f64>) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Grid(format!("cell width must be positive, got {h}")));
        }
        if barriers.is_empty() || barriers.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Grid("barriers must be strictly increasing".into()));
        }
        if barriers[0] < 0.0 || *barriers.last().unwrap() != 1.0 {
            return Err(Error::Grid("barriers must lie in [0, 1] and end with 1".into()));
        }
        if !cells.len().is_multiple_of(barriers.len()) || cells.is_empty() {
            return Err(Error::Grid("cell count is not a multiple of the barrier count".into()));
        }
        if cells.iter().any(|c| !c.is_finite()) {
            return Err(Error::Grid("non-finite forward rate".into()));
        }
        let n_cells = cells.len() / barriers.len();
        Ok(Self { h, n: 0, n_cells, barriers, cells })
    }

    /// Cells from `f(u_j, x)` evaluated at every cell start.
    pub fn from_fn(h: f64, horizon: f64, barriers: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let n_cells = cells_for(h, horizon)?;
        let mut cells = Vec::with_capacity(n_cells * barriers.len());
        for &x in &barriers {
            for j in 0..n_cells {
                cells.push(f(j as f64 * h, x));
            }
        }
        Self::from_cells(h, barriers, cells)
    }

    pub fn flat(h: f64, horizon: f64, barriers: Vec<f64>, rate: f64) -> Result<Self> {
        Self::from_fn(h, horizon, barriers, |_, _| rate)
    }

    /// Risk-free cells plus the loss-implied spread of the Markov loss process
    /// started at zero: `p(0, u_j, x) = p(0, u_j, 1) Q(u_j, x, 0)` on the grid.
    pub fn loss_implied(h: f64, horizon: f64, barriers: Vec<f64>, riskfree: impl Fn(f64) -> f64, lattice: &MarkovLossLattice) -> Result<Self> {
        let n_cells = cells_for(h, horizon)?;
        let start = lattice.state_of(0.0).ok_or_else(|| Error::Config("lattice does not start at zero".into()))?;
        let mut cells = Vec::with_capacity(n_cells * barriers.len());
        for &x in &barriers {
            let table = if is_riskfree(x) { None } else { Some(lattice.log_survival_table(x, h, n_cells)?) };
            for j in 0..n_cells {
                let spread = table.as_ref().map_or(0.0, |t| t.cell_spread(start, j));
                cells.push(riskfree(j as f64 * h) + spread);
            }
        }
        Self::from_cells(h, barriers, cells)
    }

    /// Reads columns `T, x, f0` with `T` on a uniform grid starting at 0.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path)?;
        let mut rows: Vec<SurfaceRow> = Vec::new();
        for (line, rec) in reader.deserialize().enumerate() {
            let row: SurfaceRow = rec.map_err(|e| Error::Parse(format!("{}: row {}: {e}", path.display(), line + 2)))?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    fn from_rows(rows: Vec<SurfaceRow>) -> Result<Self> {
        let mut barriers: Vec<f64> = rows.iter().map(|r| r.x).collect();
        barriers.sort_by(f64::total_cmp);
        barriers.dedup();
        let mut mats: Vec<f64> = rows.iter().map(|r| r.maturity).collect();
        mats.sort_by(f64::total_cmp);
        mats.dedup();
        if mats.len() < 2 || mats[0] != 0.0 {
            return Err(Error::Parse("surface maturities must start at 0 and contain at least two points".into()));
        }
        let h = mats[1] - mats[0];
        for (j, &m) in mats.iter().enumerate() {
            if (m - j as f64 * h).abs() > 1e-9 * h.max(1.0) {
                return Err(Error::Parse(format!("surface maturity {m} is not on a uniform grid with spacing {h}")));
            }
        }
        let n_cells = mats.len();
        let mut cells = vec![f64::NAN; n_cells * barriers.len()];
        for r in &rows {
            let b = barriers.iter().position(|&x| x == r.x).unwrap();
            let j = (r.maturity / h).round() as usize;
            cells[b * n_cells + j] = r.f0;
        }
        if cells.iter().any(|c| c.is_nan()) {
            return Err(Error::Parse("surface CSV does not cover every (T, x) pair".into()));
        }
        Self::from_cells(h, barriers, cells)
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Grid index of the surface time.
    pub fn time_index(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> f64 {
        self.n as f64 * self.h
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn horizon(&self) -> f64 {
        self.n_cells as f64 * self.h
    }

    pub fn barriers(&self) -> &[f64] {
        &self.barriers
    }

    pub fn riskfree_index(&self) -> usize {
        self.barriers.len() - 1
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub(crate) fn with_time_index(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn cell(&self, b: usize, j: usize) -> f64 {
        self.cells[b * self.n_cells + j]
    }

    pub fn barrier_index(&self, x: f64) -> Option<usize> {
        self.barriers.iter().position(|&b| (b - x).abs() <= LOSS_TOL)
    }

    /// Largest barrier node not above `y`, i.e. right-continuous step interpolation.
    pub fn barrier_node_below(&self, y: f64) -> Option<usize> {
        let k = self.barriers.partition_point(|&b| b <= y + LOSS_TOL);
        k.checked_sub(1)
    }

    /// Forward rate f(t, T, x) of the cell containing T.
    pub fn forward(&self, b: usize, maturity: f64) -> Result<f64> {
        let j = self.cell_of(maturity)?;
        Ok(self.cell(b, j))
    }

    /// Risk-free short rate f(t, t).
    pub fn short_rate(&self) -> f64 {
        self.cell(self.riskfree_index(), self.n)
    }

    fn cell_of(&self, maturity: f64) -> Result<usize> {
        let t = self.t();
        if maturity < t - 1e-12 || maturity > self.horizon() + 1e-12 {
            return Err(Error::Grid(format!("maturity {maturity} outside [{t}, {}]", self.horizon())));
        }
        Ok(((maturity / self.h + 1e-9).floor() as usize).clamp(self.n, self.n_cells - 1))
    }

    /// `-∫_t^T f(t, u, x) du` for barrier index `b`.
    pub fn log_pre_default(&self, b: usize, maturity: f64) -> Result<f64> {
        let t = self.t();
        if maturity < t - 1e-12 || maturity > self.horizon() + 1e-9 {
            return Err(Error::Grid(format!("maturity {maturity} outside [{t}, {}]", self.horizon())));
        }
        let pos = maturity / self.h;
        let full = ((pos + 1e-9).floor() as usize).max(self.n).min(self.n_cells);
        let row = &self.cells[b * self.n_cells..(b + 1) * self.n_cells];
        let mut acc: f64 = row[self.n..full].iter().sum::<f64>() * self.h;
        let rest = maturity - full as f64 * self.h;
        if rest > 1e-12 && full < self.n_cells {
            acc += row[full] * rest;
        }
        Ok(-acc)
    }

    /// (T, x)-bond in loss state ℓ; `x` must be a barrier node.
    pub fn bond_price(&self, level: f64, maturity: f64, x: f64) -> Result<BondQuote> {
        let b = self.barrier_index(x).ok_or_else(|| Error::Grid(format!("barrier {x} is not on the surface grid")))?;
        self.quote(b, level, maturity, x)
    }

    /// Like [`bond_price`](Self::bond_price) but `x` is step-interpolated to
    /// the barrier node below it.
    pub fn bond_price_interp(&self, level: f64, maturity: f64, x: f64) -> Result<BondQuote> {
        let b = self.barrier_node_below(x).ok_or_else(|| Error::Grid(format!("barrier {x} lies below the surface grid")))?;
        self.quote(b, level, maturity, x)
    }

    fn quote(&self, b: usize, level: f64, maturity: f64, x: f64) -> Result<BondQuote> {
        let p = self.log_pre_default(b, maturity)?.exp();
        let alive = !crossed(level, x);
        Ok(BondQuote { t: self.t(), maturity, barrier: x, price: if alive { p } else { 0.0 }, pre_default: p, alive })
    }

    /// P non-increasing in T and non-decreasing in x on the grid.
    pub fn is_monotone(&self) -> bool {
        let nb = self.barriers.len();
        let mut prev_row: Option<Vec<f64>> = None;
        for b in 0..nb {
            let mut acc = 0.0;
            let mut row = Vec::with_capacity(self.n_cells - self.n);
            for j in self.n..self.n_cells {
                acc += self.cell(b, j) * self.h;
                row.push(acc);
            }
            if row.windows(2).any(|w| w[1] < w[0] - 1e-15) {
                return false;
            }
            if let Some(prev) = &prev_row {
                if prev.iter().zip(&row).any(|(p, r)| *r > p + 1e-15) {
                    return false;
                }
            }
            prev_row = Some(row);
        }
        true
    }

    /// `f(t, t, x) - f(t, t) - λ(t, x)` for every alive barrier.
    pub fn dc2_residuals(&self, loss: &LossCompensatorSpec, level: f64) -> Vec<(f64, f64)> {
        let one = self.riskfree_index();
        let t = self.t();
        self.barriers
            .iter()
            .enumerate()
            .filter(|(_, &x)| !crossed(level, x))
            .map(|(b, &x)| (x, self.cell(b, self.n) - (self.cell(one, self.n) + loss.lambda_unchecked(t, x, level))))
            .collect()
    }
}

pub(crate) fn cells_for(h: f64, horizon: f64) -> Result<usize> {
    if !(h > 0.0 && horizon > 0.0 && h.is_finite() && horizon.is_finite()) {
        return Err(Error::Grid(format!("invalid grid h={h}, horizon={horizon}")));
    }
    let n = horizon / h;
    let r = n.round();
    if (n - r).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::Grid(format!("horizon {horizon} is not a multiple of the step {h}")));
    }
    Ok(r as usize)
}
