//! The d-dimensional Lévy driver Z: triplet, Laplace exponent, the
//! exponential-moment domain B and exact simulation of increments.
//!
//! Jumps are finite activity. The truncation function is `1{|z| <= 1}`, so the
//! drift `m` is the drift of the truncated decomposition and simulation has to
//! subtract `dt * ∫_{|z|<=1} z ν(dz)` from the raw jump sum.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{path_rng, StreamKind};

/// Eigenvalues of Σ below `-PSD_TOL` trigger a repair warning.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpAtom {
    pub z: Vec<f64>,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableAtom {
    pub z: Vec<f64>,
    pub mass: f64,
}

/// Jump measure ν of Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpMeasure {
    None,
    /// `rate` times a discrete mark law.
    CompoundPoisson { rate: f64, atoms: Vec<JumpAtom> },
    /// `rate` times the law of `Y * direction`, where `Y` is `Exp(eta_up)` with
    /// probability `p_up` and `-Exp(eta_down)` otherwise.
    DoubleExponential { rate: f64, p_up: f64, eta_up: f64, eta_down: f64, direction: Vec<f64> },
    /// ν given directly as point masses.
    UserTable { atoms: Vec<TableAtom> },
}

#[derive(Debug, Clone, PartialEq)]
struct DoubleExp {
    rate: f64,
    p_up: f64,
    eta_up: f64,
    eta_down: f64,
    direction: Vec<f64>,
    // ∫_{|y| <= r} y law(dy) split by sign, r = 1/|direction|
    trunc_mean_up: f64,
    trunc_mean_down: f64,
}

impl DoubleExp {
    fn laplace_of_y(&self, s: f64) -> f64 {
        let mut v = 0.0;
        if self.p_up > 0.0 {
            v += self.p_up * self.eta_up / (self.eta_up + s);
        }
        if self.p_up < 1.0 {
            v += (1.0 - self.p_up) * self.eta_down / (self.eta_down - s);
        }
        v
    }

    fn laplace_of_y_derivative(&self, s: f64) -> f64 {
        let mut v = 0.0;
        if self.p_up > 0.0 {
            v -= self.p_up * self.eta_up / (self.eta_up + s).powi(2);
        }
        if self.p_up < 1.0 {
            v += (1.0 - self.p_up) * self.eta_down / (self.eta_down - s).powi(2);
        }
        v
    }

    fn in_domain(&self, s: f64) -> bool {
        (self.p_up == 0.0 || s > -self.eta_up) && (self.p_up == 1.0 || s < self.eta_down)
    }

    fn trunc_mean(&self) -> f64 {
        self.p_up * self.trunc_mean_up - (1.0 - self.p_up) * self.trunc_mean_down
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Jumps {
    None,
    // (z, ν({z})) with total mass and cumulative masses for sampling
    Atoms { atoms: Vec<(Vec<f64>, f64)>, total: f64, cumulative: Vec<f64> },
    DoubleExp(DoubleExp),
}

/// Lévy triplet (m, Σ, ν) of the driver.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyTriplet {
    dim: usize,
    drift: Vec<f64>,
    sigma: Vec<f64>,
    factor: Vec<f64>,
    spec: JumpMeasure,
    jumps: Jumps,
    small_jump_mean: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn truncated_exp_mean(eta: f64, r: f64) -> f64 {
    // ∫_0^r y η e^{-η y} dy
    (1.0 - (-eta * r).exp() * (1.0 + eta * r)) / eta
}

fn psd_factor(dim: usize, sigma: &mut [f64]) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(dim, dim, sigma);
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Domain("covariance has non-finite eigenvalues".into()));
    }
    if min < -PSD_TOL {
        log::warn!("covariance not positive semi-definite (min eigenvalue {min:e}); clipping negative eigenvalues");
    }
    let clipped: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let v = &eig.eigenvectors;
    if min < -PSD_TOL {
        for i in 0..dim {
            for j in 0..dim {
                sigma[i * dim + j] = (0..dim).map(|k| v[(i, k)] * clipped[k] * v[(j, k)]).sum();
            }
        }
    }
    let mut factor = vec![0.0; dim * dim];
    for i in 0..dim {
        for k in 0..dim {
            factor[i * dim + k] = v[(i, k)] * clipped[k].sqrt();
        }
    }
    Ok(factor)
}

impl LevyTriplet {
    /// Builds a triplet from drift `m`, row-major covariance `sigma` and jump measure.
    pub fn new(drift: Vec<f64>, sigma: Vec<f64>, jumps: JumpMeasure) -> Result<Self> {
        let dim = drift.len();
        if dim == 0 {
            return Err(Error::Domain("dimension must be positive".into()));
        }
        check_dim(dim * dim, sigma.len())?;
        if drift.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::Domain("drift and covariance must be finite".into()));
        }
        let scale = sigma.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for i in 0..dim {
            for j in 0..i {
                if (sigma[i * dim + j] - sigma[j * dim + i]).abs() > 1e-12 * scale {
                    return Err(Error::Domain(format!("covariance not symmetric at ({i},{j})")));
                }
            }
        }
        let mut sigma = sigma;
        let factor = psd_factor(dim, &mut sigma)?;

        let mut small_jump_mean = vec![0.0; dim];
        let internal = match &jumps {
            JumpMeasure::None => Jumps::None,
            JumpMeasure::CompoundPoisson { rate, atoms } => {
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(Error::Domain(format!("jump rate must be non-negative, got {rate}")));
                }
                let total_p: f64 = atoms.iter().map(|a| a.p).sum();
                if atoms.is_empty() || (total_p - 1.0).abs() > 1e-12 {
                    return Err(Error::Domain(format!("jump mark probabilities sum to {total_p}, expected 1")));
                }
                let table = atoms.iter().map(|a| TableAtom { z: a.z.clone(), mass: rate * a.p }).collect::<Vec<_>>();
                Self::atom_table(dim, &table, &mut small_jump_mean)?
            }
            JumpMeasure::UserTable { atoms } => Self::atom_table(dim, atoms, &mut small_jump_mean)?,
            JumpMeasure::DoubleExponential { rate, p_up, eta_up, eta_down, direction } => {
                check_dim(dim, direction.len())?;
                let len = norm(direction);
                let valid = rate.is_finite()
                    && *rate >= 0.0
                    && (0.0..=1.0).contains(p_up)
                    && *eta_up > 0.0
                    && *eta_down > 0.0
                    && eta_up.is_finite()
                    && eta_down.is_finite()
                    && len > 0.0
                    && len.is_finite();
                if !valid {
                    return Err(Error::Domain("invalid double-exponential jump parameters".into()));
                }
                let r = 1.0 / len;
                let de = DoubleExp {
                    rate: *rate,
                    p_up: *p_up,
                    eta_up: *eta_up,
                    eta_down: *eta_down,
                    direction: direction.clone(),
                    trunc_mean_up: truncated_exp_mean(*eta_up, r),
                    trunc_mean_down: truncated_exp_mean(*eta_down, r),
                };
                let k = de.rate * de.trunc_mean();
                for (s, d) in small_jump_mean.iter_mut().zip(direction) {
                    *s = k * d;
                }
                Jumps::DoubleExp(de)
            }
        };
        Ok(Self { dim, drift, sigma, factor, spec: jumps, jumps: internal, small_jump_mean })
    }

    fn atom_table(dim: usize, atoms: &[TableAtom], small: &mut [f64]) -> Result<Jumps> {
        let mut out = Vec::with_capacity(atoms.len());
        let mut cumulative = Vec::with_capacity(atoms.len());
        let mut total = 0.0;
        for a in atoms {
            check_dim(dim, a.z.len())?;
            if !(a.mass.is_finite() && a.mass >= 0.0) || a.z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain("jump atoms need finite locations and non-negative mass".into()));
            }
            if norm(&a.z) <= 1.0 {
                for (s, z) in small.iter_mut().zip(&a.z) {
                    *s += a.mass * z;
                }
            }
            total += a.mass;
            cumulative.push(total);
            out.push((a.z.clone(), a.mass));
        }
        if total == 0.0 {
            return Ok(Jumps::None);
        }
        Ok(Jumps::Atoms { atoms: out, total, cumulative })
    }

    /// Gaussian driver only.
    pub fn gaussian(drift: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        Self::new(drift, sigma, JumpMeasure::None)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    /// Row-major covariance after any PSD repair.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn jump_measure(&self) -> &JumpMeasure {
        &self.spec
    }

    pub fn has_jumps(&self) -> bool {
        !matches!(self.jumps, Jumps::None)
    }

    /// Total jump intensity ν(ℝ^d).
    pub fn jump_intensity(&self) -> f64 {
        match &self.jumps {
            Jumps::None => 0.0,
            Jumps::Atoms { total, .. } => *total,
            Jumps::DoubleExp(de) => de.rate,
        }
    }

    /// Point masses `(z, ν({z}))` when ν is atomic.
    pub fn atoms(&self) -> Option<&[(Vec<f64>, f64)]> {
        match &self.jumps {
            Jumps::Atoms { atoms, .. } => Some(atoms),
            _ => None,
        }
    }

    /// ∫_{|z|<=1} z ν(dz).
    pub fn small_jump_mean(&self) -> &[f64] {
        &self.small_jump_mean
    }

    /// ⟨Σu, v⟩.
    pub fn sigma_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        let d = self.dim;
        let mut acc = 0.0;
        for i in 0..d {
            let row = &self.sigma[i * d..(i + 1) * d];
            acc += v[i] * dot(row, u);
        }
        acc
    }

    /// Membership of `u` in B = {u : ∫_{|z|>1} e^{-⟨u,z⟩} ν(dz) < ∞}.
    pub fn in_domain_b(&self, u: &[f64]) -> Result<bool> {
        check_dim(self.dim, u.len())?;
        Ok(match &self.jumps {
            Jumps::None | Jumps::Atoms { .. } => true,
            Jumps::DoubleExp(de) => de.in_domain(dot(u, &de.direction)),
        })
    }

    /// ∫ (e^{-⟨u,z⟩} - 1) ν(dz), finite on B because ν is finite.
    pub fn jump_transform(&self, u: &[f64]) -> Result<f64> {
        self.check_arg(u)?;
        Ok(match &self.jumps {
            Jumps::None => 0.0,
            Jumps::Atoms { atoms, .. } => atoms.iter().map(|(z, w)| w * ((-dot(u, z)).exp() - 1.0)).sum(),
            Jumps::DoubleExp(de) => de.rate * (de.laplace_of_y(dot(u, &de.direction)) - 1.0),
        })
    }

    fn check_arg(&self, u: &[f64]) -> Result<()> {
        check_dim(self.dim, u.len())?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite argument {u:?}")));
        }
        if !self.in_domain_b(u)? {
            return Err(Error::Domain(format!("argument {u:?} is outside the exponential-moment domain B")));
        }
        Ok(())
    }

    /// Laplace exponent
    /// `J(u) = -⟨m,u⟩ + ½⟨Σu,u⟩ + ∫(e^{-⟨u,z⟩} - 1 + 1{|z|<=1}⟨u,z⟩) ν(dz)`.
    pub fn laplace_exponent(&self, u: &[f64]) -> Result<f64> {
        let jump = self.jump_transform(u)?;
        Ok(-dot(&self.drift, u) + 0.5 * self.sigma_inner(u, u) + jump + dot(u, &self.small_jump_mean))
    }

    /// Gradient of J at `u`.
    pub fn laplace_gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_arg(u)?;
        let d = self.dim;
        let mut g: Vec<f64> = (0..d)
            .map(|i| -self.drift[i] + dot(&self.sigma[i * d..(i + 1) * d], u) + self.small_jump_mean[i])
            .collect();
        match &self.jumps {
            Jumps::None => {}
            Jumps::Atoms { atoms, .. } => {
                for (z, w) in atoms {
                    let e = w * (-dot(u, z)).exp();
                    for i in 0..d {
                        g[i] -= e * z[i];
                    }
                }
            }
            Jumps::DoubleExp(de) => {
                let k = de.rate * de.laplace_of_y_derivative(dot(u, &de.direction));
                for i in 0..d {
                    g[i] += k * de.direction[i];
                }
            }
        }
        Ok(g)
    }

    /// Reusable sampler for increments of Z.
    pub fn stepper(&self) -> LevyStepper<'_> {
        LevyStepper { triplet: self }
    }

    /// Simulates Z on `grid` using the Lévy stream of path `path_index`.
    pub fn simulate_increments(&self, grid: &[f64], seed: u64, path_index: u64) -> Result<LevyPathRecord> {
        validate_grid(grid)?;
        let mut rng = path_rng(seed, path_index, StreamKind::Levy);
        let stepper = self.stepper();
        let d = self.dim;
        let mut rec = LevyPathRecord {
            grid: grid.to_vec(),
            increments: Vec::with_capacity(grid.len() - 1),
            drift: Vec::with_capacity(grid.len() - 1),
            gaussian: Vec::with_capacity(grid.len() - 1),
            small_jumps: Vec::with_capacity(grid.len() - 1),
            large_jumps: Vec::with_capacity(grid.len() - 1),
            jumps: Vec::new(),
        };
        let mut parts = StepParts::new(d);
        for w in grid.windows(2) {
            stepper.sample(&mut rng, w[0], w[1] - w[0], &mut parts, Some(&mut rec.jumps));
            rec.increments.push(parts.total.clone());
            rec.drift.push(parts.drift.clone());
            rec.gaussian.push(parts.gaussian.clone());
            rec.small_jumps.push(parts.small.clone());
            rec.large_jumps.push(parts.large.clone());
        }
        Ok(rec)
    }
}

pub(crate) fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 0.0 {
        return Err(Error::Grid("time grid must start at 0 and contain at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
        return Err(Error::Grid("time grid must be strictly increasing and finite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevyJump {
    pub time: f64,
    pub z: Vec<f64>,
}

/// Simulated increments of Z on a grid, split into the pieces of the Lévy-Itô
/// decomposition. `small_jumps` already contains the truncation compensator.
#[derive(Debug, Clone, PartialEq)]
pub struct LevyPathRecord {
    pub grid: Vec<f64>,
    pub increments: Vec<Vec<f64>>,
    pub drift: Vec<Vec<f64>>,
    pub gaussian: Vec<Vec<f64>>,
    pub small_jumps: Vec<Vec<f64>>,
    pub large_jumps: Vec<Vec<f64>>,
    pub jumps: Vec<LevyJump>,
}

/// Scratch space for one increment.
#[derive(Debug, Clone)]
pub struct StepParts {
    pub total: Vec<f64>,
    pub drift: Vec<f64>,
    pub gaussian: Vec<f64>,
    pub small: Vec<f64>,
    pub large: Vec<f64>,
    normals: Vec<f64>,
}

impl StepParts {
    pub fn new(dim: usize) -> Self {
        Self {
            total: vec![0.0; dim],
            drift: vec![0.0; dim],
            gaussian: vec![0.0; dim],
            small: vec![0.0; dim],
            large: vec![0.0; dim],
            normals: vec![0.0; dim],
        }
    }
}

pub struct LevyStepper<'a> {
    triplet: &'a LevyTriplet,
}

impl LevyStepper<'_> {
    /// Draws the increment over `[t0, t0 + dt]` into `parts`. Random numbers are
    /// consumed in a fixed order whether or not jumps are recorded.
    pub fn sample(&self, rng: &mut ChaCha8Rng, t0: f64, dt: f64, parts: &mut StepParts, mut record: Option<&mut Vec<LevyJump>>) {
        let tr = self.triplet;
        let d = tr.dim;
        for n in parts.normals.iter_mut() {
            *n = rng.sample::<f64, _>(StandardNormal);
        }
        let sq = dt.sqrt();
        for i in 0..d {
            parts.drift[i] = tr.drift[i] * dt;
            parts.gaussian[i] = sq * dot(&tr.factor[i * d..(i + 1) * d], &parts.normals);
            parts.small[i] = -tr.small_jump_mean[i] * dt;
            parts.large[i] = 0.0;
        }
        let intensity = tr.jump_intensity();
        if intensity > 0.0 {
            let mean = intensity * dt;
            let count = if mean > 0.0 {
                Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
            } else {
                0
            };
            let mut z = vec![0.0; d];
            for _ in 0..count {
                let u: f64 = rng.random();
                self.sample_mark(rng, &mut z);
                let target = if norm(&z) <= 1.0 { &mut parts.small } else { &mut parts.large };
                for i in 0..d {
                    target[i] += z[i];
                }
                if let Some(rec) = record.as_deref_mut() {
                    rec.push(LevyJump { time: t0 + u * dt, z: z.clone() });
                }
            }
            if let Some(rec) = record {
                rec.sort_by(|a, b| a.time.total_cmp(&b.time));
            }
        }
        for i in 0..d {
            parts.total[i] = parts.drift[i] + parts.gaussian[i] + parts.small[i] + parts.large[i];
        }
    }

    fn sample_mark(&self, rng: &mut ChaCha8Rng, z: &mut [f64]) {
        match &self.triplet.jumps {
            Jumps::None => z.iter_mut().for_each(|v| *v = 0.0),
            Jumps::Atoms { atoms, total, cumulative } => {
                let u = rng.random::<f64>() * total;
                let idx = cumulative.partition_point(|&c| c <= u).min(atoms.len() - 1);
                z.copy_from_slice(&atoms[idx].0);
            }
            Jumps::DoubleExp(de) => {
                let up = rng.random::<f64>() < de.p_up;
                let e: f64 = rng.sample(Exp1);
                let y = if up { e / de.eta_up } else { -e / de.eta_down };
                for (zi, di) in z.iter_mut().zip(&de.direction) {
                    *zi = y * di;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn one_dim(m: f64, s: f64, jumps: JumpMeasure) -> LevyTriplet {
        LevyTriplet::new(vec![m], vec![s], jumps).unwrap()
    }

    fn table(atoms: &[(f64, f64)]) -> JumpMeasure {
        JumpMeasure::UserTable { atoms: atoms.iter().map(|&(z, mass)| TableAtom { z: vec![z], mass }).collect() }
    }

    #[test]
    fn laplace_exponent_examples() {
        let g = one_dim(0.0, 1.0, JumpMeasure::None);
        assert_eq!(g.laplace_exponent(&[0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(g.laplace_exponent(&[1.0]).unwrap(), 0.5, epsilon = 1e-15);

        let small = one_dim(0.0, 0.0, table(&[(0.5, 2.0)]));
        assert_abs_diff_eq!(small.laplace_exponent(&[1.0]).unwrap(), 0.213_061_319_425_267, epsilon = 1e-12);
        let large = one_dim(0.0, 0.0, table(&[(2.0, 1.0)]));
        assert_abs_diff_eq!(large.laplace_exponent(&[1.0]).unwrap(), (-2.0f64).exp() - 1.0, epsilon = 1e-15);
    }

    #[test]
    fn compound_poisson_matches_direct_atom_sum() {
        let atoms = vec![
            JumpAtom { z: vec![0.3, -0.2], p: 0.25 },
            JumpAtom { z: vec![-1.5, 0.4], p: 0.5 },
            JumpAtom { z: vec![0.1, 2.0], p: 0.25 },
        ];
        let tr = LevyTriplet::new(vec![0.01, -0.02], vec![0.04, 0.01, 0.01, 0.09], JumpMeasure::CompoundPoisson { rate: 1.7, atoms: atoms.clone() }).unwrap();
        for u in [[0.0, 0.0], [1.0, -0.5], [-2.0, 0.7], [0.3, 0.3]] {
            let mut direct = -(0.01 * u[0] - 0.02 * u[1]) + 0.5 * (0.04 * u[0] * u[0] + 2.0 * 0.01 * u[0] * u[1] + 0.09 * u[1] * u[1]);
            for a in &atoms {
                let uz = u[0] * a.z[0] + u[1] * a.z[1];
                let inside = (a.z[0] * a.z[0] + a.z[1] * a.z[1]).sqrt() <= 1.0;
                direct += 1.7 * a.p * ((-uz).exp() - 1.0 + if inside { uz } else { 0.0 });
            }
            assert_abs_diff_eq!(tr.laplace_exponent(&u).unwrap(), direct, epsilon = 1e-12);
        }
    }

    fn de_triplet() -> LevyTriplet {
        let jumps = JumpMeasure::DoubleExponential { rate: 1.3, p_up: 0.4, eta_up: 3.0, eta_down: 5.0, direction: vec![0.8] };
        one_dim(0.02, 0.01, jumps)
    }

    fn de_density(y: f64) -> f64 {
        if y >= 0.0 {
            0.4 * 3.0 * (-3.0 * y).exp()
        } else {
            0.6 * 5.0 * (5.0 * y).exp()
        }
    }

    #[test]
    fn double_exponential_closed_form_matches_quadrature() {
        let tr = de_triplet();
        let r = 1.0 / 0.8;
        for u in [-2.5, -0.7, 0.0, 1.1, 4.0] {
            let s = u * 0.8;
            let integrand = |y: f64| {
                let comp = if y.abs() <= r { s * y } else { 0.0 };
                ((-s * y).exp() - 1.0 + comp) * de_density(y)
            };
            let pos = quad::integrate(integrand, 0.0, r, 1e-14, 1e-12).unwrap().value
                + quad::integrate_to_infinity(integrand, r, 1e-14, 1e-12).unwrap().value;
            let neg_fn = |y: f64| integrand(-y);
            let neg = quad::integrate(neg_fn, 0.0, r, 1e-14, 1e-12).unwrap().value
                + quad::integrate_to_infinity(neg_fn, r, 1e-14, 1e-12).unwrap().value;
            let expected = -0.02 * u + 0.5 * 0.01 * u * u + 1.3 * (pos + neg);
            assert_abs_diff_eq!(tr.laplace_exponent(&[u]).unwrap(), expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn double_exponential_domain_matches_integrability() {
        let tr = de_triplet();
        // B = {-3 < 0.8 u < 5}
        assert!(tr.in_domain_b(&[6.0]).unwrap());
        assert!(!tr.in_domain_b(&[6.3]).unwrap());
        assert!(tr.in_domain_b(&[-3.7]).unwrap());
        assert!(!tr.in_domain_b(&[-3.8]).unwrap());
        assert!(tr.laplace_exponent(&[6.3]).is_err());
        // outside B the truncated tail integral keeps growing with the cutoff
        let tail = |u: f64, cut: f64| {
            quad::integrate(|y: f64| 3.0 * (u * 0.8 * y - 5.0 * y).exp(), 1.25, cut, 1e-12, 1e-10).unwrap().value
        };
        assert!(tail(6.3, 200.0) > 2.0 * tail(6.3, 100.0));
        assert!((tail(6.0, 200.0) - tail(6.0, 100.0)).abs() < 1e-6 * tail(6.0, 100.0));
    }

    #[test]
    fn atoms_and_gaussian_are_always_in_b() {
        assert!(one_dim(0.0, 1.0, JumpMeasure::None).in_domain_b(&[1e6]).unwrap());
        assert!(one_dim(0.0, 1.0, table(&[(3.0, 1.0)])).in_domain_b(&[-1e3]).unwrap());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let tr = de_triplet();
        for u in [-1.0, 0.5, 2.0] {
            let e = 1e-6;
            let fd = (tr.laplace_exponent(&[u + e]).unwrap() - tr.laplace_exponent(&[u - e]).unwrap()) / (2.0 * e);
            assert_abs_diff_eq!(tr.laplace_gradient(&[u]).unwrap()[0], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(LevyTriplet::new(vec![0.0], vec![1.0, 0.0], JumpMeasure::None).is_err());
        assert!(LevyTriplet::new(vec![0.0, 0.0], vec![1.0, 0.5, 0.4, 1.0], JumpMeasure::None).is_err());
        let bad_p = JumpMeasure::CompoundPoisson { rate: 1.0, atoms: vec![JumpAtom { z: vec![0.1], p: 0.9 }] };
        assert!(LevyTriplet::new(vec![0.0], vec![0.0], bad_p).is_err());
        let g = one_dim(0.0, 1.0, JumpMeasure::None);
        assert!(matches!(g.laplace_exponent(&[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn indefinite_covariance_is_clipped() {
        let tr = LevyTriplet::new(vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0], JumpMeasure::None).unwrap();
        // eigenvalues 3 and -1; the repaired matrix keeps only the first
        assert_abs_diff_eq!(tr.sigma()[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(tr.sigma()[1], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_increment() {
        let tr = one_dim(1.0, 0.0, JumpMeasure::None);
        let rec = tr.simulate_increments(&[0.0, 1.0], 1, 0).unwrap();
        assert_eq!(rec.increments, vec![vec![1.0]]);
        assert!(rec.jumps.is_empty());
        assert!(tr.simulate_increments(&[0.0, 1.0, 1.0], 1, 0).is_err());
        assert!(tr.simulate_increments(&[0.5, 1.0], 1, 0).is_err());
    }

    #[test]
    fn poisson_count_oracle() {
        let tr = one_dim(0.0, 0.0, JumpMeasure::CompoundPoisson { rate: 3.0, atoms: vec![JumpAtom { z: vec![0.2], p: 1.0 }] });
        let n = 100_000u64;
        let total: usize = (0..n).map(|i| tr.simulate_increments(&[0.0, 1.0], 11, i).unwrap().jumps.len()).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 3.0).abs() <= 3.0 * (3.0 / n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn gaussian_covariance_oracle() {
        let tr = LevyTriplet::gaussian(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let n = 100_000u64;
        let mut s = [0.0; 5];
        for i in 0..n {
            let z = &tr.simulate_increments(&[0.0, 1.0], 5, i).unwrap().increments[0];
            s[0] += z[0];
            s[1] += z[1];
            s[2] += z[0] * z[0];
            s[3] += z[1] * z[1];
            s[4] += z[0] * z[1];
        }
        let nf = n as f64;
        let cov = [s[2] / nf - (s[0] / nf).powi(2), s[3] / nf - (s[1] / nf).powi(2), s[4] / nf - s[0] * s[1] / nf / nf];
        // se of a variance estimate is sqrt(2/n), of a covariance sqrt(1/n)
        assert!((cov[0] - 1.0).abs() < 3.0 * (2.0 / nf).sqrt());
        assert!((cov[1] - 1.0).abs() < 3.0 * (2.0 / nf).sqrt());
        assert!(cov[2].abs() < 3.0 * (1.0 / nf).sqrt());
    }

    #[test]
    fn empirical_laplace_transform() {
        let atoms = vec![JumpAtom { z: vec![0.4, 0.0], p: 0.5 }, JumpAtom { z: vec![-1.2, 0.5], p: 0.5 }];
        let tr = LevyTriplet::new(vec![0.05, -0.1], vec![0.09, 0.02, 0.02, 0.04], JumpMeasure::CompoundPoisson { rate: 2.0, atoms }).unwrap();
        let n = 100_000u64;
        let samples: Vec<Vec<f64>> = (0..n).map(|i| tr.simulate_increments(&[0.0, 1.0], 99, i).unwrap().increments[0].clone()).collect();
        for u in [[0.5, 0.0], [-0.5, 0.3], [1.0, 1.0], [0.0, -1.0], [-1.0, -0.5]] {
            let vals: Vec<f64> = samples.iter().map(|z| (-(u[0] * z[0] + u[1] * z[1])).exp()).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let se_log = (var / n as f64).sqrt() / mean;
            let j = tr.laplace_exponent(&u).unwrap();
            assert!((mean.ln() - j).abs() <= 4.0 * se_log, "u={u:?}: log mean {} vs J {j}", mean.ln());
        }
    }

    proptest! {
        #[test]
        fn gaussian_exponent_is_quadratic(m0 in -1.0..1.0f64, m1 in -1.0..1.0f64, a in 0.0..2.0f64, b in -1.0..1.0f64, c in 0.0..2.0f64, u0 in -3.0..3.0f64, u1 in -3.0..3.0f64) {
            // Σ = L Lᵀ with L = [[a,0],[b,c]] is PSD by construction
            let s = vec![a * a, a * b, a * b, b * b + c * c];
            let tr = LevyTriplet::gaussian(vec![m0, m1], s.clone()).unwrap();
            let expected = -(m0 * u0 + m1 * u1) + 0.5 * (s[0] * u0 * u0 + 2.0 * s[1] * u0 * u1 + s[3] * u1 * u1);
            let got = tr.laplace_exponent(&[u0, u1]).unwrap();
            prop_assert!((got - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
        }

        #[test]
        fn exponent_finite_whenever_in_b(u in -10.0..10.0f64) {
            let tr = de_triplet();
            if tr.in_domain_b(&[u]).unwrap() {
                prop_assert!(tr.laplace_exponent(&[u]).unwrap().is_finite());
            }
        }
    }
}
