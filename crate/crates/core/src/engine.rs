//! Discrete-time evolution of the forward surface on the uniform grid
//! `t_n = n h`, with maturity cells aligned to time cells.
//!
//! During step `n` the cell `[t_n, t_{n+1})` is the short-rate cell: it sets
//! the discount and is not evolved. Every later cell receives
//!
//! * the Lévy part `a^Z_i h + ⟨b_i, ΔZ⟩` at the end of the step,
//! * the loss drift `a^L_i` over each loss-free sub-interval, recomputed after
//!   every loss jump,
//! * the contagion loading `c_i(y)` at each loss jump not crossing the barrier.
//!
//! Under the no-arbitrage tag the per-cell drifts are differences of the
//! integrated drift condition over the discrete exposures, so the discounted
//! Lévy and contagion factors of every bond are exact martingales. The short
//! end is pinned at each grid time by `f(t, t, x) = f(t, t) + λ(t, x)`.

use std::sync::{Arc, RwLock};

use crate::error::{Error, Result};
use crate::hjm::{is_riskfree, ContagionForm, DriftSpec, ForwardSurface, HjmModel, VolSpec};
use crate::lattice::{level_key, LogSurvivalTable};
use crate::levy::{LevyPathRecord, StepParts};
use crate::loss::{crossed, crosses, LossPath};
use crate::rng::{path_rng, StreamKind};

/// Per-step Lévy coefficients of one barrier, indexed by absolute cell.
#[derive(Debug)]
struct LevyPart {
    /// Component-major cell averages of b.
    vol: Vec<Vec<f64>>,
    /// Drift increment per step, `a_i h`.
    drift: Vec<f64>,
}

#[derive(Debug)]
struct LossPart {
    marks: Vec<f64>,
    crossing: Vec<bool>,
    /// Cell contagion per mark.
    contagion: Vec<Vec<f64>>,
    /// Loss drift rate per cell.
    drift: Vec<f64>,
}

#[derive(Debug)]
struct BarrierStep {
    levy: Arc<LevyPart>,
    loss: Option<LossPart>,
    lambda: f64,
}

#[derive(Debug)]
struct StepTable {
    barriers: Vec<Option<BarrierStep>>,
}

/// State of one path at a grid time.
#[derive(Debug, Clone)]
pub struct PathState {
    pub n: usize,
    pub h: f64,
    pub level: f64,
    pub alive: Vec<bool>,
    n_cells: usize,
    cells: Vec<f64>,
    pub log_discount: f64,
    /// Largest `|f(t, t, x) - f(t, t) - λ(t, x)|` seen before the short end was pinned.
    pub dc2_residual: f64,
}

impl PathState {
    pub fn t(&self) -> f64 {
        self.n as f64 * self.h
    }

    pub fn discount(&self) -> f64 {
        self.log_discount.exp()
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.cells[b * self.n_cells..(b + 1) * self.n_cells]
    }

    /// `log p(t_n, u_j, x_b)`.
    pub fn log_pre_default(&self, b: usize, j: usize) -> f64 {
        -self.h * self.row(b)[self.n..j].iter().sum::<f64>()
    }

    /// P(t_n, u_j, x_b), zero after the barrier was crossed.
    pub fn bond_price(&self, b: usize, j: usize) -> f64 {
        if self.alive[b] {
            self.log_pre_default(b, j).exp()
        } else {
            0.0
        }
    }
}

/// Receives the path state at every grid time, starting at t = 0.
pub trait PathObserver {
    fn on_grid(&mut self, state: &PathState) -> Result<()>;
}

impl<F: FnMut(&PathState) -> Result<()>> PathObserver for F {
    fn on_grid(&mut self, state: &PathState) -> Result<()> {
        self(state)
    }
}

type TableSlot = RwLock<Vec<(i64, Arc<StepTable>)>>;

/// Simulation engine for one model and initial surface.
#[derive(Debug)]
pub struct Engine {
    model: HjmModel,
    surface0: ForwardSurface,
    n_steps: usize,
    survival: Vec<Option<LogSurvivalTable>>,
    shared_levy: Vec<Option<Arc<LevyPart>>>,
    tables: Vec<TableSlot>,
}

impl Engine {
    /// Builds the engine and every coefficient table of the loss-free state,
    /// so B-violations and bound breaches surface before any path is stepped.
    pub fn new(model: HjmModel, surface0: ForwardSurface, n_steps: usize) -> Result<Self> {
        if surface0.time_index() != 0 {
            return Err(Error::Grid("initial surface must sit at t = 0".into()));
        }
        if n_steps == 0 || n_steps > surface0.n_cells() {
            return Err(Error::Grid(format!("step count {n_steps} must lie in 1..={}", surface0.n_cells())));
        }
        let h = surface0.h();
        let nc = surface0.n_cells();
        let survival = if model.coeffs.contagion == ContagionForm::LossImplied {
            let lat = model.lattice().ok_or_else(|| Error::Config("loss-implied contagion needs a loss lattice".into()))?;
            surface0
                .barriers()
                .iter()
                .map(|&x| if is_riskfree(x) { Ok(None) } else { lat.log_survival_table(x, h, nc).map(Some) })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![None; surface0.barriers().len()]
        };
        let mut engine = Self { model, surface0, n_steps, survival, shared_levy: Vec::new(), tables: Vec::new() };
        if engine.levy_is_shared() {
            engine.shared_levy = (0..n_steps).map(|n| engine.build_levy(n, 0.0, 1.0).map(|p| Some(Arc::new(p)))).collect::<Result<_>>()?;
        } else {
            engine.shared_levy = vec![None; n_steps];
        }
        engine.tables = (0..=n_steps).map(|_| RwLock::new(Vec::new())).collect();
        for n in 0..n_steps {
            engine.table(n, 0.0)?;
        }
        Ok(engine)
    }

    pub fn model(&self) -> &HjmModel {
        &self.model
    }

    pub fn surface0(&self) -> &ForwardSurface {
        &self.surface0
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn h(&self) -> f64 {
        self.surface0.h()
    }

    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.h()
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|n| n as f64 * self.h()).collect()
    }

    fn levy_is_shared(&self) -> bool {
        matches!(self.model.coeffs.vol, VolSpec::Parametric(_)) && !matches!(self.model.coeffs.drift, DriftSpec::Custom(_))
    }

    fn pins_short_end(&self) -> bool {
        self.model.coeffs.is_no_arbitrage()
    }

    fn has_loss_drift(&self) -> bool {
        matches!(self.model.coeffs.drift, DriftSpec::NoArbitrage | DriftSpec::ContinuousHjm)
    }

    fn build_levy(&self, n: usize, level: f64, x: f64) -> Result<LevyPart> {
        let h = self.h();
        let nc = self.surface0.n_cells();
        let d = self.model.levy.dim();
        let t = n as f64 * h;
        let mut vol = vec![vec![0.0; nc]; d];
        let mut drift = vec![0.0; nc];
        let mut buf = vec![0.0; d];
        let mut exposure = vec![0.0; d];
        let mut j_prev = 0.0;
        for i in n + 1..nc {
            let (u0, u1) = (i as f64 * h, (i + 1) as f64 * h);
            self.model.coeffs.vol.integral_into(t, u0, u1, x, level, &mut buf)?;
            for k in 0..d {
                vol[k][i] = buf[k] / h;
                exposure[k] += buf[k];
            }
            self.model.check_vol(&buf, h)?;
            let mid = 0.5 * (u0 + u1);
            drift[i] = match &self.model.coeffs.drift {
                DriftSpec::NoArbitrage => {
                    if !self.model.levy.in_domain_b(&exposure)? {
                        return Err(Error::Domain(format!("b*(t={t}, T={u1}, x={x}) = {exposure:?} is outside B")));
                    }
                    let j_next = self.model.levy.laplace_exponent(&exposure)?;
                    let inc = j_next - j_prev;
                    j_prev = j_next;
                    inc
                }
                DriftSpec::ContinuousHjm => {
                    let bstar = self.model.coeffs.vol.bstar(t, mid, x, level)?;
                    if !self.model.levy.in_domain_b(&bstar)? {
                        return Err(Error::Domain(format!("b*(t={t}, T={mid}, x={x}) = {bstar:?} is outside B")));
                    }
                    let grad = self.model.levy.laplace_gradient(&bstar)?;
                    let b = self.model.coeffs.vol.value(t, mid, x, level);
                    grad.iter().zip(&b).map(|(g, v)| g * v).sum::<f64>() * h
                }
                DriftSpec::Zero => 0.0,
                DriftSpec::Constant(a) => a * h,
                DriftSpec::Custom(f) => f(t, mid, x, level) * h,
            };
        }
        Ok(LevyPart { vol, drift })
    }

    fn cell_contagion(&self, n: usize, level: f64, b: usize, x: f64, y: f64, i: usize) -> Result<f64> {
        let h = self.h();
        let t = n as f64 * h;
        let c = match self.model.coeffs.contagion {
            ContagionForm::LossImplied => {
                let table = self.survival[b].as_ref().expect("survival table for non-riskfree barrier");
                let lat = self.model.lattice().expect("lattice");
                let s0 = lat.state_of(level).ok_or_else(|| Error::Domain(format!("level {level} not on the loss lattice")))?;
                let s1 = lat.state_of(level + y).ok_or_else(|| Error::Domain(format!("level {} not on the loss lattice", level + y)))?;
                table.cell_spread(s1, i - n) - table.cell_spread(s0, i - n)
            }
            _ => {
                let (u0, u1) = (i as f64 * h, (i + 1) as f64 * h);
                (self.model.cstar(t, u1, x, level, y)? - self.model.cstar(t, u0, x, level, y)?) / h
            }
        };
        self.model.check_contagion(c)?;
        Ok(c)
    }

    fn build_loss(&self, n: usize, level: f64, b: usize, x: f64) -> Result<LossPart> {
        let h = self.h();
        let nc = self.surface0.n_cells();
        let t = n as f64 * h;
        let weights = self.model.loss.weights(t, level);
        let marks: Vec<f64> = weights.iter().map(|w| w.0).collect();
        let crossing: Vec<bool> = marks.iter().map(|&y| crosses(level, y, x)).collect();
        let mut contagion = vec![vec![0.0; nc]; marks.len()];
        for (m, &y) in marks.iter().enumerate() {
            if crossing[m] || self.model.coeffs.contagion == ContagionForm::None {
                continue;
            }
            for i in n + 1..nc {
                contagion[m][i] = self.cell_contagion(n, level, b, x, y, i)?;
            }
        }
        let mut drift = vec![0.0; nc];
        if self.has_loss_drift() {
            let mut cstar = vec![0.0; marks.len()];
            let mut lx_prev = 0.0;
            for i in n + 1..nc {
                let mut lx = 0.0;
                for m in 0..marks.len() {
                    cstar[m] += h * contagion[m][i];
                    if !crossing[m] {
                        lx += weights[m].1 * ((-cstar[m]).exp() - 1.0);
                    }
                }
                drift[i] = (lx - lx_prev) / h;
                lx_prev = lx;
            }
        }
        Ok(LossPart { marks, crossing, contagion, drift })
    }

    fn build_table(&self, n: usize, level: f64) -> Result<StepTable> {
        let t = n as f64 * self.h();
        let mut barriers = Vec::with_capacity(self.surface0.barriers().len());
        for (b, &x) in self.surface0.barriers().iter().enumerate() {
            if crossed(level, x) {
                barriers.push(None);
                continue;
            }
            let levy = match &self.shared_levy[n] {
                Some(p) => p.clone(),
                None => Arc::new(self.build_levy(n, level, x)?),
            };
            let loss = if is_riskfree(x) { None } else { Some(self.build_loss(n, level, b, x)?) };
            barriers.push(Some(BarrierStep { levy, loss, lambda: self.model.loss.lambda_unchecked(t, x, level) }));
        }
        Ok(StepTable { barriers })
    }

    fn table(&self, n: usize, level: f64) -> Result<Arc<StepTable>> {
        let key = level_key(level);
        {
            let slot = self.tables[n].read().expect("table cache poisoned");
            if let Some((_, t)) = slot.iter().find(|(k, _)| *k == key) {
                return Ok(t.clone());
            }
        }
        let built = Arc::new(self.build_table(n, level)?);
        let mut slot = self.tables[n].write().expect("table cache poisoned");
        if let Some((_, t)) = slot.iter().find(|(k, _)| *k == key) {
            return Ok(t.clone());
        }
        slot.push((key, built.clone()));
        Ok(built)
    }

    fn lambda_at(&self, n: usize, level: f64, b: usize) -> Result<f64> {
        if n < self.n_steps {
            Ok(self.table(n, level)?.barriers[b].as_ref().map_or(0.0, |s| s.lambda))
        } else {
            Ok(self.model.loss.lambda_unchecked(n as f64 * self.h(), self.surface0.barriers()[b], level))
        }
    }

    /// Writes `f(t_n, t_n, x) = f(t_n, t_n) + λ(t_n, x)` into the short-rate cell.
    fn pin_short_end(&self, st: &mut PathState) -> Result<()> {
        let nc = st.n_cells;
        let n = st.n;
        if n >= nc {
            return Ok(());
        }
        let one = self.surface0.riskfree_index();
        let f1 = st.cells[one * nc + n];
        for b in 0..one {
            if !st.alive[b] {
                continue;
            }
            let target = f1 + self.lambda_at(n, st.level, b)?;
            let cell = &mut st.cells[b * nc + n];
            st.dc2_residual = st.dc2_residual.max((*cell - target).abs());
            *cell = target;
        }
        Ok(())
    }

    pub fn initial_state(&self) -> Result<PathState> {
        let barriers = self.surface0.barriers();
        let mut st = PathState {
            n: 0,
            h: self.h(),
            level: 0.0,
            alive: barriers.iter().map(|&x| !crossed(0.0, x)).collect(),
            n_cells: self.surface0.n_cells(),
            cells: self.surface0.cells().to_vec(),
            log_discount: 0.0,
            dc2_residual: 0.0,
        };
        if self.pins_short_end() {
            self.pin_short_end(&mut st)?;
            st.dc2_residual = 0.0;
        }
        Ok(st)
    }

    fn apply_loss_drift(st: &mut PathState, table: &StepTable, dt: f64) {
        if dt <= 0.0 {
            return;
        }
        let nc = st.n_cells;
        for (b, step) in table.barriers.iter().enumerate() {
            let (Some(step), true) = (step, st.alive[b]) else { continue };
            let Some(loss) = &step.loss else { continue };
            let row = &mut st.cells[b * nc..(b + 1) * nc];
            for i in st.n + 1..nc {
                row[i] += loss.drift[i] * dt;
            }
        }
    }

    fn apply_loss_jump(st: &mut PathState, table: &StepTable, y: f64) {
        let nc = st.n_cells;
        for (b, step) in table.barriers.iter().enumerate() {
            let (Some(step), true) = (step, st.alive[b]) else { continue };
            let Some(loss) = &step.loss else { continue };
            let Some(m) = loss.marks.iter().position(|&v| (v - y).abs() <= 1e-15) else { continue };
            if loss.crossing[m] {
                st.alive[b] = false;
                continue;
            }
            let row = &mut st.cells[b * nc..(b + 1) * nc];
            for (f, c) in row[st.n + 1..].iter_mut().zip(&loss.contagion[m][st.n + 1..]) {
                *f += c;
            }
        }
    }

    /// Advances `st` from `t_n` to `t_{n+1}` given the Lévy increment and the
    /// loss path; `cursor` indexes the next unprocessed loss jump.
    pub fn step(&self, st: &mut PathState, dz: &[f64], loss: &LossPath, cursor: &mut usize) -> Result<()> {
        let n = st.n;
        if n >= self.n_steps {
            return Err(Error::Grid(format!("step {n} beyond the engine horizon")));
        }
        let h = self.h();
        let nc = st.n_cells;
        let one = self.surface0.riskfree_index();
        let (t0, t1) = (n as f64 * h, (n + 1) as f64 * h);
        st.log_discount -= h * st.cells[one * nc + n];

        let start = self.table(n, st.level)?;
        let mut current = start.clone();
        let mut s = t0;
        while *cursor < loss.times.len() && loss.times[*cursor] <= t1 {
            let tj = loss.times[*cursor].max(t0);
            Self::apply_loss_drift(st, &current, tj - s);
            Self::apply_loss_jump(st, &current, loss.sizes[*cursor]);
            st.level = loss.levels[*cursor];
            current = self.table(n, st.level)?;
            s = tj;
            *cursor += 1;
        }
        let rest = t1 - s;

        for (b, step) in start.barriers.iter().enumerate() {
            if !st.alive[b] {
                continue;
            }
            let step = step.as_ref().expect("alive barrier has a table");
            let loss_drift = current.barriers[b].as_ref().and_then(|s| s.loss.as_ref()).map(|l| &l.drift[..]);
            let row = &mut st.cells[b * nc..(b + 1) * nc];
            let lv = &step.levy;
            match loss_drift {
                Some(ld) if rest > 0.0 => {
                    for i in n + 1..nc {
                        row[i] += lv.drift[i] + ld[i] * rest;
                    }
                }
                _ => {
                    for i in n + 1..nc {
                        row[i] += lv.drift[i];
                    }
                }
            }
            for (k, &z) in dz.iter().enumerate() {
                if z != 0.0 {
                    for (f, v) in row[n + 1..].iter_mut().zip(&lv.vol[k][n + 1..]) {
                        *f += v * z;
                    }
                }
            }
        }

        st.n = n + 1;
        if self.pins_short_end() {
            self.pin_short_end(st)?;
        }
        if !st.log_discount.is_finite() {
            return Err(Error::Step { t: t1, maturity: t1, barrier: 1.0, reason: "discount factor is not finite".into() });
        }
        if st.n < nc {
            for (b, &x) in self.surface0.barriers().iter().enumerate() {
                if !st.alive[b] {
                    continue;
                }
                let row = &st.cells[b * nc..(b + 1) * nc];
                for j in [st.n, nc - 1] {
                    if !row[j].is_finite() {
                        return Err(Error::Step { t: t1, maturity: (j + 1) as f64 * h, barrier: x, reason: format!("forward rate {}", row[j]) });
                    }
                }
            }
        }
        Ok(())
    }

    /// Simulates path `path_index`, calling `observer` at every grid time.
    pub fn run_path(&self, seed: u64, path_index: u64, observer: &mut dyn PathObserver) -> Result<PathState> {
        let loss = self.model.loss.simulate_loss_path(self.horizon(), seed, path_index)?;
        let mut rng = path_rng(seed, path_index, StreamKind::Levy);
        let stepper = self.model.levy.stepper();
        let mut parts = StepParts::new(self.model.levy.dim());
        let mut st = self.initial_state()?;
        observer.on_grid(&st)?;
        let mut cursor = 0;
        let grid = self.grid();
        for w in grid.windows(2) {
            stepper.sample(&mut rng, w[0], w[1] - w[0], &mut parts, None);
            self.step(&mut st, &parts.total, &loss, &mut cursor)?;
            observer.on_grid(&st)?;
        }
        Ok(st)
    }

    /// Surface snapshot of a path state.
    pub fn snapshot(&self, st: &PathState) -> Result<ForwardSurface> {
        Ok(ForwardSurface::from_cells(self.h(), self.surface0.barriers().to_vec(), st.cells.clone())?.with_time_index(st.n))
    }

    /// Evolves the initial surface along given Lévy increments and loss path;
    /// returns the surface at every grid time.
    pub fn evolve_surface(&self, levy_path: &LevyPathRecord, loss_path: &LossPath) -> Result<Vec<ForwardSurface>> {
        let grid = self.grid();
        if levy_path.grid.len() != grid.len() || levy_path.grid.iter().zip(&grid).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::Grid("Lévy path grid does not match the engine grid".into()));
        }
        if loss_path.horizon + 1e-12 < self.horizon() {
            return Err(Error::Grid("loss path is shorter than the engine horizon".into()));
        }
        loss_path.check_invariants()?;
        let mut st = self.initial_state()?;
        let mut out = vec![self.snapshot(&st)?];
        let mut cursor = 0;
        for dz in &levy_path.increments {
            self.step(&mut st, dz, loss_path, &mut cursor)?;
            out.push(self.snapshot(&st)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjm::{CoefficientSpec, VolComponent};
    use crate::levy::{JumpMeasure, LevyTriplet};
    use crate::loss::{LossCompensatorSpec, MarkAtom};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn model(vol: Vec<VolComponent>, contagion: ContagionForm, drift: DriftSpec, rate: f64) -> HjmModel {
        let d = vol.len();
        let mut sigma = vec![0.0; d * d];
        for k in 0..d {
            sigma[k * d + k] = 1.0;
        }
        let levy = LevyTriplet::gaussian(vec![0.0; d], sigma).unwrap();
        let loss = LossCompensatorSpec::constant(rate, vec![MarkAtom { y: 0.05, p: 1.0 }]).unwrap();
        HjmModel::new(levy, loss, CoefficientSpec::new(VolSpec::Parametric(vol), contagion, drift)).unwrap()
    }

    fn grid_paths(engine: &Engine, seed: u64, i: u64) -> (LevyPathRecord, LossPath) {
        let levy = engine.model().levy.simulate_increments(&engine.grid(), seed, i).unwrap();
        let loss = engine.model().loss.simulate_loss_path(engine.horizon(), seed, i).unwrap();
        (levy, loss)
    }

    #[test]
    fn zero_coefficients_leave_surface_constant() {
        let m = model(vec![VolComponent::Constant { sigma: 0.0 }], ContagionForm::None, DriftSpec::Zero, 3.0);
        let s0 = ForwardSurface::from_fn(0.1, 2.0, vec![0.2, 1.0], |u, x| 0.01 + 0.02 * u + (1.0 - x)).unwrap();
        let e = Engine::new(m, s0.clone(), 20).unwrap();
        let (levy, loss) = grid_paths(&e, 3, 0);
        let traj = e.evolve_surface(&levy, &loss).unwrap();
        for s in &traj {
            assert_eq!(s.cells(), s0.cells());
        }
    }

    #[test]
    fn deterministic_drift_integrates() {
        let a = |_t: f64, u: f64, x: f64, _l: f64| 0.01 * u + 0.002 * x;
        let m = model(vec![VolComponent::Constant { sigma: 0.0 }], ContagionForm::None, DriftSpec::Custom(Arc::new(a)), 0.0);
        let h = 0.05;
        let s0 = ForwardSurface::flat(h, 2.0, vec![0.4, 1.0], 0.03).unwrap();
        let e = Engine::new(m, s0, 40).unwrap();
        let (levy, loss) = grid_paths(&e, 1, 0);
        let traj = e.evolve_surface(&levy, &loss).unwrap();
        let s = &traj[17];
        for (b, &x) in s.barriers().iter().enumerate() {
            for j in 18..40 {
                let mid = (j as f64 + 0.5) * h;
                let expected = 0.03 + 17.0 * h * a(0.0, mid, x, 0.0);
                assert_abs_diff_eq!(s.cell(b, j), expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn short_end_is_pinned_exactly() {
        let m = model(vec![VolComponent::Constant { sigma: 0.05 }], ContagionForm::LossImplied, DriftSpec::NoArbitrage, 4.0);
        let h = 0.02;
        let s0 = ForwardSurface::loss_implied(h, 1.0, vec![0.04, 0.12, 1.0], |_| 0.03, m.lattice().unwrap()).unwrap();
        let e = Engine::new(m, s0, 50).unwrap();
        for i in 0..20 {
            let mut check = |st: &PathState| {
                if st.n < 50 {
                    let f1 = st.row(2)[st.n];
                    for b in 0..2 {
                        if st.alive[b] {
                            let x = e.surface0().barriers()[b];
                            let want = crate::hjm::dc2_short_rate(f1, &e.model().loss, st.t(), x, st.level).unwrap();
                            assert_eq!(st.row(b)[st.n], want);
                        }
                    }
                }
                Ok(())
            };
            e.run_path(9, i, &mut check).unwrap();
        }
    }

    #[test]
    fn crossed_barrier_stays_at_zero() {
        let m = model(vec![VolComponent::Constant { sigma: 0.01 }], ContagionForm::Constant { kappa: 0.2 }, DriftSpec::NoArbitrage, 20.0);
        let s0 = ForwardSurface::flat(0.05, 1.0, vec![0.05, 0.3, 1.0], 0.02).unwrap();
        let e = Engine::new(m, s0, 20).unwrap();
        for i in 0..50 {
            let mut dead = [false; 3];
            let mut check = |st: &PathState| {
                for b in 0..3 {
                    if dead[b] {
                        assert_eq!(st.bond_price(b, 20), 0.0);
                    }
                    dead[b] |= !st.alive[b];
                    if st.alive[b] {
                        assert!(st.log_pre_default(b, 20).exp() > 0.0);
                    }
                }
                assert!(st.discount() > 0.0);
                Ok(())
            };
            e.run_path(4, i, &mut check).unwrap();
        }
    }

    #[test]
    fn exposure_outside_b_fails_before_stepping() {
        let levy = LevyTriplet::new(vec![0.0], vec![0.0], JumpMeasure::DoubleExponential { rate: 1.0, p_up: 0.5, eta_up: 3.0, eta_down: 3.0, direction: vec![1.0] }).unwrap();
        let loss = LossCompensatorSpec::constant(0.0, vec![MarkAtom { y: 0.1, p: 1.0 }]).unwrap();
        let coeffs = CoefficientSpec::new(VolSpec::Parametric(vec![VolComponent::Constant { sigma: 1.0 }]), ContagionForm::None, DriftSpec::NoArbitrage);
        let m = HjmModel::new(levy, loss, coeffs).unwrap();
        let s0 = ForwardSurface::flat(0.1, 5.0, vec![1.0], 0.0).unwrap();
        assert!(matches!(Engine::new(m, s0, 10), Err(Error::Domain(_))));
    }

    #[test]
    fn contagion_bound_is_checked() {
        let mut m = model(vec![VolComponent::Constant { sigma: 0.0 }], ContagionForm::Constant { kappa: 2.0 }, DriftSpec::NoArbitrage, 1.0);
        m.coeffs.contagion_bound = Some(1.0);
        let s0 = ForwardSurface::flat(0.1, 1.0, vec![0.5, 1.0], 0.0).unwrap();
        assert!(matches!(Engine::new(m, s0, 5), Err(Error::CoefficientBound { .. })));
    }

    #[test]
    fn non_finite_state_is_a_step_error() {
        let m = model(vec![VolComponent::Constant { sigma: 0.0 }], ContagionForm::None, DriftSpec::Constant(1e308), 0.0);
        let s0 = ForwardSurface::flat(0.5, 2.0, vec![1.0], 1e308).unwrap();
        let e = Engine::new(m, s0, 3).unwrap();
        let mut noop = |_: &PathState| Ok(());
        assert!(matches!(e.run_path(0, 0, &mut noop), Err(Error::Step { .. })));
    }

    #[test]
    fn run_path_matches_evolve_surface() {
        let m = model(vec![VolComponent::Constant { sigma: 0.1 }, VolComponent::ExpDecay { sigma: 0.05, decay: 1.0 }], ContagionForm::LossImplied, DriftSpec::NoArbitrage, 3.0);
        let h = 0.05;
        let s0 = ForwardSurface::loss_implied(h, 1.0, vec![0.1, 1.0], |_| 0.02, m.lattice().unwrap()).unwrap();
        let e = Engine::new(m, s0, 20).unwrap();
        let (levy, loss) = grid_paths(&e, 8, 5);
        let traj = e.evolve_surface(&levy, &loss).unwrap();
        let mut k = 0;
        let mut cmp = |st: &PathState| {
            assert_eq!(st.cells(), traj[k].cells());
            k += 1;
            Ok(())
        };
        e.run_path(8, 5, &mut cmp).unwrap();
    }

    /// With no loss activity the discounted bond is `exp(-⟨E, Z⟩ - J-terms)`; one
    /// step is checked against the closed form.
    #[test]
    fn one_step_levy_update_is_exact() {
        let sigma = 0.3;
        let m = model(vec![VolComponent::Constant { sigma }], ContagionForm::None, DriftSpec::NoArbitrage, 0.0);
        let h = 0.1;
        let s0 = ForwardSurface::flat(h, 1.0, vec![1.0], 0.0).unwrap();
        let e = Engine::new(m, s0, 1).unwrap();
        let mut st = e.initial_state().unwrap();
        let z = 0.7;
        e.step(&mut st, &[z], &LossPath::empty(1.0), &mut 0).unwrap();
        // log p(t_1, u_j) = -E_j z - h J(E_j), E_j = σ (u_j - t_1)
        for j in 2..=10 {
            let ex = sigma * (j - 1) as f64 * h;
            assert_abs_diff_eq!(st.log_pre_default(0, j), -ex * z - h * 0.5 * ex * ex, epsilon = 1e-13);
        }
    }

    proptest! {
        #[test]
        fn loss_drift_telescopes_to_drift_condition(kappa in 0.0..3.0f64, rate in 0.1..10.0f64, n in 0usize..10) {
            let m = model(vec![VolComponent::Constant { sigma: 0.0 }], ContagionForm::Constant { kappa }, DriftSpec::NoArbitrage, rate);
            let h = 0.1;
            let s0 = ForwardSurface::flat(h, 2.0, vec![0.3, 1.0], 0.0).unwrap();
            let e = Engine::new(m, s0, 19).unwrap();
            let table = e.table(n, 0.0).unwrap();
            let loss = table.barriers[0].as_ref().unwrap().loss.as_ref().unwrap();
            let mut acc = 0.0;
            for j in n + 1..20 {
                acc += loss.drift[j] * h;
                let horizon = (j + 1 - (n + 1)) as f64 * h;
                prop_assert!((acc - rate * ((-kappa * horizon).exp() - 1.0)).abs() < 1e-12);
            }
        }
    }
}
