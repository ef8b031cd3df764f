//! JSON scenario files tying together the driver, the loss process, the
//! coefficients, the initial surface and the simulation and pricing requests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::hjm::{cells_for, is_riskfree, CoefficientSpec, ContagionForm, DriftSpec, ForwardSurface, HjmModel, VolComponent, VolSpec};
use crate::levy::{JumpMeasure, LevyTriplet};
use crate::loss::{LossCompensatorSpec, LossRate, MarkAtom, LOSS_TOL};
use crate::market::{LossTermConvention, TenorStructure};
use crate::mc::{Execution, MartingaleTestConfig, DEFAULT_BLOCK_SIZE, DEFAULT_Z_THRESHOLD};
use crate::pricing::{EuropeanPayoff, TranchePayoff};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyBlock {
    pub dimension: usize,
    pub drift: Vec<f64>,
    /// Row-major Σ.
    pub covariance: Vec<f64>,
    #[serde(default = "no_jumps")]
    pub jumps: JumpMeasure,
}

fn no_jumps() -> JumpMeasure {
    JumpMeasure::None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossRateBlock {
    Constant { value: f64 },
    Affine { intercept: f64, slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBlock {
    pub rate: LossRateBlock,
    pub marks: Vec<MarkAtom>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftTag {
    NoArbitrage,
    Zero,
    ContinuousHjm,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsBlock {
    pub drift: DriftTag,
    pub vol: Vec<VolComponent>,
    #[serde(default = "no_contagion")]
    pub contagion: ContagionForm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vol_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contagion_bound: Option<f64>,
}

fn no_contagion() -> ContagionForm {
    ContagionForm::None
}

/// Initial forward surface on the cell grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurfaceBlock {
    /// Every barrier at the same rate.
    Flat { rate: f64 },
    /// Risk-free `a + b u` plus the spread implied by the loss process.
    LossImplied { a: f64, b: f64 },
    /// Columns `T, x, f0`, resolved against the scenario file's directory.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    /// Cell width and Euler step.
    pub h: f64,
    pub horizon: f64,
    pub barriers: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrancheBlock {
    pub x1: f64,
    pub x2: f64,
    pub coupon_dates: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_date: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<f64>,
}

impl TrancheBlock {
    pub fn payoff(&self) -> TranchePayoff {
        TranchePayoff { x1: self.x1, x2: self.x2, coupon_dates: self.coupon_dates.clone(), effective_date: self.effective_date }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EuropeanBlock {
    pub maturity: f64,
    pub payoff: EuropeanPayoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Target {
    pub maturity: f64,
    pub barrier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    pub paths: u64,
    pub seed: u64,
    pub checkpoints: Vec<f64>,
    pub targets: Vec<Target>,
    /// Simulated horizon; defaults to the last checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
}

fn default_threshold() -> f64 {
    DEFAULT_Z_THRESHOLD
}

fn default_block_size() -> usize {
    DEFAULT_BLOCK_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesBlock {
    /// Grid times at which the surface is dumped along path 0 of the seed.
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub levy: LevyBlock,
    pub loss: LossBlock,
    pub coefficients: CoefficientsBlock,
    pub grid: GridBlock,
    pub surface: SurfaceBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tenor: Option<TenorStructure>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tranches: Vec<TrancheBlock>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub europeans: Vec<EuropeanBlock>,
    pub simulation: SimulationBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curves: Option<CurvesBlock>,
    #[serde(default)]
    pub loss_term: LossTermConvention,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn on_grid(t: f64, h: f64) -> bool {
    let n = t / h;
    (n - n.round()).abs() <= 1e-9 * n.abs().max(1.0)
}

fn has_barrier(barriers: &[f64], x: f64) -> bool {
    barriers.iter().any(|&b| (b - x).abs() <= LOSS_TOL)
}

impl Scenario {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let sc: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Parse(format!("field `{path}`: {}", e.into_inner()))
        })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut sc = Self::from_json_str(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })?;
        sc.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(sc)
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Cross-reference checks that do not need any model construction.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let n_cells = cells_for(g.h, g.horizon)?;
        if g.barriers.is_empty() || g.barriers.windows(2).any(|w| !(w[1] > w[0])) || !is_riskfree(*g.barriers.last().unwrap()) || g.barriers[0] < 0.0 {
            return Err(Error::Config("grid.barriers must be strictly increasing in [0, 1] and include 1".into()));
        }
        if self.levy.dimension != self.coefficients.vol.len() {
            return Err(Error::Config(format!("levy.dimension = {} but coefficients.vol has {} components", self.levy.dimension, self.coefficients.vol.len())));
        }
        let horizon = n_cells as f64 * g.h;
        let within = |t: f64| t >= -1e-12 && t <= horizon + 1e-9;
        if let Some(tenor) = &self.tenor {
            tenor.validate()?;
            if let Some(m) = tenor.maturities.iter().find(|&&m| !within(m)) {
                return Err(Error::Config(format!("tenor maturity {m} lies beyond the grid horizon {horizon}")));
            }
            if let Some(x) = tenor.barriers.iter().find(|&&x| !has_barrier(&g.barriers, x)) {
                return Err(Error::Config(format!("tenor barrier {x} is not on the barrier grid")));
            }
        }
        for (n, tr) in self.tranches.iter().enumerate() {
            tr.payoff().validate().map_err(|e| Error::Config(format!("tranches[{n}]: {e}")))?;
            for x in [tr.x1, tr.x2] {
                if !has_barrier(&g.barriers, x) {
                    return Err(Error::Config(format!("tranches[{n}]: detachment point {x} is not on the barrier grid")));
                }
            }
            if let Some(d) = tr.coupon_dates.iter().chain(tr.effective_date.iter()).find(|&&d| !within(d)) {
                return Err(Error::Config(format!("tranches[{n}]: date {d} lies beyond the grid horizon {horizon}")));
            }
        }
        for (n, eu) in self.europeans.iter().enumerate() {
            if !within(eu.maturity) {
                return Err(Error::Config(format!("europeans[{n}]: maturity {} lies beyond the grid horizon {horizon}", eu.maturity)));
            }
        }
        let sim = &self.simulation;
        let sim_horizon = self.simulation_horizon();
        if !(sim_horizon > 0.0) || !on_grid(sim_horizon, g.h) || sim_horizon > horizon + 1e-9 {
            return Err(Error::Config(format!("simulation horizon {sim_horizon} must be a positive grid time not beyond {horizon}")));
        }
        if let Some(t) = sim.checkpoints.iter().find(|&&t| !on_grid(t, g.h) || t > sim_horizon + 1e-9 || t < 0.0) {
            return Err(Error::Config(format!("simulation checkpoint {t} is not a grid time inside the simulated horizon")));
        }
        for tg in &sim.targets {
            if !has_barrier(&g.barriers, tg.barrier) || !within(tg.maturity) {
                return Err(Error::Config(format!("simulation target (T={}, x={}) is not on the surface grid", tg.maturity, tg.barrier)));
            }
        }
        if let Some(c) = &self.curves {
            if let Some(t) = c.times.iter().find(|&&t| !on_grid(t, g.h) || t < 0.0 || t > sim_horizon + 1e-9) {
                return Err(Error::Config(format!("curve time {t} is not a grid time inside the simulated horizon")));
            }
        }
        Ok(())
    }

    /// True when every volatility component vanishes, so risk-free rates are deterministic.
    pub fn riskfree_is_deterministic(&self) -> bool {
        self.coefficients.vol.iter().all(|v| match *v {
            VolComponent::Constant { sigma } | VolComponent::ExpDecay { sigma, .. } | VolComponent::Separable { sigma, .. } => sigma == 0.0,
        })
    }

    pub fn simulation_horizon(&self) -> f64 {
        self.simulation.horizon.unwrap_or_else(|| self.simulation.checkpoints.iter().copied().fold(self.grid.h, f64::max))
    }

    pub fn build_levy(&self) -> Result<LevyTriplet> {
        let l = &self.levy;
        if l.drift.len() != l.dimension || l.covariance.len() != l.dimension * l.dimension {
            return Err(Error::Config(format!("levy block: drift needs {} entries and covariance {}", l.dimension, l.dimension * l.dimension)));
        }
        LevyTriplet::new(l.drift.clone(), l.covariance.clone(), l.jumps.clone())
    }

    pub fn build_loss(&self) -> Result<LossCompensatorSpec> {
        let l = &self.loss;
        let (rate, peak) = match l.rate {
            LossRateBlock::Constant { value } => (LossRate::Constant(value), value),
            LossRateBlock::Affine { intercept, slope } => (LossRate::Affine { intercept, slope }, intercept.max(intercept + slope)),
        };
        LossCompensatorSpec::new(rate, l.marks.clone(), l.rate_bound.unwrap_or(peak))
    }

    pub fn build_model(&self) -> Result<HjmModel> {
        let c = &self.coefficients;
        let drift = match c.drift {
            DriftTag::NoArbitrage => DriftSpec::NoArbitrage,
            DriftTag::Zero => DriftSpec::Zero,
            DriftTag::ContinuousHjm => DriftSpec::ContinuousHjm,
            DriftTag::Constant(a) => DriftSpec::Constant(a),
        };
        let mut coeffs = CoefficientSpec::new(VolSpec::Parametric(c.vol.clone()), c.contagion, drift);
        coeffs.vol_bound = c.vol_bound;
        coeffs.contagion_bound = c.contagion_bound;
        HjmModel::new(self.build_levy()?, self.build_loss()?, coeffs)
    }

    pub fn build_surface(&self, model: &HjmModel) -> Result<ForwardSurface> {
        let g = &self.grid;
        let s = match &self.surface {
            SurfaceBlock::Flat { rate } => ForwardSurface::flat(g.h, g.horizon, g.barriers.clone(), *rate)?,
            SurfaceBlock::LossImplied { a, b } => {
                let lat = model.lattice().ok_or_else(|| Error::Config("a loss-implied surface needs a time-homogeneous loss rate".into()))?;
                ForwardSurface::loss_implied(g.h, g.horizon, g.barriers.clone(), |u| a + b * u, lat)?
            }
            SurfaceBlock::Csv { path } => {
                let full = if path.is_absolute() { path.clone() } else { self.base_dir.join(path) };
                let s = ForwardSurface::from_csv(&full)?;
                if (s.h() - g.h).abs() > 1e-12 || s.barriers() != g.barriers.as_slice() || (s.horizon() - g.horizon).abs() > 1e-9 {
                    return Err(Error::Config(format!("surface CSV {} does not match the grid block", full.display())));
                }
                s
            }
        };
        Ok(s)
    }

    pub fn build_engine(&self) -> Result<Engine> {
        let model = self.build_model()?;
        let surface = self.build_surface(&model)?;
        let steps = cells_for(self.grid.h, self.simulation_horizon())?;
        Engine::new(model, surface, steps)
    }

    pub fn martingale_config(&self, paths: Option<u64>, seed: Option<u64>, execution: Execution) -> MartingaleTestConfig {
        let sim = &self.simulation;
        let mut cfg = MartingaleTestConfig::new(paths.unwrap_or(sim.paths), seed.unwrap_or(sim.seed), sim.checkpoints.clone(), sim.targets.iter().map(|t| (t.maturity, t.barrier)).collect());
        cfg.threshold = sim.threshold;
        cfg.block_size = sim.block_size;
        cfg.execution = execution;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"{
  "name": "gaussian",
  "levy": { "dimension": 2, "drift": [0.0, 0.0], "covariance": [1.0, 0.3, 0.3, 1.0] },
  "loss": { "rate": { "type": "constant", "value": 1.0 }, "marks": [{ "y": 0.05, "p": 1.0 }] },
  "coefficients": {
    "drift": "no_arbitrage",
    "vol": [{ "type": "constant", "sigma": 0.02 }, { "type": "exp_decay", "sigma": 0.015, "decay": 0.5 }],
    "contagion": { "type": "loss_implied" }
  },
  "grid": { "h": 0.02, "horizon": 1.0, "barriers": [0.05, 0.1, 1.0] },
  "surface": { "type": "loss_implied", "a": 0.03, "b": 0.01 },
  "tranches": [{ "x1": 0.05, "x2": 0.1, "coupon_dates": [0.5, 1.0], "spread": 0.02 }],
  "europeans": [{ "maturity": 1.0, "payoff": { "kind": "constant", "c": 1.0 } }],
  "simulation": { "paths": 10000, "seed": 7, "checkpoints": [0.2, 0.4], "targets": [{ "maturity": 1.0, "barrier": 0.1 }] },
  "curves": { "times": [0.0, 0.2] }
}"#;

    #[test]
    fn parses_and_round_trips() {
        let sc = Scenario::from_json_str(SAMPLE).unwrap();
        let again = Scenario::from_json_str(&sc.to_json_string().unwrap()).unwrap();
        assert_eq!(sc, again);
        assert_eq!(sc.simulation.threshold, DEFAULT_Z_THRESHOLD);
        assert_eq!(sc.loss_term, LossTermConvention::Compensated);
        sc.build_engine().unwrap();
    }

    #[test]
    fn unknown_field_is_named() {
        let bad = SAMPLE.replace("\"seed\": 7", "\"seed\": 7, \"sede\": 8");
        match Scenario::from_json_str(&bad) {
            Err(Error::Parse(m)) => assert!(m.contains("simulation") && m.contains("sede"), "{m}"),
            other => panic!("{other:?}"),
        }
        let missing = SAMPLE.replace("\"paths\": 10000, ", "");
        match Scenario::from_json_str(&missing) {
            Err(Error::Parse(m)) => assert!(m.contains("paths") && m.contains("line"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cross_references_are_checked() {
        let off = SAMPLE.replace("\"x2\": 0.1", "\"x2\": 0.2");
        assert!(matches!(Scenario::from_json_str(&off), Err(Error::Config(_))));
        let late = SAMPLE.replace("\"coupon_dates\": [0.5, 1.0]", "\"coupon_dates\": [0.5, 2.0]");
        assert!(matches!(Scenario::from_json_str(&late), Err(Error::Config(_))));
        let no_one = SAMPLE.replace("[0.05, 0.1, 1.0]", "[0.05, 0.1]");
        assert!(matches!(Scenario::from_json_str(&no_one), Err(Error::Config(_))));
        let off_grid = SAMPLE.replace("[0.2, 0.4]", "[0.2, 0.41]");
        assert!(matches!(Scenario::from_json_str(&off_grid), Err(Error::Config(_))));
    }
}
