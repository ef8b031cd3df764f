//! Monte Carlo orchestration: block-wise path estimation with a deterministic
//! reduction, and the statistical martingale test of discounted bond prices.

use std::fmt::Write as _;
use std::io::Write;

use crate::engine::{Engine, PathState};
use crate::error::{Error, Result};
use crate::rng::SeedManifest;

pub const DEFAULT_BLOCK_SIZE: usize = 1024;
pub const DEFAULT_Z_THRESHOLD: f64 = 4.0;
pub const MIN_PATHS: u64 = 10_000;

/// How blocks of paths are scheduled. Results never depend on the choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon data parallelism; `0` threads means the global pool.
    Parallel { threads: usize },
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel { threads: 0 }
        } else {
            Execution::Sequential
        }
    }
}

/// Running mean and centred second moment per component, plus a running max
/// of one auxiliary quantity.
#[derive(Debug, Clone, PartialEq)]
struct Block {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    aux_max: f64,
}

impl Block {
    fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim], aux_max: 0.0 }
    }

    fn push(&mut self, x: &[f64], aux: f64) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
        self.aux_max = self.aux_max.max(aux);
    }

    fn merge(a: Block, b: Block) -> Block {
        if a.n == 0 {
            return b;
        }
        if b.n == 0 {
            return a;
        }
        let n = a.n + b.n;
        let (na, nb, nn) = (a.n as f64, b.n as f64, n as f64);
        let mut out = Block { n, mean: a.mean.clone(), m2: a.m2.clone(), aux_max: a.aux_max.max(b.aux_max) };
        for k in 0..out.mean.len() {
            let d = b.mean[k] - a.mean[k];
            out.mean[k] = a.mean[k] + d * nb / nn;
            out.m2[k] = a.m2[k] + b.m2[k] + d * d * na * nb / nn;
        }
        out
    }
}

fn tree_reduce(mut blocks: Vec<Block>, dim: usize) -> Block {
    if blocks.is_empty() {
        return Block::new(dim);
    }
    while blocks.len() > 1 {
        let mut next = Vec::with_capacity(blocks.len().div_ceil(2));
        let mut it = blocks.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => Block::merge(a, b),
                None => a,
            });
        }
        blocks = next;
    }
    blocks.pop().unwrap()
}

/// Sample moments of a per-path statistic vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub se: Vec<f64>,
    /// Largest auxiliary value reported by any path.
    pub aux_max: f64,
}

/// Estimates `E[stat(path)]` over `n_paths` paths. `f(path_index, out)` fills
/// the statistic vector of one path and returns an auxiliary value that is
/// max-reduced. Paths are grouped in blocks of `block_size`; block moments are
/// combined in a fixed pairwise tree so the result is independent of the
/// schedule.
pub fn path_moments<F>(n_paths: u64, block_size: usize, exec: Execution, dim: usize, f: F) -> Result<Moments>
where
    F: Fn(u64, &mut [f64]) -> Result<f64> + Sync,
{
    if n_paths < 2 {
        return Err(Error::InsufficientPaths(format!("need at least two paths, got {n_paths}")));
    }
    let block_size = block_size.max(1) as u64;
    let n_blocks = n_paths.div_ceil(block_size);
    let run_block = |k: u64| -> Result<Block> {
        let mut acc = Block::new(dim);
        let mut buf = vec![0.0; dim];
        let end = ((k + 1) * block_size).min(n_paths);
        for p in k * block_size..end {
            buf.iter_mut().for_each(|v| *v = 0.0);
            let aux = f(p, &mut buf)?;
            acc.push(&buf, aux);
        }
        Ok(acc)
    };
    let blocks: Vec<Block> = match exec {
        Execution::Sequential => (0..n_blocks).map(run_block).collect::<Result<_>>()?,
        Execution::Parallel { threads } => run_parallel(n_blocks, threads, &run_block)?,
    };
    let total = tree_reduce(blocks, dim);
    let n = total.n as f64;
    let variance: Vec<f64> = total.m2.iter().map(|s| s / (n - 1.0)).collect();
    let se = variance.iter().map(|v| (v.max(0.0) / n).sqrt()).collect();
    Ok(Moments { n: total.n, mean: total.mean, variance, se, aux_max: total.aux_max })
}

#[cfg(feature = "parallel")]
fn run_parallel(n_blocks: u64, threads: usize, run_block: &(dyn Fn(u64) -> Result<Block> + Sync)) -> Result<Vec<Block>> {
    use rayon::prelude::*;
    let go = || (0..n_blocks).into_par_iter().map(run_block).collect::<Result<Vec<_>>>();
    if threads == 0 {
        go()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?
            .install(go)
    }
}

#[cfg(not(feature = "parallel"))]
fn run_parallel(n_blocks: u64, _threads: usize, run_block: &(dyn Fn(u64) -> Result<Block> + Sync)) -> Result<Vec<Block>> {
    (0..n_blocks).map(run_block).collect()
}

/// `(mean - reference) / se`, zero when both the error and the deviation vanish.
pub fn z_score(mean: f64, reference: f64, se: f64) -> f64 {
    let diff = mean - reference;
    if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 * reference.abs().max(1.0) {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleTestConfig {
    pub n_paths: u64,
    pub seed: u64,
    /// Grid times at which `E[D_t P(t, T, x)]` is compared with `P(0, T, x)`.
    pub checkpoints: Vec<f64>,
    /// Maturity and barrier of each tested bond.
    pub targets: Vec<(f64, f64)>,
    pub block_size: usize,
    pub threshold: f64,
    pub execution: Execution,
}

impl MartingaleTestConfig {
    pub fn new(n_paths: u64, seed: u64, checkpoints: Vec<f64>, targets: Vec<(f64, f64)>) -> Self {
        Self { n_paths, seed, checkpoints, targets, block_size: DEFAULT_BLOCK_SIZE, threshold: DEFAULT_Z_THRESHOLD, execution: Execution::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleRow {
    pub t: f64,
    pub maturity: f64,
    pub barrier: f64,
    pub p0: f64,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleTestReport {
    pub rows: Vec<MartingaleRow>,
    pub max_abs_z: f64,
    pub threshold: f64,
    pub passed: bool,
    pub n_paths: u64,
    pub manifest: SeedManifest,
    /// Largest short-end correction applied by the second drift condition.
    pub dc2_residual: f64,
}

impl MartingaleTestReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.manifest.comment_line())?;
        writeln!(w, "t,T,x,p0,mean,se,z")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{},{}", r.t, r.maturity, r.barrier, r.p0, r.mean, r.se, r.z)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "martingale test: {}", if self.passed { "PASS" } else { "FAIL" });
        let _ = writeln!(s, "paths: {}", self.n_paths);
        let _ = writeln!(s, "max |z|: {:.3} (threshold {})", self.max_abs_z, self.threshold);
        let _ = writeln!(s, "largest dc2 correction: {:.3e}", self.dc2_residual);
        if let Some(worst) = self.rows.iter().max_by(|a, b| a.z.abs().total_cmp(&b.z.abs())) {
            let _ = writeln!(s, "worst: t={} T={} x={} mean={:.8} p0={:.8} se={:.3e} z={:.3}", worst.t, worst.maturity, worst.barrier, worst.mean, worst.p0, worst.se, worst.z);
        }
        let _ = writeln!(s, "{}", self.manifest.comment_line());
        s
    }
}

fn grid_index(t: f64, h: f64, what: &str) -> Result<usize> {
    let k = t / h;
    let r = k.round();
    if t < 0.0 || (k - r).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::Grid(format!("{what} {t} is not on the simulation grid (step {h})")));
    }
    Ok(r as usize)
}

/// Simulates `config.n_paths` paths and compares `E[D_t P(t, T, x)]` with
/// `P(0, T, x)` at every checkpoint. After maturity the bond is held at its
/// payoff, `D_T 1{L_T <= x}`.
pub fn run_martingale_test(engine: &Engine, config: &MartingaleTestConfig) -> Result<MartingaleTestReport> {
    if config.n_paths < MIN_PATHS {
        return Err(Error::InsufficientPaths(format!("martingale test needs at least {MIN_PATHS} paths, got {}", config.n_paths)));
    }
    let h = engine.h();
    let surface = engine.surface0();
    let checkpoints: Vec<usize> = config.checkpoints.iter().map(|&t| grid_index(t, h, "checkpoint")).collect::<Result<_>>()?;
    if let Some(&c) = checkpoints.iter().find(|&&c| c > engine.n_steps()) {
        return Err(Error::Grid(format!("checkpoint {} beyond the simulated horizon {}", c as f64 * h, engine.horizon())));
    }
    let mut targets = Vec::with_capacity(config.targets.len());
    for &(maturity, x) in &config.targets {
        let j = grid_index(maturity, h, "maturity")?;
        if j > surface.n_cells() {
            return Err(Error::Grid(format!("maturity {maturity} beyond the surface")));
        }
        let b = surface.barrier_index(x).ok_or_else(|| Error::Grid(format!("barrier {x} is not on the surface grid")))?;
        targets.push((j, b));
    }
    let st0 = engine.initial_state()?;
    let p0: Vec<f64> = targets.iter().map(|&(j, b)| st0.bond_price(b, j)).collect();
    let nt = targets.len();
    let dim = checkpoints.len() * nt;

    let moments = path_moments(config.n_paths, config.block_size, config.execution, dim, |path, out| {
        let mut frozen = vec![0.0; nt];
        let mut observe = |st: &PathState| {
            let d = st.discount();
            for (k, &(j, b)) in targets.iter().enumerate() {
                if st.n == j {
                    frozen[k] = d * st.bond_price(b, j);
                }
            }
            for (c, &nc) in checkpoints.iter().enumerate() {
                if st.n == nc {
                    for (k, &(j, b)) in targets.iter().enumerate() {
                        out[c * nt + k] = if nc <= j { d * st.bond_price(b, j) } else { frozen[k] };
                    }
                }
            }
            Ok(())
        };
        let end = engine.run_path(config.seed, path, &mut observe)?;
        Ok(end.dc2_residual)
    })?;

    let mut rows = Vec::with_capacity(dim);
    let mut max_abs_z: f64 = 0.0;
    for (c, &nc) in checkpoints.iter().enumerate() {
        for (k, &(j, b)) in targets.iter().enumerate() {
            let i = c * nt + k;
            let (mean, se) = (moments.mean[i], moments.se[i]);
            if p0[k] > 0.0 && se > 0.1 * p0[k] {
                return Err(Error::InsufficientPaths(format!("standard error {se:.3e} exceeds 10% of P(0, {}, {}) = {:.6}", j as f64 * h, surface.barriers()[b], p0[k])));
            }
            let z = z_score(mean, p0[k], se);
            max_abs_z = max_abs_z.max(z.abs());
            rows.push(MartingaleRow { t: nc as f64 * h, maturity: j as f64 * h, barrier: surface.barriers()[b], p0: p0[k], mean, se, z });
        }
    }
    Ok(MartingaleTestReport {
        rows,
        max_abs_z,
        threshold: config.threshold,
        passed: max_abs_z <= config.threshold,
        n_paths: config.n_paths,
        manifest: SeedManifest::new(config.seed, config.n_paths, config.block_size),
        dc2_residual: moments.aux_max,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n_paths: u64,
    pub h: f64,
    pub max_abs_z: f64,
    /// Largest `|mean - p0|` over the report rows.
    pub max_abs_bias: f64,
    pub max_se: f64,
    /// Signed deviation of the row with the largest bias.
    pub worst_bias: f64,
}

/// Runs the martingale test for every `(h, N)` pair; `build(h)` constructs the
/// engine for a grid step.
pub fn convergence_sweep<F>(build: F, n_list: &[u64], h_list: &[f64], base: &MartingaleTestConfig) -> Result<Vec<SweepRow>>
where
    F: Fn(f64) -> Result<Engine>,
{
    let mut out = Vec::new();
    for &h in h_list {
        let engine = build(h)?;
        for &n in n_list {
            let cfg = MartingaleTestConfig { n_paths: n, ..base.clone() };
            let rep = run_martingale_test(&engine, &cfg)?;
            let worst = rep.rows.iter().max_by(|a, b| (a.mean - a.p0).abs().total_cmp(&(b.mean - b.p0).abs())).expect("non-empty report");
            out.push(SweepRow {
                n_paths: n,
                h,
                max_abs_z: rep.max_abs_z,
                max_abs_bias: (worst.mean - worst.p0).abs(),
                max_se: rep.rows.iter().map(|r| r.se).fold(0.0, f64::max),
                worst_bias: worst.mean - worst.p0,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hjm::{CoefficientSpec, ContagionForm, DriftSpec, ForwardSurface, HjmModel, VolComponent, VolSpec};
    use crate::levy::LevyTriplet;
    use crate::loss::{LossCompensatorSpec, MarkAtom};
    use proptest::prelude::*;

    fn engine(sigma: f64, drift: DriftSpec, rate: f64) -> Engine {
        let levy = LevyTriplet::gaussian(vec![0.0], vec![1.0]).unwrap();
        let loss = LossCompensatorSpec::constant(rate, vec![MarkAtom { y: 0.1, p: 1.0 }]).unwrap();
        let coeffs = CoefficientSpec::new(VolSpec::Parametric(vec![VolComponent::Constant { sigma }]), ContagionForm::None, drift);
        let model = HjmModel::new(levy, loss, coeffs).unwrap();
        let s0 = ForwardSurface::flat(0.1, 2.0, vec![0.15, 1.0], 0.03).unwrap();
        Engine::new(model, s0, 20).unwrap()
    }

    #[test]
    fn chan_merge_matches_two_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1013) as f64 / 17.0).collect();
        let m = path_moments(1000, 37, Execution::Sequential, 1, |p, out| {
            out[0] = xs[p as usize];
            Ok(0.0)
        })
        .unwrap();
        let mean = xs.iter().sum::<f64>() / 1000.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 999.0;
        assert!((m.mean[0] - mean).abs() < 1e-12);
        assert!((m.variance[0] - var).abs() < 1e-9 * var);
    }

    #[test]
    fn schedule_does_not_change_results() {
        let f = |p: u64, out: &mut [f64]| {
            out[0] = (p as f64).sin();
            out[1] = (p as f64 * 0.3).cos();
            Ok(p as f64)
        };
        let a = path_moments(10_000, 128, Execution::Sequential, 2, f).unwrap();
        let b = path_moments(10_000, 128, Execution::Parallel { threads: 3 }, 2, f).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.aux_max, 9999.0);
    }

    #[test]
    fn deterministic_model_has_zero_z() {
        let e = engine(0.0, DriftSpec::NoArbitrage, 0.0);
        let cfg = MartingaleTestConfig::new(10_000, 1, vec![0.0, 0.5, 1.0, 2.0], vec![(1.0, 0.15), (2.0, 1.0)]);
        let rep = run_martingale_test(&e, &cfg).unwrap();
        assert!(rep.passed);
        for r in &rep.rows {
            assert_eq!(r.z, 0.0);
            assert!((r.mean - r.p0).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_paths_or_off_grid_inputs_are_rejected() {
        let e = engine(0.1, DriftSpec::NoArbitrage, 1.0);
        let cfg = MartingaleTestConfig::new(100, 1, vec![0.5], vec![(1.0, 1.0)]);
        assert!(matches!(run_martingale_test(&e, &cfg), Err(Error::InsufficientPaths(_))));
        let cfg = MartingaleTestConfig::new(10_000, 1, vec![0.55], vec![(1.0, 1.0)]);
        assert!(matches!(run_martingale_test(&e, &cfg), Err(Error::Grid(_))));
        let cfg = MartingaleTestConfig::new(10_000, 1, vec![0.5], vec![(1.0, 0.4)]);
        assert!(matches!(run_martingale_test(&e, &cfg), Err(Error::Grid(_))));
    }

    #[test]
    fn reports_are_reproducible() {
        let e = engine(0.2, DriftSpec::NoArbitrage, 2.0);
        let mut cfg = MartingaleTestConfig::new(10_000, 11, vec![0.5, 1.0], vec![(1.0, 0.15), (2.0, 1.0)]);
        cfg.execution = Execution::Sequential;
        let a = run_martingale_test(&e, &cfg).unwrap();
        cfg.execution = Execution::Parallel { threads: 2 };
        let b = run_martingale_test(&e, &cfg).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let text = String::from_utf8(ca).unwrap();
        assert!(text.starts_with("# seed manifest"));
        assert_eq!(text.lines().nth(1), Some("t,T,x,p0,mean,se,z"));
    }

    #[test]
    fn zero_drift_with_volatility_fails() {
        let e = engine(0.3, DriftSpec::Zero, 0.0);
        let cfg = MartingaleTestConfig::new(10_000, 3, vec![1.0, 2.0], vec![(2.0, 1.0)]);
        let rep = run_martingale_test(&e, &cfg).unwrap();
        assert!(!rep.passed, "{}", rep.summary());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn z_score_is_zero_only_on_agreement(mean in -1.0..1.0f64, reference in -1.0..1.0f64, se in 0.0..0.1f64) {
            let z = z_score(mean, reference, se);
            if se > 0.0 {
                prop_assert!((z * se - (mean - reference)).abs() < 1e-12);
            } else {
                prop_assert_eq!(z == 0.0, (mean - reference).abs() <= 1e-12 * reference.abs().max(1.0));
            }
        }
    }
}
