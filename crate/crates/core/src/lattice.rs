//! Finite state space reachable by a time-homogeneous loss process and the
//! barrier survival probabilities `Q(τ, x, ℓ) = P(L_{t+τ} <= x | L_t = ℓ)`.
//!
//! Survival curves are computed by uniformization of the generator killed at
//! the barrier. Their log-derivative is the loss-implied spread used to build
//! Markov-consistent initial surfaces and contagion loadings.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::loss::{crossed, crosses, LossCompensatorSpec};

const MAX_STATES: usize = 200_000;
const KEY_SCALE: f64 = 1e9;

/// Key identifying a loss level up to accumulated rounding.
pub fn level_key(level: f64) -> i64 {
    (level * KEY_SCALE).round() as i64
}

#[derive(Debug, Clone)]
pub struct MarkovLossLattice {
    levels: Vec<f64>,
    index: HashMap<i64, usize>,
    // (target state, y, rate) per state
    transitions: Vec<Vec<(usize, f64, f64)>>,
}

impl MarkovLossLattice {
    /// Enumerates all levels reachable from `start`.
    pub fn build(spec: &LossCompensatorSpec, start: f64) -> Result<Self> {
        if !spec.is_time_homogeneous() {
            return Err(Error::Config("loss-implied quantities need a time-homogeneous loss rate".into()));
        }
        let mut levels = vec![start];
        let mut index = HashMap::new();
        index.insert(level_key(start), 0);
        let mut transitions: Vec<Vec<(usize, f64, f64)>> = Vec::new();
        let mut k = 0;
        while k < levels.len() {
            let level = levels[k];
            let mut out = Vec::new();
            for (y, w) in spec.weights(0.0, level) {
                if w == 0.0 {
                    continue;
                }
                let next = level + y;
                let key = level_key(next);
                let j = match index.get(&key) {
                    Some(&j) => j,
                    None => {
                        if levels.len() >= MAX_STATES {
                            return Err(Error::Config(format!("loss lattice exceeds {MAX_STATES} states")));
                        }
                        levels.push(next);
                        index.insert(key, levels.len() - 1);
                        levels.len() - 1
                    }
                };
                out.push((j, y, w));
            }
            transitions.push(out);
            k += 1;
        }
        Ok(Self { levels, index, transitions })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn state_of(&self, level: f64) -> Option<usize> {
        self.index.get(&level_key(level)).copied()
    }

    fn exit_rate(&self, s: usize) -> f64 {
        self.transitions[s].iter().map(|t| t.2).sum()
    }

    /// Applies `exp(G_x τ)` to `v`, where `G_x` is the generator killed on
    /// crossing `x`. Entries of crossed states are ignored and left at zero.
    fn propagate(&self, x: f64, tau: f64, v: &mut [f64]) {
        let alive: Vec<bool> = self.levels.iter().map(|&l| !crossed(l, x)).collect();
        let lam = (0..self.len()).filter(|&s| alive[s]).map(|s| self.exit_rate(s)).fold(0.0, f64::max);
        if lam == 0.0 || tau == 0.0 {
            return;
        }
        // keep Λτ per chunk moderate so e^{-Λτ} never underflows
        let chunks = (lam * tau / 8.0).ceil().max(1.0) as usize;
        let dt = tau / chunks as f64;
        let a = lam * dt;
        let mut term = vec![0.0; v.len()];
        let mut next = vec![0.0; v.len()];
        let mut acc = vec![0.0; v.len()];
        for _ in 0..chunks {
            let mut weight = (-a).exp();
            term.copy_from_slice(v);
            for s in 0..v.len() {
                acc[s] = if alive[s] { weight * term[s] } else { 0.0 };
            }
            let mut k = 0usize;
            while k < 10_000 && (k as f64 <= a || weight > 1e-18) {
                k += 1;
                // term <- P term with P = I + G/Λ
                for s in 0..v.len() {
                    if !alive[s] {
                        next[s] = 0.0;
                        continue;
                    }
                    let mut val = (1.0 - self.exit_rate(s) / lam) * term[s];
                    for &(j, _, w) in &self.transitions[s] {
                        if alive[j] {
                            val += w / lam * term[j];
                        }
                    }
                    next[s] = val;
                }
                std::mem::swap(&mut term, &mut next);
                weight *= a / k as f64;
                for s in 0..v.len() {
                    acc[s] += weight * term[s];
                }
            }
            v.copy_from_slice(&acc);
        }
    }

    /// Q(τ, x, ℓ) for a lattice level ℓ.
    pub fn survival(&self, tau: f64, x: f64, level: f64) -> Result<f64> {
        if tau < 0.0 {
            return Err(Error::Domain(format!("negative horizon {tau}")));
        }
        let s = self.state_of(level).ok_or_else(|| Error::Domain(format!("level {level} not reachable on the loss lattice")))?;
        if crossed(level, x) {
            return Ok(0.0);
        }
        let mut v: Vec<f64> = self.levels.iter().map(|&l| if crossed(l, x) { 0.0 } else { 1.0 }).collect();
        self.propagate(x, tau, &mut v);
        Ok(v[s])
    }

    /// `log Q(k h, x, ℓ)` for every alive state and `k = 0..=k_max`.
    pub fn log_survival_table(&self, x: f64, h: f64, k_max: usize) -> Result<LogSurvivalTable> {
        let n = self.len();
        let alive: Vec<bool> = self.levels.iter().map(|&l| !crossed(l, x)).collect();
        let mut values = vec![f64::NEG_INFINITY; n * (k_max + 1)];
        let mut v: Vec<f64> = alive.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
        for k in 0..=k_max {
            if k > 0 {
                self.propagate(x, h, &mut v);
            }
            for s in 0..n {
                if alive[s] {
                    if !(v[s] > 0.0) {
                        return Err(Error::Domain(format!("survival probability underflow at level {} tau {}", self.levels[s], k as f64 * h)));
                    }
                    values[s * (k_max + 1) + k] = v[s].ln();
                }
            }
        }
        Ok(LogSurvivalTable { x, h, k_max, alive, values })
    }

    /// Marks available in state `s` that keep the loss at or below `x`.
    pub fn surviving_jumps(&self, s: usize, x: f64) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let level = self.levels[s];
        self.transitions[s].iter().copied().filter(move |&(_, y, _)| !crosses(level, y, x))
    }
}

/// Tabulated `log Q(k h, x, ℓ)` for one barrier.
#[derive(Debug, Clone)]
pub struct LogSurvivalTable {
    pub x: f64,
    pub h: f64,
    pub k_max: usize,
    alive: Vec<bool>,
    values: Vec<f64>,
}

impl LogSurvivalTable {
    pub fn is_alive(&self, state: usize) -> bool {
        self.alive[state]
    }

    pub fn log_q(&self, state: usize, k: usize) -> f64 {
        self.values[state * (self.k_max + 1) + k]
    }

    /// Average spread `-∂_τ log Q` over `[k h, (k+1) h]`.
    pub fn cell_spread(&self, state: usize, k: usize) -> f64 {
        (self.log_q(state, k) - self.log_q(state, k + 1)) / self.h
    }
}
