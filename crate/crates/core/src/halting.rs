//! Halting kernel: how many attention steps a decoding step takes, the weight
//! each step receives, and the time-cost penalty.
//!
//! Confidences arrive one at a time because the confidence of step `n` depends
//! on the state produced by step `n`. Steps `n < m_min` have their confidence
//! forced to zero. After step `n` the accumulated remainder `∏(1 − p)` is
//! compared with ε; the loop halts at the first `n` where it drops strictly
//! below ε, or at `m_max`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingConfig {
    pub epsilon: f64,
    pub m_min: usize,
    pub m_max: usize,
}

impl HaltingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.m_max < 1 {
            return Err(Error::config("m_max must be at least 1"));
        }
        if self.m_min > self.m_max {
            return Err(Error::config(format!(
                "m_min {} exceeds m_max {}",
                self.m_min, self.m_max
            )));
        }
        Ok(())
    }
}

/// Resolved halting decision of one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct HaltOutcome {
    /// N(t): attention steps taken. Confidences and weights have `steps + 1`
    /// entries, index 0 being the no-attention state.
    pub steps: usize,
    pub p: Vec<f64>,
    pub beta_raw: Vec<f64>,
    pub beta_norm: Vec<f64>,
}

/// Incremental halting state for one decoding step.
#[derive(Clone, Debug)]
pub struct Halting {
    cfg: HaltingConfig,
    p: Vec<f64>,
    remainder: f64,
    halted: bool,
}

impl Halting {
    pub fn new(cfg: HaltingConfig) -> Self {
        Halting {
            cfg,
            p: Vec::with_capacity(cfg.m_max + 1),
            remainder: 1.0,
            halted: false,
        }
    }

    /// Index of the step whose confidence is expected next.
    pub fn next_step(&self) -> usize {
        self.p.len()
    }

    /// Whether the next confidence is forced to zero by `m_min`.
    pub fn next_is_forced(&self) -> bool {
        self.p.len() < self.cfg.m_min
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Records the confidence of the next step and returns whether to halt.
    /// Forced steps record 0 whatever value is passed.
    pub fn push(&mut self, p: f64) -> bool {
        assert!(!self.halted, "push after halt");
        let n = self.p.len();
        let p = if n < self.cfg.m_min { 0.0 } else { p };
        self.p.push(p);
        self.remainder *= 1.0 - p;
        self.halted = self.remainder < self.cfg.epsilon || n >= self.cfg.m_max;
        self.halted
    }

    pub fn confidences(&self) -> &[f64] {
        &self.p
    }

    pub fn outcome(&self) -> HaltOutcome {
        debug_assert!(self.halted);
        let beta_raw = raw_weights(&self.p);
        let beta_norm = normalize_weights(&beta_raw);
        HaltOutcome {
            steps: self.p.len() - 1,
            p: self.p.clone(),
            beta_raw,
            beta_norm,
        }
    }
}

/// `β₀ = p₀`, `βₙ = pₙ·∏_{n'<n}(1 − p_{n'})`.
pub fn raw_weights(p: &[f64]) -> Vec<f64> {
    let mut remainder = 1.0;
    p.iter()
        .map(|&pn| {
            let b = pn * remainder;
            remainder *= 1.0 - pn;
            b
        })
        .collect()
}

/// Rescales weights to sum to one. When every weight is zero (all confidences
/// exactly zero up to the cap) the last step gets all the mass.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter().map(|b| b / total).collect()
    } else {
        let mut out = vec![0.0; raw.len()];
        if let Some(last) = out.last_mut() {
            *last = 1.0;
        }
        out
    }
}

/// Runs the kernel over a scripted confidence sequence.
pub fn halt_scripted(cfg: HaltingConfig, script: &[f64]) -> Result<HaltOutcome> {
    cfg.validate()?;
    let mut h = Halting::new(cfg);
    for &p in script {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::domain("halt", format!("confidence {p} outside [0, 1]")));
        }
        if h.push(p) {
            return Ok(h.outcome());
        }
    }
    Err(Error::Contract(format!(
        "confidence script of length {} ended before halting",
        script.len()
    )))
}

/// `λ·(N + Σ_{n=0..N} (n+1)(1 − pₙ))` for one decoding step.
pub fn ponder_cost(p: &[f64], steps: usize, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::config(format!("lambda must be nonnegative, got {lambda}")));
    }
    if p.len() != steps + 1 {
        return Err(Error::Contract(format!(
            "{} confidences for {} steps",
            p.len(),
            steps
        )));
    }
    let weighted: f64 = p
        .iter()
        .enumerate()
        .map(|(n, pn)| (n + 1) as f64 * (1.0 - pn))
        .sum();
    Ok(lambda * (steps as f64 + weighted))
}
