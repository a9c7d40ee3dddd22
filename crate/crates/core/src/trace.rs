//! Per-step halting records and their line-delimited JSON dump.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// Halting record of one decoding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub t: usize,
    pub token: usize,
    #[serde(rename = "N_t")]
    pub n_t: usize,
    /// Confidences `p_0..p_N`; empty outside adaptive mode.
    pub p: Vec<f64>,
    pub beta_raw: Vec<f64>,
    pub beta_norm: Vec<f64>,
    pub ponder_term: f64,
}

impl StepTrace {
    /// Record for a fixed number of attention steps: all weight on the last.
    pub fn fixed(steps: usize) -> Self {
        let mut beta = vec![0.0; steps + 1];
        beta[steps] = 1.0;
        StepTrace {
            t: 0,
            token: 0,
            n_t: steps,
            p: Vec::new(),
            beta_raw: beta.clone(),
            beta_norm: beta,
            ponder_term: 0.0,
        }
    }
}

pub type HaltingTrace = Vec<StepTrace>;

/// One line of a trace dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub instance: usize,
    #[serde(flatten)]
    pub step: StepTrace,
}

pub fn write_trace<W: Write>(out: &mut W, instance: usize, trace: &[StepTrace]) -> Result<()> {
    for step in trace {
        let rec = TraceRecord {
            instance,
            step: step.clone(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Contract(format!("trace line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Bounds a trace is checked against.
#[derive(Clone, Copy, Debug)]
pub struct TraceBounds {
    pub m_min: usize,
    pub m_max: usize,
    pub tolerance: f64,
}

/// Checks every record: weights nonnegative and summing to one, lengths
/// consistent with `N_t`, confidences in `[0, 1]`, and `m_min ≤ N_t ≤ m_max`.
/// Returns the number of records checked.
pub fn check_trace(records: &[TraceRecord], bounds: TraceBounds) -> Result<usize> {
    for (i, r) in records.iter().enumerate() {
        let s = &r.step;
        let fail = |msg: String| {
            Err(Error::Contract(format!(
                "record {} (instance {}, t {}): {msg}",
                i + 1,
                r.instance,
                s.t
            )))
        };
        if s.n_t < bounds.m_min || s.n_t > bounds.m_max {
            return fail(format!(
                "N_t = {} outside [{}, {}]",
                s.n_t, bounds.m_min, bounds.m_max
            ));
        }
        if s.beta_norm.len() != s.n_t + 1 || s.beta_raw.len() != s.n_t + 1 {
            return fail(format!("{} weights for N_t = {}", s.beta_norm.len(), s.n_t));
        }
        if !s.p.is_empty() && s.p.len() != s.n_t + 1 {
            return fail(format!("{} confidences for N_t = {}", s.p.len(), s.n_t));
        }
        if s.p.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("confidence outside [0, 1]".into());
        }
        if s.beta_norm.iter().chain(&s.beta_raw).any(|b| !(*b >= 0.0)) {
            return fail("negative weight".into());
        }
        let sum: f64 = s.beta_norm.iter().sum();
        if (sum - 1.0).abs() > bounds.tolerance {
            return fail(format!("normalized weights sum to {sum}"));
        }
        if !s.ponder_term.is_finite() || s.ponder_term < 0.0 {
            return fail(format!("ponder term {}", s.ponder_term));
        }
    }
    Ok(records.len())
}
