//! Evaluation metrics: cross-entropy, corpus BLEU and attention-step statistics.

use crate::error::{Error, Result};
use crate::trace::StepTrace;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::hash::Hash;

/// `−ln(max(dist[target], 1e-12))`.
pub fn cross_entropy(dist: &[f64], target: usize) -> Result<f64> {
    let p = *dist.get(target).ok_or(Error::Lookup {
        index: target,
        len: dist.len(),
    })?;
    Ok(-p.max(crate::decoder::PROB_FLOOR).ln())
}

/// Corpus-level BLEU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    /// `scores[n − 1]` is BLEU-n: brevity penalty times the geometric mean of
    /// the clipped precisions of orders `1..=n`.
    pub scores: Vec<f64>,
    /// Clipped n-gram precision per order.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n == 0 || seq.len() < n {
        return m;
    }
    for w in seq.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Corpus BLEU of `hypotheses` against one or more references each, without
/// smoothing.
pub fn bleu<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    n_max: usize,
) -> Result<Bleu> {
    if hypotheses.is_empty() {
        return Err(Error::Metric("empty hypothesis set".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} hypotheses for {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    if n_max == 0 {
        return Err(Error::Metric("n_max must be at least 1".into()));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Metric("hypothesis without references".into()));
    }
    let mut matched = vec![0usize; n_max];
    let mut total = vec![0usize; n_max];
    let (mut c, mut r) = (0usize, 0usize);
    for (hyp, refs) in hypotheses.iter().zip(references) {
        c += hyp.len();
        r += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .expect("nonempty references");
        for n in 1..=n_max {
            let counts = ngram_counts(hyp, n);
            let mut max_ref: HashMap<&[T], usize> = HashMap::new();
            for rf in refs {
                for (g, k) in ngram_counts(rf, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &counts {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let precisions: Vec<f64> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut scores = Vec::with_capacity(n_max);
    let mut log_sum = 0.0;
    let mut zero = false;
    for (i, &p) in precisions.iter().enumerate() {
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
        let n = (i + 1) as f64;
        scores.push(if zero {
            0.0
        } else {
            brevity_penalty * (log_sum / n).exp()
        });
    }
    Ok(Bleu {
        scores,
        precisions,
        brevity_penalty,
        hypothesis_length: c,
        reference_length: r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Order statistics and mean of `N(t)` over every decoding step of every trace.
pub fn attention_stats<'a, I>(traces: I) -> Result<AttentionStats>
where
    I: IntoIterator<Item = &'a [StepTrace]>,
{
    let (mut min, mut max, mut sum, mut count) = (usize::MAX, 0usize, 0usize, 0usize);
    for trace in traces {
        for s in trace {
            min = min.min(s.n_t);
            max = max.max(s.n_t);
            sum += s.n_t;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Metric("no decoding steps to summarize".into()));
    }
    Ok(AttentionStats {
        min,
        max,
        mean: sum as f64 / count as f64,
    })
}

/// Evaluation summary printed by `aat eval`, one JSON object with fixed keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub instances: usize,
    pub tokens: usize,
    /// Mean per-token cross-entropy plus time cost under teacher forcing.
    pub loss: f64,
    pub cross_entropy: f64,
    pub ponder: f64,
    /// Teacher-forced token accuracy.
    pub accuracy: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    /// Attention steps per decoding step under teacher forcing.
    pub steps_min: usize,
    pub steps_max: usize,
    pub steps_mean: f64,
}
