//! Synthetic region-captioning task.
//!
//! An image is `k` region vectors. Some of them form 2 or 3 *groups*, each a
//! chain of 1, 2 or 3 regions; the rest are distractors. Every region has a
//! class in `0..C`, a distinct address and possibly a pointer to another
//! address. Only the first region of a group carries its group mark; the
//! second and third members are reachable only by following pointers, so
//! reading a group of `n` regions takes `n` glances and each glance's query
//! depends on what the previous one read.
//!
//! The caption names the groups in order:
//!
//! ```text
//! a content_1 and content_2 [with content_3] <eos>
//! ```
//!
//! `content` is `obj_{c₀}` for a single region, `pair_{c₀}_{c₁}` for a pair
//! and `triple_{c₀ mod 2}{c₁ mod 2}{c₂ mod 2}` for a triple, where `cᵣ`
//! is the class of the `r`-th region along the chain. Separators and the end
//! token follow from the group count, which the mean-pooled feature vector
//! encodes, so they need no attention.
//!
//! With `C` classes the vocabulary has `15 + C + C²` tokens: 4 special
//! tokens, 3 separators, `C` object words, `C²` pair words and 8 triple words.
//!
//! Region vector layout, `C + 3 + 2k` structured dimensions followed by noise:
//!
//! ```text
//! [ class one-hot (C) | group mark (3) | address one-hot (k) | pointer one-hot (k) | noise ... ]
//! ```
//!
//! Distractors point at random addresses, so a pointer alone does not tell
//! group members apart from clutter.

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::tensor::Tensor;
use crate::vocab::{Vocab, EOS};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SEPARATORS: [&str; 3] = ["a", "and", "with"];
const MAX_GROUPS: usize = 3;
const FIRST_WORD: usize = 4 + SEPARATORS.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Regions per image.
    pub k: usize,
    pub d_a: usize,
    /// Upper bound on the vocabulary size; the task uses `15 + C + C²`
    /// tokens for the largest `C` that fits.
    pub vocab_size: usize,
    /// Caption length limit in words, without the end token.
    pub max_len: usize,
    /// Sampling rates of single, pair and triple groups.
    pub kind_rates: [f64; 3],
    /// Amplitude of the uniform noise dimensions.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k: 8,
            d_a: 32,
            vocab_size: 40,
            max_len: 12,
            kind_rates: [0.4, 0.4, 0.2],
            noise: 0.5,
        }
    }
}

impl SynthConfig {
    /// Largest `C` with `15 + C + C²` tokens within `vocab_size`.
    pub fn classes(&self) -> usize {
        let budget = self.vocab_size.saturating_sub(FIRST_WORD + 8);
        (0..).take_while(|c| c + c * c <= budget).last().unwrap_or(0)
    }

    /// Structured dimensions before the noise.
    pub fn layout_dims(&self) -> usize {
        self.classes() + MAX_GROUPS + 2 * self.k
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        if c < 2 {
            return Err(Error::config(format!(
                "vocab_size {} leaves fewer than 2 region classes (need at least {})",
                self.vocab_size,
                FIRST_WORD + 8 + 6
            )));
        }
        if self.k < 2 {
            return Err(Error::config("k must be at least 2 to hold two groups"));
        }
        if self.d_a < self.layout_dims() {
            return Err(Error::config(format!(
                "d_a {} cannot encode {c} classes and {} regions; need at least {}",
                self.d_a,
                self.k,
                self.layout_dims()
            )));
        }
        if self.max_len < 4 {
            return Err(Error::config("max_len must be at least 4 words"));
        }
        let r = self.kind_rates;
        if r.iter().any(|x| !(*x >= 0.0)) || r.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("kind rates must be nonnegative with a positive sum"));
        }
        let smallest = r.iter().position(|x| *x > 0.0).unwrap_or(0) + 1;
        if 2 * smallest > self.k {
            return Err(Error::config(format!(
                "k {} cannot hold two groups of at least {smallest} regions",
                self.k
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be nonnegative"));
        }
        Ok(())
    }

    /// Largest group count that fits the caption length limit.
    fn max_groups(&self) -> usize {
        (self.max_len / 2).min(MAX_GROUPS)
    }

    pub fn vocab(&self) -> Result<Vocab> {
        self.validate()?;
        let c = self.classes();
        let words = SEPARATORS
            .iter()
            .map(|s| s.to_string())
            .chain((0..c).map(|i| format!("obj_{i}")))
            .chain((0..c * c).map(|i| format!("pair_{}_{}", i / c, i % c)))
            .chain((0..8).map(|i| format!("triple_{}{}{}", i >> 2, (i >> 1) & 1, i & 1)));
        Vocab::with_words(words)
    }

    fn content_id(&self, classes: &[usize]) -> usize {
        let c = self.classes();
        match classes {
            [c0] => FIRST_WORD + c0,
            [c0, c1] => FIRST_WORD + c + c * c0 + c1,
            [c0, c1, c2] => FIRST_WORD + c + c * c + 4 * (c0 % 2) + 2 * (c1 % 2) + c2 % 2,
            _ => unreachable!("groups hold 1 to 3 regions"),
        }
    }

    /// Long-run fraction of caption tokens (including the end token) reading
    /// 0, 1 and more than 1 regions, by exact enumeration of the sampler.
    pub fn expected_class_rates(&self) -> [f64; 3] {
        let total: f64 = self.kind_rates.iter().sum();
        let rates: Vec<f64> = self.kind_rates.iter().map(|r| r / total).collect();
        let g_choices: Vec<usize> = (2..=self.max_groups()).collect();
        let mut mass = 0.0;
        let mut counts = [0.0; 3];
        for &g in &g_choices {
            let pg = 1.0 / g_choices.len() as f64;
            for code in 0..3usize.pow(g as u32) {
                let mut sizes = Vec::with_capacity(g);
                let mut x = code;
                let mut prob = pg;
                for _ in 0..g {
                    sizes.push(x % 3 + 1);
                    prob *= rates[x % 3];
                    x /= 3;
                }
                if sizes.iter().sum::<usize>() > self.k || prob == 0.0 {
                    continue;
                }
                mass += prob;
                counts[0] += prob * (g + 1) as f64;
                for n in sizes {
                    counts[n.min(2)] += prob;
                }
            }
        }
        let tokens: f64 = counts.iter().sum::<f64>() / mass;
        counts.map(|c| c / mass / tokens)
    }
}

/// One generated image with its caption.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthInstance {
    pub features: FeatureSet,
    /// Token ids, ending with EOS.
    pub target: Vec<usize>,
    /// Regions each target token depends on; never shown to the model.
    pub alignment: Vec<usize>,
}

/// Draws one instance; identical seeds give identical instances.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<SynthInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_with(cfg, &mut rng)
}

/// Instance `index` of a seeded stream.
pub fn generate_indexed(cfg: &SynthConfig, seed: u64, index: u64) -> Result<SynthInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    generate_with(cfg, &mut rng)
}

/// Group size in regions.
fn draw_size(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = cfg.kind_rates.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, r) in cfg.kind_rates.iter().enumerate() {
        if u < *r {
            return i + 1;
        }
        u -= r;
    }
    cfg.kind_rates.iter().rposition(|r| *r > 0.0).unwrap_or(0) + 1
}

fn generate_with(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthInstance> {
    cfg.validate()?;
    let (c, k) = (cfg.classes(), cfg.k);
    let sizes = loop {
        let g = rng.gen_range(2..=cfg.max_groups());
        let sizes: Vec<usize> = (0..g).map(|_| draw_size(cfg, rng)).collect();
        if sizes.iter().sum::<usize>() <= k {
            break sizes;
        }
    };

    // Chains occupy consecutive slots; rows are shuffled at the end.
    let mut addr: Vec<usize> = (0..k).collect();
    addr.shuffle(rng);
    let class: Vec<usize> = (0..k).map(|_| rng.gen_range(0..c)).collect();
    let mut mark = vec![None; k];
    let mut pointer = vec![None; k];
    let mut target = Vec::with_capacity(2 * sizes.len() + 1);
    let mut alignment = Vec::with_capacity(2 * sizes.len() + 1);
    let mut next = 0;
    for (g, &n) in sizes.iter().enumerate() {
        let members = next..next + n;
        next += n;
        mark[members.start] = Some(g);
        for m in members.start..members.end - 1 {
            pointer[m] = Some(addr[m + 1]);
        }
        target.push(4 + g);
        alignment.push(0);
        target.push(cfg.content_id(&class[members]));
        alignment.push(n);
    }
    for p in &mut pointer[next..] {
        *p = Some(rng.gen_range(0..k));
    }
    target.push(EOS);
    alignment.push(0);

    let mut rows: Vec<Vec<f64>> = (0..k)
        .map(|r| {
            let mut v = vec![0.0; cfg.d_a];
            v[class[r]] = 1.0;
            if let Some(g) = mark[r] {
                v[c + g] = 1.0;
            }
            v[c + MAX_GROUPS + addr[r]] = 1.0;
            if let Some(p) = pointer[r] {
                v[c + MAX_GROUPS + k + p] = 1.0;
            }
            for x in &mut v[cfg.layout_dims()..] {
                *x = rng.gen_range(-1.0..=1.0) * cfg.noise;
            }
            v
        })
        .collect();
    rows.shuffle(rng);
    Ok(SynthInstance {
        features: FeatureSet::new(Tensor::from_rows(&rows)?)?,
        target,
        alignment,
    })
}

/// Recomputes the caption of a generated feature set from its region
/// vectors alone, in any row order.
pub fn label(cfg: &SynthConfig, features: &FeatureSet) -> Result<Vec<usize>> {
    cfg.validate()?;
    let (c, k) = (cfg.classes(), cfg.k);
    if features.k() != k || features.dim() != cfg.d_a {
        return Err(Error::config("feature set does not match the task shape"));
    }
    let rows: Vec<&[f64]> = (0..k).map(|r| features.vectors().row(r)).collect();
    let hot = |row: &[f64], lo: usize, n: usize| (0..n).find(|&i| row[lo + i] == 1.0);
    let class = |r: usize| hot(rows[r], 0, c).ok_or_else(|| Error::config("region without class"));
    let by_addr = |a: usize| {
        rows.iter()
            .position(|row| hot(row, c + MAX_GROUPS, k) == Some(a))
            .ok_or_else(|| Error::config(format!("no region with address {a}")))
    };
    let mut target = Vec::new();
    for g in 0..MAX_GROUPS {
        let Some(mut r) = rows.iter().position(|row| hot(row, c, MAX_GROUPS) == Some(g)) else {
            break;
        };
        let mut classes = vec![class(r)?];
        while classes.len() < 3 {
            let Some(p) = hot(rows[r], c + MAX_GROUPS + k, k) else { break };
            r = by_addr(p)?;
            classes.push(class(r)?);
        }
        target.push(4 + g);
        target.push(cfg.content_id(&classes));
    }
    target.push(EOS);
    Ok(target)
}
