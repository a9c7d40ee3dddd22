//! Attention over a projected feature set: single-head additive scoring or
//! multi-head scaled dot-product, behind one interface.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Additive,
    DotProduct,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(AttentionKind::Additive),
            "dot_product" | "dot-product" | "dot" => Ok(AttentionKind::DotProduct),
            other => Err(Error::config(format!("unknown attention kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub heads: usize,
    pub query_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::config("attention needs at least one head"));
        }
        match self.kind {
            AttentionKind::Additive => {
                if self.heads != 1 {
                    return Err(Error::config(format!(
                        "additive attention is single-head, got {} heads",
                        self.heads
                    )));
                }
                if self.value_dim != self.key_dim {
                    return Err(Error::config(
                        "additive attention returns feature vectors, so value_dim must equal key_dim",
                    ));
                }
            }
            AttentionKind::DotProduct => {
                if self.value_dim % self.heads != 0 {
                    return Err(Error::config(format!(
                        "value_dim {} is not divisible by {} heads",
                        self.value_dim, self.heads
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.value_dim / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
enum Weights {
    Additive {
        query: ParamId,
        key: ParamId,
        score: ParamId,
    },
    DotProduct {
        query: ParamId,
        key: ParamId,
        value: ParamId,
        output: ParamId,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub cfg: AttentionConfig,
    weights: Weights,
}

/// Per-image projections, computed once and reused by every query.
#[derive(Clone, Debug)]
pub struct PreparedFeatures {
    k: usize,
    keys: Vec<Var>,
    values: Vec<Var>,
}

impl PreparedFeatures {
    pub fn regions(&self) -> usize {
        self.k
    }
}

#[derive(Clone, Debug)]
pub struct Attended {
    /// Output vector of length `value_dim`.
    pub vector: Var,
    /// Softmax weights over the `k` regions, one node per head.
    pub weights: Vec<Var>,
}

impl Attended {
    /// Weights as a `heads × k` matrix.
    pub fn weight_matrix(&self, tape: &Tape) -> Tensor {
        let rows: Vec<Vec<f64>> = self
            .weights
            .iter()
            .map(|w| tape.value(*w).data().to_vec())
            .collect();
        Tensor::from_rows(&rows).expect("equal rows")
    }
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        range: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut mat = |suffix: &str, r: usize, c: usize, rng: &mut R| {
            store.add(
                format!("{name}.{suffix}"),
                Tensor::uniform(&[r, c], range, rng),
            )
        };
        let weights = match cfg.kind {
            AttentionKind::Additive => {
                // Scoring hidden width equals query_dim.
                let hidden = cfg.query_dim;
                Weights::Additive {
                    query: mat("query", cfg.query_dim, hidden, rng),
                    key: mat("key", cfg.key_dim, hidden, rng),
                    score: mat("score", hidden, 1, rng),
                }
            }
            AttentionKind::DotProduct => Weights::DotProduct {
                query: mat("query", cfg.query_dim, cfg.value_dim, rng),
                key: mat("key", cfg.key_dim, cfg.value_dim, rng),
                value: mat("value", cfg.key_dim, cfg.value_dim, rng),
                output: mat("output", cfg.value_dim, cfg.value_dim, rng),
            },
        };
        Ok(Attention { cfg, weights })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self.weights {
            Weights::Additive { query, key, score } => vec![query, key, score],
            Weights::DotProduct {
                query,
                key,
                value,
                output,
            } => vec![query, key, value, output],
        }
    }

    /// Sets the multi-head output projection to the identity.
    pub fn set_output_identity(&self, store: &mut ParamStore) {
        if let Weights::DotProduct { output, .. } = self.weights {
            *store.get_mut(output) = Tensor::identity(self.cfg.value_dim);
        }
    }

    /// Projects a `k × key_dim` feature matrix into keys and values.
    pub fn prepare(&self, tape: &mut Tape, p: &Bound, features: Var) -> Result<PreparedFeatures> {
        let shape = tape.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.key_dim {
            return Err(Error::dim("attend", &shape, &[0, self.cfg.key_dim]));
        }
        let k = shape[0];
        if k == 0 {
            return Err(Error::domain("attend", "empty feature set"));
        }
        match self.weights {
            Weights::Additive { key, .. } => {
                let keys = tape.matmul(features, p.var(key))?;
                Ok(PreparedFeatures {
                    k,
                    keys: vec![keys],
                    values: vec![features],
                })
            }
            Weights::DotProduct { key, value, .. } => {
                let keys = tape.matmul(features, p.var(key))?;
                let values = tape.matmul(features, p.var(value))?;
                let dh = self.cfg.head_dim();
                let mut kh = Vec::with_capacity(self.cfg.heads);
                let mut vh = Vec::with_capacity(self.cfg.heads);
                for h in 0..self.cfg.heads {
                    kh.push(tape.slice_cols(keys, h * dh, dh)?);
                    vh.push(tape.slice_cols(values, h * dh, dh)?);
                }
                Ok(PreparedFeatures {
                    k,
                    keys: kh,
                    values: vh,
                })
            }
        }
    }

    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        feats: &PreparedFeatures,
        query: Var,
    ) -> Result<Attended> {
        if tape.shape(query) != [self.cfg.query_dim] {
            return Err(Error::dim("attend", tape.shape(query), &[self.cfg.query_dim]));
        }
        match self.weights {
            Weights::Additive {
                query: wq, score, ..
            } => {
                let qp = tape.matmul(query, p.var(wq))?;
                let hidden = tape.add_row(feats.keys[0], qp)?;
                let hidden = tape.tanh(hidden);
                let scores = tape.matmul(hidden, p.var(score))?;
                let scores = tape.reshape(scores, &[feats.k])?;
                let alpha = tape.softmax(scores)?;
                let vector = tape.matmul(alpha, feats.values[0])?;
                Ok(Attended {
                    vector,
                    weights: vec![alpha],
                })
            }
            Weights::DotProduct {
                query: wq, output, ..
            } => {
                let dh = self.cfg.head_dim();
                let scale = 1.0 / (dh as f64).sqrt();
                let q = tape.matmul(query, p.var(wq))?;
                let mut heads = Vec::with_capacity(self.cfg.heads);
                let mut weights = Vec::with_capacity(self.cfg.heads);
                for h in 0..self.cfg.heads {
                    let qh = tape.slice(q, h * dh, dh)?;
                    let scores = tape.matmul(feats.keys[h], qh)?;
                    let scores = tape.affine(scores, scale, 0.0);
                    let alpha = tape.softmax(scores)?;
                    heads.push(tape.matmul(alpha, feats.values[h])?);
                    weights.push(alpha);
                }
                let joined = tape.concat(&heads)?;
                let vector = tape.matmul(joined, p.var(output))?;
                Ok(Attended { vector, weights })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check, GradCheck};
    use crate::nn::INIT_RANGE;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kind: AttentionKind, heads: usize, d: usize) -> AttentionConfig {
        AttentionConfig {
            kind,
            heads,
            query_dim: d,
            key_dim: d,
            value_dim: d,
        }
    }

    fn build(c: AttentionConfig, seed: u64) -> (ParamStore, Attention) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = Attention::new(&mut store, "att", c, INIT_RANGE, &mut rng).unwrap();
        (store, att)
    }

    fn run(
        store: &ParamStore,
        att: &Attention,
        feats: &Tensor,
        query: &Tensor,
    ) -> (Tensor, Tensor) {
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let a = t.leaf(feats.clone());
        let q = t.leaf(query.clone());
        let prep = att.prepare(&mut t, &p, a).unwrap();
        let out = att.attend(&mut t, &p, &prep, q).unwrap();
        (t.value(out.vector).clone(), out.weight_matrix(&t))
    }

    #[test]
    fn config_invariants() {
        assert!(cfg(AttentionKind::Additive, 2, 4).validate().is_err());
        assert!(cfg(AttentionKind::DotProduct, 3, 4).validate().is_err());
        for h in [1, 2, 4, 8, 16] {
            assert!(cfg(AttentionKind::DotProduct, h, 16).validate().is_ok());
        }
    }

    #[test]
    fn zero_additive_scores_give_the_mean() {
        let (mut store, att) = build(cfg(AttentionKind::Additive, 1, 3), 1);
        let Weights::Additive { score, .. } = att.weights else { unreachable!() };
        store.get_mut(score).data_mut().fill(0.0);
        let feats = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![-1.0, 0.0, 5.0],
            vec![0.5, 0.5, 0.5],
            vec![2.0, -3.0, 1.0],
        ])
        .unwrap();
        let (out, w) = run(&store, &att, &feats, &Tensor::vector(vec![0.3, -0.2, 0.9]));
        assert!(w.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        for j in 0..3 {
            let mean: f64 = (0..4).map(|r| feats.at(r, j)).sum::<f64>() / 4.0;
            assert!((out.data()[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn single_region_is_forced() {
        for c in [
            cfg(AttentionKind::Additive, 1, 4),
            cfg(AttentionKind::DotProduct, 2, 4),
        ] {
            let (store, att) = build(c, 2);
            let feats = Tensor::from_rows(&[vec![0.1, -0.4, 0.8, 0.3]]).unwrap();
            let (a, w) = run(&store, &att, &feats, &Tensor::vector(vec![1.0, 0.0, 0.0, 2.0]));
            let (b, _) = run(&store, &att, &feats, &Tensor::vector(vec![-3.0, 1.0, 0.5, 0.0]));
            assert!(w.data().iter().all(|&x| x == 1.0));
            assert!(a.max_abs_diff(&b) < 1e-15);
        }
    }

    #[test]
    fn rejects_empty_feature_set() {
        let (store, att) = build(cfg(AttentionKind::Additive, 1, 3), 3);
        let mut t = Tape::new();
        let p = store.bind(&mut t);
        let a = t.leaf(Tensor::zeros(&[0, 3]));
        assert!(matches!(att.prepare(&mut t, &p, a), Err(Error::Domain { .. })));
    }

    /// Independent per-head evaluation in plain loops.
    fn brute_force_dot(
        q: &[f64],
        feats: &Tensor,
        wq: &Tensor,
        wk: &Tensor,
        wv: &Tensor,
        wo: &Tensor,
        heads: usize,
    ) -> Vec<f64> {
        let d = wq.cols();
        let dh = d / heads;
        let k = feats.rows();
        let proj = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..w.cols())
                .map(|j| (0..x.len()).map(|i| x[i] * w.at(i, j)).sum())
                .collect()
        };
        let qq = proj(q, wq);
        let keys: Vec<Vec<f64>> = (0..k).map(|r| proj(feats.row(r), wk)).collect();
        let vals: Vec<Vec<f64>> = (0..k).map(|r| proj(feats.row(r), wv)).collect();
        let mut concat = vec![0.0; d];
        for h in 0..heads {
            let s: Vec<f64> = (0..k)
                .map(|r| (0..dh).map(|j| qq[h * dh + j] * keys[r][h * dh + j]).sum::<f64>()
                    / (dh as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..dh {
                concat[h * dh + j] = (0..k).map(|r| e[r] / z * vals[r][h * dh + j]).sum();
            }
        }
        proj(&concat, wo)
    }

    #[test]
    fn dot_product_matches_brute_force() {
        let (mut store, att) = build(cfg(AttentionKind::DotProduct, 2, 4), 4);
        let Weights::DotProduct { query, key, value, output } = att.weights else {
            unreachable!()
        };
        // Hand-set projections.
        *store.get_mut(query) = Tensor::identity(4);
        *store.get_mut(key) = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.5, 0.0],
            vec![0.0, 2.0, 0.0, -1.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.5, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        *store.get_mut(value) = Tensor::identity(4);
        *store.get_mut(output) = Tensor::identity(4);
        let feats = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0.0, 1.0, 1.0, 0.0],
            vec![0.5, -0.5, 2.0, 1.0],
        ])
        .unwrap();
        let q = [0.3, 1.0, -0.7, 0.2];
        let (out, w) = run(&store, &att, &feats, &Tensor::vector(q.to_vec()));
        let want = brute_force_dot(
            &q,
            &feats,
            store.get(query),
            store.get(key),
            store.get(value),
            store.get(output),
            2,
        );
        assert_eq!(w.shape(), &[2, 3]);
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }

        // Random projections too.
        let (store, att) = build(cfg(AttentionKind::DotProduct, 2, 4), 5);
        let (out, _) = run(&store, &att, &feats, &Tensor::vector(q.to_vec()));
        let ids = att.param_ids();
        let want = brute_force_dot(
            &q,
            &feats,
            store.get(ids[0]),
            store.get(ids[1]),
            store.get(ids[2]),
            store.get(ids[3]),
            2,
        );
        for (a, b) in out.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_through_both_kinds() {
        for c in [
            cfg(AttentionKind::Additive, 1, 3),
            cfg(AttentionKind::DotProduct, 3, 6),
        ] {
            let (store, att) = build(c, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut inputs: Vec<Tensor> = store
                .tensors()
                .iter()
                .map(|t| Tensor::uniform(t.shape(), 1.0, &mut rng))
                .collect();
            inputs.push(Tensor::uniform(&[4, c.key_dim], 1.0, &mut rng));
            inputs.push(Tensor::uniform(&[c.query_dim], 1.0, &mut rng));
            let n = store.len();
            let report = check(&inputs, GradCheck::default(), |t, v| {
                let p = Bound::from_vars(v[..n].to_vec());
                let prep = att.prepare(t, &p, v[n])?;
                let out = att.attend(t, &p, &prep, v[n + 1])?;
                let sq = t.mul(out.vector, out.vector)?;
                Ok(t.sum(sq))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{c:?} {report:?}");
        }
    }

    proptest! {
        #[test]
        fn weights_normalized_and_permutation_equivariant(
            seed in 0u64..500,
            heads_pow in 0u32..3,
            additive in any::<bool>(),
            k in 1usize..7,
        ) {
            let heads = if additive { 1 } else { 1 << heads_pow };
            let kind = if additive { AttentionKind::Additive } else { AttentionKind::DotProduct };
            let (mut store, att) = build(cfg(kind, heads, 8), seed);
            att.set_output_identity(&mut store);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let feats = Tensor::uniform(&[k, 8], 2.0, &mut rng);
            let q = Tensor::uniform(&[8], 2.0, &mut rng);
            let (out, w) = run(&store, &att, &feats, &q);
            for h in 0..heads {
                let row = w.row(h);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }

            // Reverse the regions.
            let rev: Vec<Vec<f64>> = (0..k).rev().map(|r| feats.row(r).to_vec()).collect();
            let rev = Tensor::from_rows(&rev).unwrap();
            let (out2, w2) = run(&store, &att, &rev, &q);
            prop_assert!(out.max_abs_diff(&out2) < 1e-12);
            for h in 0..heads {
                for r in 0..k {
                    prop_assert!((w.at(h, r) - w2.at(h, k - 1 - r)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn output_in_convex_hull_per_head(seed in 0u64..300, k in 1usize..6) {
            let (mut store, att) = build(cfg(AttentionKind::DotProduct, 2, 4), seed);
            att.set_output_identity(&mut store);
            let ids = att.param_ids();
            *store.get_mut(ids[2]) = Tensor::identity(4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let feats = Tensor::uniform(&[k, 4], 3.0, &mut rng);
            let q = Tensor::uniform(&[4], 1.0, &mut rng);
            let (out, _) = run(&store, &att, &feats, &q);
            for j in 0..4 {
                let lo = (0..k).map(|r| feats.at(r, j)).fold(f64::INFINITY, f64::min);
                let hi = (0..k).map(|r| feats.at(r, j)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out.data()[j] >= lo - 1e-12 && out.data()[j] <= hi + 1e-12);
            }
        }
    }
}
