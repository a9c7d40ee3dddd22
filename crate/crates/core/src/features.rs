//! Region feature sets and their binary file format.
//!
//! A feature file is the magic `AATF1`, then `k` and `d_a` as little-endian
//! `u32`, then `k·d_a` little-endian `f64` values in row-major order.

use crate::archive::Reader;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const FEATURE_MAGIC: &[u8; 5] = b"AATF1";

/// `k × d_a` region features of one image together with their mean pool.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    vectors: Tensor,
    mean: Vec<f64>,
}

impl FeatureSet {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 {
            return Err(Error::dim("feature_set", vectors.shape(), &[0, 0]));
        }
        let (k, d) = (vectors.rows(), vectors.cols());
        if k == 0 {
            return Err(Error::domain("feature_set", "needs at least one region"));
        }
        if !vectors.is_finite() {
            return Err(Error::domain("feature_set", "non-finite feature value"));
        }
        let mut mean = vec![0.0; d];
        for r in 0..k {
            for (m, v) in mean.iter_mut().zip(vectors.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        Ok(FeatureSet { vectors, mean })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        FeatureSet::new(Tensor::from_rows(rows)?)
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * self.vectors.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for v in self.vectors.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(FEATURE_MAGIC.len())? != FEATURE_MAGIC {
            r.pos = 0;
            return r.fail("bad feature-file magic");
        }
        let k = r.u32()? as usize;
        if k == 0 {
            r.pos -= 4;
            return r.fail("region count k is zero");
        }
        let d = r.u32()? as usize;
        if d == 0 {
            r.pos -= 4;
            return r.fail("feature dimension is zero");
        }
        let n = k
            .checked_mul(d)
            .filter(|n| n.checked_mul(8).is_some())
            .map_or_else(|| r.fail("shape overflows"), Ok)?;
        if r.remaining() != n * 8 {
            return r.fail(format!(
                "expected {} bytes of data for {k}x{d}, found {}",
                n * 8,
                r.remaining()
            ));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.pos;
            let v = r.f64()?;
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: at,
                    msg: "non-finite feature value".into(),
                });
            }
            data.push(v);
        }
        FeatureSet::new(Tensor::matrix(k, d, data)?)
    }
}

pub fn load_features(path: &Path) -> Result<FeatureSet> {
    FeatureSet::from_bytes(&std::fs::read(path)?)
}

pub fn save_features(path: &Path, set: &FeatureSet) -> Result<()> {
    std::fs::write(path, set.to_bytes())?;
    Ok(())
}
