//! Datasets of (feature set, caption) pairs and their on-disk layout.
//!
//! ```text
//! <dir>/dataset.json             metadata
//! <dir>/vocab.txt                one token per line, id = line number
//! <dir>/{train,val}/captions.txt one caption per line, words only
//! <dir>/{train,val}/alignment.txt regions per target token, analysis only
//! <dir>/{train,val}/features/NNNNN.aatf
//! ```

use crate::error::{Error, Result};
use crate::features::{load_features, save_features, FeatureSet};
use crate::synth::{generate_indexed, SynthConfig};
use crate::vocab::Vocab;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Stream offset separating validation instances from training instances.
const VAL_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: FeatureSet,
    /// Token ids ending with EOS.
    pub target: Vec<usize>,
    /// Regions each target token depends on; may be empty when unknown.
    pub alignment: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: Option<u64>,
    pub synth: Option<SynthConfig>,
    pub n_train: usize,
    pub n_val: usize,
    pub k: usize,
    pub d_a: usize,
    /// Caption word limit used when reading captions.
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

fn synth_split(cfg: &SynthConfig, seed: u64, n: usize, offset: u64) -> Result<Vec<Example>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let inst = generate_indexed(cfg, seed, offset + i)?;
            Ok(Example {
                features: inst.features,
                target: inst.target,
                alignment: inst.alignment,
            })
        })
        .collect()
}

impl Dataset {
    /// Deterministic synthetic dataset.
    pub fn synthetic(cfg: &SynthConfig, seed: u64, n_train: usize, n_val: usize) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::config("n_train must be at least 1"));
        }
        let vocab = cfg.vocab()?;
        Ok(Dataset {
            meta: DatasetMeta {
                seed: Some(seed),
                synth: Some(cfg.clone()),
                n_train,
                n_val,
                k: cfg.k,
                d_a: cfg.d_a,
                max_len: cfg.max_len,
            },
            vocab,
            train: synth_split(cfg, seed, n_train, 0)?,
            val: synth_split(cfg, seed, n_val, VAL_STREAM)?,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        for (name, split) in [("train", &self.train), ("val", &self.val)] {
            let sdir = dir.join(name);
            let fdir = sdir.join("features");
            std::fs::create_dir_all(&fdir)?;
            let mut captions = String::new();
            let mut alignment = String::new();
            for (i, ex) in split.iter().enumerate() {
                save_features(&fdir.join(format!("{i:05}.aatf")), &ex.features)?;
                captions.push_str(&self.vocab.decode(&ex.target)?.join(" "));
                captions.push('\n');
                let counts: Vec<String> = ex.alignment.iter().map(usize::to_string).collect();
                writeln!(alignment, "{}", counts.join(" ")).expect("string write");
            }
            std::fs::write(sdir.join("captions.txt"), captions)?;
            std::fs::write(sdir.join("alignment.txt"), alignment)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("dataset.json");
        let meta: DatasetMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", meta_path.display())))?,
        )?;
        let vocab = Vocab::load(&dir.join("vocab.txt"))?;
        let train = load_split(&dir.join("train"), &vocab, meta.max_len, meta.n_train)?;
        let val = load_split(&dir.join("val"), &vocab, meta.max_len, meta.n_val)?;
        for ex in train.iter().chain(&val) {
            if ex.features.dim() != meta.d_a {
                return Err(Error::config(format!(
                    "feature dimension {} does not match dataset d_a {}",
                    ex.features.dim(),
                    meta.d_a
                )));
            }
        }
        Ok(Dataset {
            meta,
            vocab,
            train,
            val,
        })
    }
}

fn load_split(dir: &Path, vocab: &Vocab, max_len: usize, n: usize) -> Result<Vec<Example>> {
    let captions = std::fs::read_to_string(dir.join("captions.txt"))?;
    let lines: Vec<&str> = captions.lines().collect();
    if lines.len() != n {
        return Err(Error::config(format!(
            "{} holds {} captions, metadata says {n}",
            dir.display(),
            lines.len()
        )));
    }
    let alignment = std::fs::read_to_string(dir.join("alignment.txt")).unwrap_or_default();
    let mut align_lines = alignment.lines();
    let fdir = dir.join("features");
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let features = load_features(&fdir.join(format!("{i:05}.aatf")))?;
            let alignment = match align_lines.next() {
                Some(a) => a
                    .split_whitespace()
                    .map(|x| x.parse().map_err(|_| Error::config(format!("bad alignment {x:?}"))))
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            Ok(Example {
                features,
                target: vocab.encode(line, max_len),
                alignment,
            })
        })
        .collect()
}
