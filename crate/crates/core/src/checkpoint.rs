//! Model checkpoints.
//!
//! ```text
//! b"AATK"  version:u32  meta_len:u32  meta:json  archive
//! ```
//!
//! `meta` holds the model configuration and the vocabulary; `archive` is the
//! named-tensor archive of the parameters.

use crate::archive::{self, Reader};
use crate::decoder::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::vocab::Vocab;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AATK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vec<String>,
}

pub fn encode(model: &Model, vocab: &Vocab) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        config: model.config.clone(),
        vocab: vocab.tokens().to_vec(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&archive::encode(&model.params));
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<(Model, Vocab)> {
    let mut r = Reader::new(buf);
    if r.bytes(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.fail("bad checkpoint magic");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported checkpoint version {version}"));
    }
    let len = r.u32()? as usize;
    let start = r.pos;
    let meta: Meta = serde_json::from_slice(r.bytes(len)?).map_err(|e| Error::Format {
        offset: start,
        msg: format!("checkpoint metadata: {e}"),
    })?;
    let params = archive::decode_from(&mut r)?;
    if r.remaining() != 0 {
        return r.fail("trailing bytes after parameters");
    }
    let vocab = Vocab::from_tokens(meta.vocab)?;
    if vocab.len() != meta.config.vocab_size {
        return Err(Error::config(format!(
            "checkpoint vocabulary has {} tokens, model expects {}",
            vocab.len(),
            meta.config.vocab_size
        )));
    }
    let mut model = Model::new(meta.config, 0)?;
    if params.len() != model.params.len() {
        return Err(Error::config(format!(
            "checkpoint holds {} tensors, model has {}",
            params.len(),
            model.params.len()
        )));
    }
    model.params.load_from(&params)?;
    Ok((model, vocab))
}

pub fn save(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    std::fs::write(path, encode(model, vocab)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, Vocab)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Mode;

    #[test]
    fn roundtrip() {
        let vocab = Vocab::with_words(["x", "y", "z"]).unwrap();
        let mut cfg = ModelConfig::new(Mode::Adaptive, 4, 3, vocab.len());
        cfg.lambda = 0.1;
        let model = Model::new(cfg, 3).unwrap();
        let bytes = encode(&model, &vocab).unwrap();
        let (back, v) = decode(&bytes).unwrap();
        assert_eq!(v, vocab);
        assert_eq!(back.config, model.config);
        assert_eq!(back.params, model.params);

        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn vocabulary_size_must_match() {
        let vocab = Vocab::with_words(["x"]).unwrap();
        let model = Model::new(ModelConfig::new(Mode::Base, 4, 3, 6), 3).unwrap();
        assert!(matches!(decode(&encode(&model, &vocab).unwrap()), Err(Error::Config(_))));
    }
}
