//! Token vocabulary and caption preprocessing.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from its full token list, which must start with
    /// the four special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::config(format!(
                "vocabulary must start with {}",
                SPECIALS.join(" ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::config(format!("invalid token {t:?} at {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Special tokens followed by `words`.
    pub fn with_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(Into::into))
            .collect();
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or `UNK`.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::Lookup {
            index: id,
            len: self.tokens.len(),
        })
    }

    /// Lowercases, truncates to `max_len` words and appends EOS.
    pub fn encode(&self, caption: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(caption)
            .take(max_len)
            .map(|w| self.id(&w))
            .collect();
        ids.push(EOS);
        ids
    }

    /// Words for `ids`, stopping at the first EOS and skipping BOS and PAD.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<&str>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                EOS => break,
                BOS | PAD => {}
                _ => out.push(self.word(id)?),
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Whitespace tokens, lowercased.
pub fn tokenize(caption: &str) -> impl Iterator<Item = String> + '_ {
    caption.split_whitespace().map(str::to_lowercase)
}

/// Result of [`build_vocab`].
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub vocab: Vocab,
    /// Lowercased captions truncated to `max_len` words. Out-of-vocabulary
    /// words are kept as text.
    pub captions: Vec<Vec<String>>,
}

/// Keeps lowercased words occurring at least `min_count` times over the full
/// captions, ordered by descending count and then alphabetically, and trims
/// every caption to `max_len` words.
pub fn build_vocab(corpus: &[String], min_count: usize, max_len: usize) -> Result<Preprocessed> {
    let tokenized: Vec<Vec<String>> = corpus.iter().map(|c| tokenize(c).collect()).collect();
    if tokenized.iter().all(Vec::is_empty) {
        return Err(Error::config("empty corpus"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in tokenized.iter().flatten() {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(w, c)| c >= min_count.max(1) && !SPECIALS.contains(&w))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let vocab = Vocab::with_words(kept.iter().map(|(w, _)| w.to_string()))?;
    let captions = tokenized
        .into_iter()
        .map(|mut c| {
            c.truncate(max_len);
            c
        })
        .collect();
    Ok(Preprocessed { vocab, captions })
}
