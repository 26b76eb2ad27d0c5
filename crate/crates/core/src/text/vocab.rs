//! Bidirectional token↔id mapping with four fixed reserved entries.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token↔id bijection. Ids 0–3 are always `<pad>`, `<unk>`, `<bos>`,
/// `<eos>`; out-of-vocabulary tokens encode to `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from token frequency counts: tokens with frequency at least
    /// `min_frequency`, ordered by descending frequency then lexicographic.
    /// Tokens spelled like a reserved entry are skipped (they are implicit).
    pub fn build<I, S>(tokens: I, min_frequency: u64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for t in tokens {
            let t = t.as_ref();
            if RESERVED.contains(&t) {
                continue;
            }
            *counts.entry(t.to_string()).or_insert(0) += 1;
        }
        let mut ordered: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_frequency)
            .collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_entries(ordered.into_iter().map(|(t, _)| t))
            .expect("counted tokens are distinct")
    }

    /// Build from an explicit list of non-reserved tokens in id order.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for e in entries {
            let t = e.as_ref();
            if index.contains_key(t) {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?}")));
            }
            index.insert(t.to_string(), tokens.len() as u32);
            tokens.push(t.to_string());
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    /// Id for `token`, or `UNK` if absent.
    pub fn encode_token(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Encode a whitespace-tokenized line.
    pub fn encode_line(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|t| self.encode_token(t)).collect()
    }

    pub fn decode(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Decode a sequence, skipping nothing; unknown ids become an error.
    pub fn decode_all(&self, ids: &[u32]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| {
                self.decode(id)
                    .ok_or_else(|| Error::Index(format!("id {id} outside vocabulary of {}", self.len())))
            })
            .collect()
    }

    /// One non-reserved token per line; reserved entries are implicit.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(out.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)?;
        Self::from_entries(body.lines().filter(|l| !l.is_empty()))
    }
}
