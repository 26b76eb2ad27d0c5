//! Byte-pair encoding: greedy highest-frequency pair merging over a word
//! frequency table, with the end-of-word marker fused onto each word's
//! final character.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Marker appended to the last character of every word before merging.
/// A subword carrying this suffix always ends a word, which makes
/// detokenization trivial and lossless.
pub const WORD_END: &str = "</w>";

/// An ordered list of merge rules. Applying the rules in learned order is
/// deterministic; each rule rewrites adjacent symbol pairs left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(WORD_END);
    }
    syms
}

/// One greedy left-to-right pass replacing adjacent `(left, right)` pairs
/// with their concatenation. Shared by learning and application so both
/// sides agree on the rewrite.
fn merge_pair(syms: &mut Vec<String>, left: &str, right: &str) {
    let mut out: Vec<String> = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut syms[i]));
            i += 1;
        }
    }
    *syms = out;
}

/// Learn up to `num_merges` merge rules from whitespace-tokenized lines.
/// Each iteration merges the most frequent adjacent pair, breaking ties by
/// lexicographic order of the pair; learning stops early once no pair
/// occurs twice.
pub fn learn_bpe<I, S>(lines: I, num_merges: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    let mut any = false;
    for line in lines {
        any = true;
        for w in line.as_ref().split_whitespace() {
            *word_freq.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Input("cannot learn BPE from an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, u64)> = {
        let mut v: Vec<(String, u64)> = word_freq.into_iter().collect();
        v.sort(); // deterministic iteration order
        v.into_iter().map(|(w, c)| (word_symbols(&w), c)).collect()
    };
    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pair_freq: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, count) in &words {
            for pair in syms.windows(2) {
                *pair_freq.entry((&pair[0], &pair[1])).or_insert(0) += count;
            }
        }
        let best = pair_freq
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let Some(((left, right), _)) = best else {
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        for (syms, _) in &mut words {
            merge_pair(syms, &left, &right);
        }
        merges.push((left, right));
    }
    Ok(BpeModel { merges })
}

impl BpeModel {
    pub fn num_merges(&self) -> usize {
        self.merges.len()
    }

    /// Split one word into subword tokens: characters plus the end-of-word
    /// marker, then every merge rule in learned order.
    pub fn apply_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        for (left, right) in &self.merges {
            if syms.len() < 2 {
                break;
            }
            merge_pair(&mut syms, left, right);
        }
        syms
    }

    /// Tokenize a whitespace-separated line into subword tokens.
    pub fn apply_line(&self, line: &str) -> Vec<String> {
        line.split_whitespace()
            .flat_map(|w| self.apply_word(w))
            .collect()
    }

    /// Format: header `bpe-v1 <num_merges>`, then one `left right` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("bpe-v1 {}\n", self.merges.len());
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
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
        let mut lines = body.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty BPE model file".into()))?;
        let count: usize = header
            .strip_prefix("bpe-v1 ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad BPE header {header:?}")))?;
        let mut merges = Vec::with_capacity(count);
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (l, r) = line.split_once(' ').ok_or_else(|| {
                Error::Format(format!("merge line {} has no separator: {line:?}", i + 2))
            })?;
            merges.push((l.to_string(), r.to_string()));
        }
        if merges.len() != count {
            return Err(Error::Format(format!(
                "BPE header promises {count} merges, file holds {}",
                merges.len()
            )));
        }
        Ok(BpeModel { merges })
    }
}

/// Invert tokenization: subwords concatenate, and the end-of-word marker
/// becomes a space. Exact inverse of [`BpeModel::apply_line`] on
/// whitespace-normalized text.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        if let Some(stem) = t.strip_suffix(WORD_END) {
            out.push_str(stem);
            out.push(' ');
        } else {
            out.push_str(t);
        }
    }
    out.truncate(out.trim_end().len());
    out
}
