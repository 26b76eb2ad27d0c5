//! Streaming decode loops: interleaved READ/WRITE schedules over an
//! incremental translator.
//!
//! Two policies are provided. The adaptive policy reads one source token,
//! then writes until the translator would produce end-of-sequence, and
//! repeats; the model itself decides how long to wait. The wait-k policy
//! follows the fixed schedule g(t) = min(k + t − 1, S) regardless of
//! content. Both return a [`DecodeTrace`] whose READ/WRITE interleaving
//! feeds latency metrics and whose written tokens feed quality metrics.

use crate::error::{Error, Result};

/// Upper bound on tokens written after a single mid-sentence READ.
pub const PER_READ_CAP: usize = 20;

/// Upper bound on total tokens written for a source of length `s`.
pub fn global_write_cap(s: usize) -> usize {
    2 * s + 10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Read,
    Write(u32),
}

/// The full interleaving of one streamed sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub actions: Vec<Action>,
    pub source_len: usize,
}

impl DecodeTrace {
    /// Tokens written, in order (never includes end-of-sequence).
    pub fn written(&self) -> Vec<u32> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::Write(tok) => Some(*tok),
                Action::Read => None,
            })
            .collect()
    }

    pub fn num_writes(&self) -> usize {
        self.actions
            .iter()
            .filter(|a| matches!(a, Action::Write(_)))
            .count()
    }

    pub fn num_reads(&self) -> usize {
        self.actions.len() - self.num_writes()
    }

    /// g(t): source tokens read before the t-th written token (1-based).
    /// Non-decreasing by construction of any interleaving.
    pub fn g(&self, t: usize) -> usize {
        let mut reads = 0;
        let mut writes = 0;
        for a in &self.actions {
            match a {
                Action::Read => reads += 1,
                Action::Write(_) => {
                    writes += 1;
                    if writes == t {
                        return reads;
                    }
                }
            }
        }
        panic!("g({t}) asked of a trace with only {writes} writes");
    }

    /// Structural invariants every policy must satisfy: all source tokens
    /// consumed, and no token written before the first READ.
    pub fn validate(&self) -> Result<()> {
        if self.num_reads() != self.source_len {
            return Err(Error::Contract(format!(
                "trace consumed {} of {} source tokens",
                self.num_reads(),
                self.source_len
            )));
        }
        if self.num_writes() > 0 && self.g(1) < 1 {
            return Err(Error::Contract("token written before any READ".into()));
        }
        Ok(())
    }

    /// One line per action: `R` or `W <token>`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for a in &self.actions {
            match a {
                Action::Read => out.push_str("R\n"),
                Action::Write(tok) => out.push_str(&format!("W {tok}\n")),
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut actions = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "R" {
                actions.push(Action::Read);
            } else if let Some(tok) = line.strip_prefix("W ") {
                let tok = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("bad trace token {line:?}")))?;
                actions.push(Action::Write(tok));
            } else {
                return Err(Error::Format(format!("bad trace line {line:?}")));
            }
        }
        let source_len = actions.iter().filter(|a| **a == Action::Read).count();
        Ok(DecodeTrace {
            actions,
            source_len,
        })
    }
}

/// Result of asking a translator to extend its output.
#[derive(Debug, Clone, PartialEq)]
pub struct Extension {
    pub tokens: Vec<u32>,
    /// True when generation stopped because end-of-sequence was produced
    /// (the terminator itself is never included in `tokens`).
    pub ended_with_eos: bool,
}

/// An incremental translator: feed source tokens one at a time, then ask
/// for greedy continuations of a committed target prefix. Implementations
/// must recompute from `committed` on every call — the caller owns the
/// committed prefix, the translator owns the source state.
pub trait StreamTranslator {
    fn push_source(&mut self, token: u32) -> Result<()>;
    fn finish_source(&mut self) -> Result<()>;
    /// Greedily extend `committed` by at most `max_new` tokens. With
    /// `ban_eos`, end-of-sequence is excluded from the candidates so the
    /// extension always makes progress.
    fn extend(&mut self, committed: &[u32], max_new: usize, ban_eos: bool) -> Result<Extension>;
}

/// Adaptive policy: after each READ, write until the model wants to end
/// the sentence, then read again. The final READ hands over to ordinary
/// greedy completion. Write caps keep degenerate models terminating.
pub fn adaptive_decode<T: StreamTranslator>(
    translator: &mut T,
    source: &[u32],
) -> Result<DecodeTrace> {
    if source.is_empty() {
        return Err(Error::Input("cannot stream an empty source".into()));
    }
    let cap = global_write_cap(source.len());
    let mut actions = Vec::new();
    let mut committed: Vec<u32> = Vec::new();
    for (i, &tok) in source.iter().enumerate() {
        translator.push_source(tok)?;
        actions.push(Action::Read);
        let last = i + 1 == source.len();
        if last {
            translator.finish_source()?;
        }
        let budget = (cap - committed.len()).min(if last { cap } else { PER_READ_CAP });
        let ext = translator.extend(&committed, budget, false)?;
        for &t in &ext.tokens {
            actions.push(Action::Write(t));
            committed.push(t);
        }
        if last || committed.len() >= cap {
            // Consume any remaining source so the trace stays well-formed.
            for &rest in &source[i + 1..] {
                translator.push_source(rest)?;
                actions.push(Action::Read);
            }
            break;
        }
    }
    let trace = DecodeTrace {
        actions,
        source_len: source.len(),
    };
    trace.validate()?;
    Ok(trace)
}

/// Fixed wait-k policy: g(t) = min(k + t − 1, S) exactly. While the
/// source is incomplete, end-of-sequence is banned so each step commits
/// one real token; once all source is read, generation runs to
/// end-of-sequence (or the global cap).
pub fn waitk_decode<T: StreamTranslator>(
    translator: &mut T,
    source: &[u32],
    k: usize,
) -> Result<DecodeTrace> {
    if source.is_empty() {
        return Err(Error::Input("cannot stream an empty source".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParam("wait-k needs k ≥ 1".into()));
    }
    let s_len = source.len();
    let cap = global_write_cap(s_len);
    let mut actions = Vec::new();
    let mut committed: Vec<u32> = Vec::new();
    let mut reads = 0;
    loop {
        let t = committed.len() + 1;
        let needed = (k + t - 1).min(s_len);
        while reads < needed {
            translator.push_source(source[reads])?;
            reads += 1;
            actions.push(Action::Read);
            if reads == s_len {
                translator.finish_source()?;
            }
        }
        if committed.len() >= cap {
            break;
        }
        let partial = reads < s_len;
        let ext = translator.extend(&committed, 1, partial)?;
        match ext.tokens.first() {
            Some(&tok) => {
                actions.push(Action::Write(tok));
                committed.push(tok);
            }
            None if partial => {
                return Err(Error::Contract(
                    "translator produced nothing despite the end-of-sequence ban".into(),
                ));
            }
            None => break,
        }
        if !partial && ext.ended_with_eos {
            break;
        }
    }
    while reads < s_len {
        translator.push_source(source[reads])?;
        reads += 1;
        actions.push(Action::Read);
        if reads == s_len {
            translator.finish_source()?;
        }
    }
    let trace = DecodeTrace {
        actions,
        source_len: s_len,
    };
    trace.validate()?;
    Ok(trace)
}

/// Read everything, then translate: the latency-unconstrained reference
/// point. Equivalent to wait-k with k ≥ S.
pub fn full_sentence_decode<T: StreamTranslator>(
    translator: &mut T,
    source: &[u32],
) -> Result<DecodeTrace> {
    waitk_decode(translator, source, source.len().max(1))
}
