//! Carving self-translatable prefix pairs out of attention matrices.
//!
//! For a threshold `e`, target prefix `y_{1:t}` is translatable from source
//! prefix `x_{1:s}` when every row `j ≤ t` of the cumulative attention has
//! `σ[j][s] ≥ e` — all information the decoder attended to up to step `t`
//! already lies inside the first `s` source tokens. For each `s` the
//! generator emits the longest such `t`.
//!
//! One pseudocode subtlety is resolved in favor of the definition: a scan
//! that exhausts all rows without a break means the whole target is
//! translatable, so the emitted length is `t = T`, not the `t − 1` a literal
//! reading of the loop's post-break bookkeeping would give.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::monolstm::{AttentionMatrix, MonoLstmModel};
use crate::rng::Rng;
use crate::text::{SentencePair, EOS};

/// T×S prefix sums of attention rows: `σ[t][s] = Σ_{i≤s} α[t][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeAttention {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CumulativeAttention {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// σ at target row `t`, source prefix length `s+1` (0-based indices).
    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.data[t * self.cols + s]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }
}

/// Exact per-row prefix sums of a row-stochastic matrix. Rows are
/// non-decreasing with final entry 1 (within the matrix's normalization).
pub fn cumulative_info(a: &AttentionMatrix) -> CumulativeAttention {
    let (rows, cols) = (a.rows(), a.cols());
    let mut data = Vec::with_capacity(rows * cols);
    for t in 0..rows {
        let mut acc = 0.0;
        for s in 0..cols {
            acc += a.get(t, s);
            data.push(acc);
        }
    }
    CumulativeAttention { rows, cols, data }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    /// Cumulative-information threshold; compared with `σ ≥ e`.
    pub threshold: f64,
    /// Drop pairs whose translatable target prefix is empty (t* = 0).
    pub drop_empty: bool,
    /// Filter exact duplicate (s, t) results. Cannot trigger for a single
    /// matrix (one result per s); kept as a guard for merged outputs.
    pub dedup: bool,
    /// Keep the (S, T) result, which reproduces the full sentence pair.
    pub include_full: bool,
}

impl GenerationConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !threshold.is_finite() || threshold <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "threshold {threshold} must be positive"
            )));
        }
        Ok(GenerationConfig {
            threshold,
            drop_empty: true,
            dedup: true,
            include_full: false,
        })
    }
}

/// A prefix-pair record: take the first `s` source tokens and the first
/// `t` real target tokens (a fresh `<eos>` is appended when materialized).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrefixPair {
    pub line: usize,
    pub s: usize,
    pub t: usize,
}

/// For each source prefix length `s`, the longest translatable target
/// prefix in attention-row units: `t*(s) = max{t : ∀ j ≤ t, σ[j][s] ≥ e}`
/// (0 if no row qualifies). Row units run 1..=T where row T is the `<eos>`
/// prediction step; the full pair (S, T) is excluded unless configured in.
pub fn generate_prefix_pairs(a: &AttentionMatrix, cfg: &GenerationConfig) -> Vec<(usize, usize)> {
    let sigma = cumulative_info(a);
    let (t_len, s_len) = (sigma.rows(), sigma.cols());
    let mut out = Vec::with_capacity(s_len);
    let mut seen = HashSet::new();
    for s in 1..=s_len {
        let mut t_star = 0;
        for t in 1..=t_len {
            if sigma.get(t - 1, s - 1) < cfg.threshold {
                break;
            }
            t_star = t;
        }
        if t_star == 0 && cfg.drop_empty {
            continue;
        }
        if s == s_len && t_star == t_len && !cfg.include_full {
            continue;
        }
        if cfg.dedup && !seen.insert((s, t_star)) {
            continue;
        }
        out.push((s, t_star));
    }
    out
}

/// Length-proportional baseline: `t = round(s·T/S)` clamped to `[1, T]`,
/// in real-target-token units (T excludes `<eos>`). The full pair is
/// excluded to match the generator's convention.
pub fn proportional_prefix_pairs(pair: &SentencePair) -> Vec<PrefixPair> {
    let s_len = pair.source.len();
    let t_len = pair.target.len() - 1; // drop the <eos> terminator
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for s in 1..=s_len {
        let t = ((s as f64 * t_len as f64 / s_len as f64).round() as usize).clamp(1, t_len);
        if s == s_len && t == t_len {
            continue;
        }
        if seen.insert((s, t)) {
            out.push(PrefixPair {
                line: pair.line,
                s,
                t,
            });
        }
    }
    out
}

/// File records for one pair: generator output with `t` capped to the real
/// target length (row T — the `<eos>` step — materializes to the same
/// tokens as row T−1).
pub fn records_for_pair(
    a: &AttentionMatrix,
    pair: &SentencePair,
    cfg: &GenerationConfig,
) -> Vec<PrefixPair> {
    let real_len = pair.target.len() - 1;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (s, t) in generate_prefix_pairs(a, cfg) {
        let rec = PrefixPair {
            line: pair.line,
            s,
            t: t.min(real_len),
        };
        if !cfg.dedup || seen.insert((rec.s, rec.t)) {
            out.push(rec);
        }
    }
    out
}

/// Run the measurement model over a corpus and collect all records,
/// sorted by (line, s).
pub fn generate_corpus_prefixes(
    pairs: &[SentencePair],
    model: &MonoLstmModel,
    cfg: &GenerationConfig,
) -> Result<Vec<PrefixPair>> {
    let mut out = Vec::new();
    for pair in pairs {
        let a = model.attention_matrix(pair)?;
        out.extend(records_for_pair(&a, pair, cfg));
    }
    out.sort();
    Ok(out)
}

/// Cut the recorded prefix out of its full pair, terminating the target
/// with a fresh `<eos>`.
pub fn materialize(full: &SentencePair, rec: &PrefixPair) -> Result<SentencePair> {
    let real_len = full.target.len() - 1;
    if rec.s == 0 || rec.s > full.source.len() || rec.t == 0 || rec.t > real_len {
        return Err(Error::Input(format!(
            "prefix record (s={}, t={}) does not fit pair at line {} (S={}, T={})",
            rec.s,
            rec.t,
            full.line,
            full.source.len(),
            real_len
        )));
    }
    let mut target = full.target[..rec.t].to_vec();
    target.push(EOS);
    Ok(SentencePair {
        source: full.source[..rec.s].to_vec(),
        target,
        line: full.line,
    })
}

/// One epoch's 1:1 mixed training set: all full pairs plus an equal number
/// of uniformly sampled prefix pairs (without replacement when enough
/// exist, with replacement otherwise), shuffled.
pub fn mix_dataset(
    full: &[SentencePair],
    prefixes: &[SentencePair],
    rng: &mut Rng,
) -> Result<Vec<SentencePair>> {
    if prefixes.is_empty() {
        return Err(Error::Input(
            "cannot mix an empty prefix-pair set; generate prefixes first".into(),
        ));
    }
    let want = full.len();
    let mut out = Vec::with_capacity(2 * want);
    out.extend_from_slice(full);
    if prefixes.len() >= want {
        for i in rng.sample_indices(prefixes.len(), want) {
            out.push(prefixes[i].clone());
        }
    } else {
        for _ in 0..want {
            out.push(prefixes[rng.next_below(prefixes.len())].clone());
        }
    }
    rng.shuffle(&mut out);
    Ok(out)
}

const FILE_HEADER: &str = "# adadata-prefixes v1";

/// TSV dump: header `# adadata-prefixes v1 e=<value>`, rows `line<TAB>s<TAB>t`.
pub fn write_prefix_file(path: &Path, threshold: f64, records: &[PrefixPair]) -> Result<()> {
    let mut body = format!("{FILE_HEADER} e={threshold}\n");
    for r in records {
        body.push_str(&format!("{}\t{}\t{}\n", r.line, r.s, r.t));
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(body.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_prefix_file(path: &Path) -> Result<(f64, Vec<PrefixPair>)> {
    let body = fs::read_to_string(path)?;
    let mut lines = body.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty prefix file".into()))?;
    let threshold: f64 = header
        .strip_prefix(FILE_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("e="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad prefix-file header {header:?}")))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let parse = |f: Option<&str>| -> Result<usize> {
            f.and_then(|v| v.parse().ok()).ok_or_else(|| {
                Error::Format(format!("malformed prefix row {}: {line:?}", i + 2))
            })
        };
        let rec = PrefixPair {
            line: parse(fields.next())?,
            s: parse(fields.next())?,
            t: parse(fields.next())?,
        };
        if fields.next().is_some() {
            return Err(Error::Format(format!(
                "malformed prefix row {}: {line:?}",
                i + 2
            )));
        }
        records.push(rec);
    }
    Ok((threshold, records))
}
