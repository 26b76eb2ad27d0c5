//! Token-budgeted batch construction: shuffle, length-bucket, pack.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::text::corpus::SentencePair;
use crate::text::vocab::{BOS, PAD};

/// Indices into the corpus making up one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Pairs in shuffled order are grouped into pools of this many sentences,
/// sorted by length inside each pool, and packed greedily. Larger pools give
/// tighter packing but less shuffling between epochs.
const POOL: usize = 512;

fn cost_len(p: &SentencePair) -> usize {
    p.source.len().max(p.target.len())
}

/// Partition `pairs` into batches whose padded token count
/// (batch size × longest sequence) stays within `max_tokens`. Every pair
/// appears in exactly one batch; the same seed reproduces the same batches.
pub fn batch_iterator(pairs: &[SentencePair], max_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    for p in pairs {
        if cost_len(p) > max_tokens {
            return Err(Error::Input(format!(
                "pair at line {} needs {} tokens, over the {max_tokens}-token batch budget",
                p.line,
                cost_len(p)
            )));
        }
    }
    let mut rng = Rng::new(seed).derive("batch-order");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    for pool in order.chunks(POOL) {
        let mut pool: Vec<usize> = pool.to_vec();
        pool.sort_by_key(|&i| cost_len(&pairs[i]));
        let mut current: Vec<usize> = Vec::new();
        let mut longest = 0usize;
        for i in pool {
            let len = cost_len(&pairs[i]);
            let new_longest = longest.max(len);
            if !current.is_empty() && (current.len() + 1) * new_longest > max_tokens {
                batches.push(Batch {
                    indices: std::mem::take(&mut current),
                });
                longest = 0;
            }
            longest = longest.max(len);
            current.push(i);
        }
        if !current.is_empty() {
            batches.push(Batch { indices: current });
        }
    }
    rng.shuffle(&mut batches);
    Ok(batches)
}

/// A batch padded into rectangular id matrices for teacher-forced training.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    /// `[B][S_max]` source ids, right-padded with `<pad>`.
    pub src: Vec<Vec<u32>>,
    pub src_lens: Vec<usize>,
    /// `[B][T_max]` decoder inputs: `<bos>` followed by the target minus its
    /// final token, right-padded.
    pub tgt_in: Vec<Vec<u32>>,
    /// `[B][T_max]` prediction targets: the target itself (ending in
    /// `<eos>`), right-padded.
    pub tgt_out: Vec<Vec<u32>>,
    pub tgt_lens: Vec<usize>,
}

impl PaddedBatch {
    pub fn batch_size(&self) -> usize {
        self.src.len()
    }

    pub fn src_max(&self) -> usize {
        self.src.first().map_or(0, Vec::len)
    }

    pub fn tgt_max(&self) -> usize {
        self.tgt_in.first().map_or(0, Vec::len)
    }

    /// Ids of source column `s` across the batch.
    pub fn src_col(&self, s: usize) -> Vec<u32> {
        self.src.iter().map(|row| row[s]).collect()
    }

    pub fn tgt_in_col(&self, t: usize) -> Vec<u32> {
        self.tgt_in.iter().map(|row| row[t]).collect()
    }

    /// Row-major flattening of `tgt_out`, as consumed by the loss.
    pub fn tgt_out_flat(&self) -> Vec<u32> {
        self.tgt_out.iter().flatten().copied().collect()
    }

    /// Attention mask: how many source positions row `b` may see.
    pub fn src_valid(&self) -> &[usize] {
        &self.src_lens
    }
}

/// Pad selected pairs into rectangles.
pub fn pad_batch(pairs: &[&SentencePair]) -> PaddedBatch {
    let src_max = pairs.iter().map(|p| p.source.len()).max().unwrap_or(0);
    let tgt_max = pairs.iter().map(|p| p.target.len()).max().unwrap_or(0);
    let mut out = PaddedBatch {
        src: Vec::with_capacity(pairs.len()),
        src_lens: Vec::with_capacity(pairs.len()),
        tgt_in: Vec::with_capacity(pairs.len()),
        tgt_out: Vec::with_capacity(pairs.len()),
        tgt_lens: Vec::with_capacity(pairs.len()),
    };
    for p in pairs {
        let mut s = p.source.clone();
        s.resize(src_max, PAD);
        out.src.push(s);
        out.src_lens.push(p.source.len());

        let mut t_in = Vec::with_capacity(tgt_max);
        t_in.push(BOS);
        t_in.extend_from_slice(&p.target[..p.target.len() - 1]);
        t_in.resize(tgt_max, PAD);
        out.tgt_in.push(t_in);

        let mut t_out = p.target.clone();
        t_out.resize(tgt_max, PAD);
        out.tgt_out.push(t_out);
        out.tgt_lens.push(p.target.len());
    }
    out
}
