//! Teacher-forced training loop shared by both sequence models.

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{batch_iterator, pad_batch, PaddedBatch, SentencePair, PAD};

/// Interface the trainer needs from a model: an ordered parameter list and
/// a forward pass producing time-major logits.
pub trait Seq2SeqModel {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Logits `[T*B, V]` in target-time-major order (step t of every row,
    /// then step t+1), plus the parameter leaves in `params()` order.
    fn forward_logits(
        &self,
        tape: &Tape,
        batch: &PaddedBatch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<Var>)>;
    fn label_smoothing(&self) -> f64;
}

/// Targets flattened to match the time-major logit layout.
pub fn targets_time_major(batch: &PaddedBatch) -> Vec<u32> {
    let (bsz, tmax) = (batch.batch_size(), batch.tgt_max());
    let mut out = Vec::with_capacity(bsz * tmax);
    for t in 0..tmax {
        for b in 0..bsz {
            out.push(batch.tgt_out[b][t]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub epochs: usize,
    pub max_tokens: usize,
    pub seed: u64,
    /// Emit a progress event every this many optimizer steps (0 = only at
    /// epoch ends).
    pub log_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            max_tokens: 1024,
            seed: 1,
            log_every: 50,
        }
    }
}

/// One progress report: the running mean loss at a step or epoch boundary.
#[derive(Debug, Clone, Copy)]
pub struct TrainEvent {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub epoch_end: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: u64,
    /// Token-weighted mean loss over the epoch.
    pub mean_loss: f64,
}

/// Run `opts.epochs` epochs. `provide` supplies each epoch's training pairs
/// (constant for plain training, resampled for mixed training); `observe`
/// receives progress events. Deterministic for fixed seed and inputs.
pub fn train_epochs<M, P, O>(
    model: &mut M,
    adam: &mut Adam,
    opts: &TrainOptions,
    mut provide: P,
    mut observe: O,
) -> Result<Vec<EpochStats>>
where
    M: Seq2SeqModel,
    P: FnMut(usize, &mut Rng) -> Result<Vec<SentencePair>>,
    O: FnMut(TrainEvent),
{
    let mut stats = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let mut mix_rng = Rng::new(opts.seed).derive(&format!("mix-{epoch}"));
        let pairs = provide(epoch, &mut mix_rng)?;
        let batch_seed = Rng::new(opts.seed)
            .derive(&format!("batches-{epoch}"))
            .next_u64();
        let batches = batch_iterator(&pairs, opts.max_tokens, batch_seed)?;
        let mut dropout_rng = Rng::new(opts.seed).derive(&format!("dropout-{epoch}"));
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        let mut epoch_steps = 0u64;
        for batch in &batches {
            let selected: Vec<&SentencePair> = batch.indices.iter().map(|&i| &pairs[i]).collect();
            let padded = pad_batch(&selected);
            let loss_val;
            let grads_by_param;
            {
                let tape = Tape::new();
                let (logits, leaves) =
                    model.forward_logits(&tape, &padded, true, &mut dropout_rng)?;
                let targets = targets_time_major(&padded);
                let loss =
                    tape.label_smoothed_ce(logits, &targets, PAD, model.label_smoothing())?;
                loss_val = tape.value(loss).data()[0];
                if !loss_val.is_finite() {
                    return Err(Error::Training {
                        step: adam.steps_taken() + 1,
                        reason: format!("loss {loss_val} in epoch {epoch}"),
                    });
                }
                let grads = tape.backward(loss)?;
                grads_by_param = leaves
                    .iter()
                    .map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or_default())
                    .collect::<Vec<_>>();
            }
            let mut params = model.params_mut();
            let info = adam.apply(&mut params, &grads_by_param)?;
            drop(params);
            epoch_steps += 1;
            let tokens: usize = padded.tgt_lens.iter().sum();
            loss_sum += loss_val * tokens as f64;
            token_sum += tokens;
            if opts.log_every > 0 && info.step % opts.log_every == 0 {
                observe(TrainEvent {
                    epoch,
                    step: info.step,
                    loss: loss_sum / token_sum as f64,
                    epoch_end: false,
                });
            }
        }
        let mean_loss = if token_sum > 0 {
            loss_sum / token_sum as f64
        } else {
            0.0
        };
        observe(TrainEvent {
            epoch,
            step: adam.steps_taken(),
            loss: mean_loss,
            epoch_end: true,
        });
        stats.push(EpochStats {
            epoch,
            steps: epoch_steps,
            mean_loss,
        });
    }
    Ok(stats)
}

/// Mean teacher-forced loss over `pairs` without updating anything
/// (dropout off).
pub fn evaluate_loss<M: Seq2SeqModel>(
    model: &M,
    pairs: &[SentencePair],
    max_tokens: usize,
) -> Result<f64> {
    let mut rng = Rng::new(0);
    let batches = batch_iterator(pairs, max_tokens, 0)?;
    let mut loss_sum = 0.0;
    let mut token_sum = 0usize;
    for batch in &batches {
        let selected: Vec<&SentencePair> = batch.indices.iter().map(|&i| &pairs[i]).collect();
        let padded = pad_batch(&selected);
        let tape = Tape::inference();
        let (logits, _) = model.forward_logits(&tape, &padded, false, &mut rng)?;
        let targets = targets_time_major(&padded);
        let loss = tape.label_smoothed_ce(logits, &targets, PAD, model.label_smoothing())?;
        let tokens: usize = padded.tgt_lens.iter().sum();
        loss_sum += tape.value(loss).data()[0] * tokens as f64;
        token_sum += tokens;
    }
    if token_sum == 0 {
        return Err(Error::Input("no target tokens to evaluate".into()));
    }
    Ok(loss_sum / token_sum as f64)
}

/// Fraction of non-padding target positions whose argmax logit equals the
/// gold token under teacher forcing.
pub fn teacher_forced_accuracy<M: Seq2SeqModel>(
    model: &M,
    pairs: &[SentencePair],
    max_tokens: usize,
) -> Result<f64> {
    let mut rng = Rng::new(0);
    let batches = batch_iterator(pairs, max_tokens, 0)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for batch in &batches {
        let selected: Vec<&SentencePair> = batch.indices.iter().map(|&i| &pairs[i]).collect();
        let padded = pad_batch(&selected);
        let tape = Tape::inference();
        let (logits, _) = model.forward_logits(&tape, &padded, false, &mut rng)?;
        let targets = targets_time_major(&padded);
        let values = tape.value(logits);
        let v = values.cols();
        for (row, &gold) in targets.iter().enumerate() {
            if gold == PAD {
                continue;
            }
            let slice = &values.data()[row * v..(row + 1) * v];
            let mut best = 0usize;
            for (i, &x) in slice.iter().enumerate() {
                if x > slice[best] {
                    best = i;
                }
            }
            if best as u32 == gold {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Input("no target tokens to score".into()));
    }
    Ok(hits as f64 / total as f64)
}
