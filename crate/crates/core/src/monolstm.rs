//! The causal-attention measurement model: a unidirectional LSTM encoder and
//! a source-blind LSTM decoder, joined only at the prediction layer by
//! dot-product attention.
//!
//! Three properties make its attention usable as a prefix-information
//! measure, and all are structural:
//!
//! * the encoder runs left to right, so state `h̄_s` sees only `x_{1:s}`;
//! * the decoder starts from zeros (no encoder-state handoff) and consumes
//!   only target embeddings (no input feeding), so `h_t` sees no source at
//!   all;
//! * attention scores `e(t,s) = h_t · h̄_s` therefore depend only on the
//!   prefixes — replacing `x_{s'+1:}` cannot move any `e(t,s)` with
//!   `s ≤ s'`. The normalized weights α do shift (shared softmax
//!   denominator), so prefix-locality claims hold at the score level only.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::lstm::{lstm_cell, zero_state, LstmParams, LstmVars, INIT_SCALE};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{PaddedBatch, SentencePair, BOS};
use crate::trainer::{train_epochs, EpochStats, Seq2SeqModel, TrainEvent, TrainOptions};

pub const ARCH_TAG: &str = "monolstm";

#[derive(Debug, Clone, PartialEq)]
pub struct MonoLstmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl MonoLstmConfig {
    /// CPU-scale default: dim 64, 2 layers each side, dropout 0.2.
    pub fn desk_default(src_vocab: usize, tgt_vocab: usize) -> Self {
        MonoLstmConfig {
            embed_dim: 64,
            hidden_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            dropout: 0.2,
            label_smoothing: 0.1,
            src_vocab,
            tgt_vocab,
        }
    }

    /// Measurement-model optimizer defaults: Adam (0.9, 0.997), ε 1e-9,
    /// 400 warmup steps.
    pub fn desk_adam(peak_lr: f64) -> AdamConfig {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-9,
            peak_lr,
            warmup_steps: 400,
            warmup_init_lr: 1e-7,
            clip_norm: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.hidden_dim == 0
            || self.encoder_layers == 0
            || self.decoder_layers == 0
        {
            return Err(Error::InvalidParam(
                "model dimensions and layer counts must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidParam(
                "dropout and label smoothing must lie in [0, 1)".into(),
            ));
        }
        if self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(Error::InvalidParam(
                "vocabularies must extend beyond the 4 reserved ids".into(),
            ));
        }
        Ok(())
    }
}

/// Row-stochastic T×S attention weights for one sentence pair. Row `t`
/// is the attention of the t-th target prediction step (row T−1 predicts
/// `<eos>`); column `s` is source position `s+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AttentionMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::Shape {
                op: "attention_matrix",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(AttentionMatrix { rows, cols, data })
    }

    /// Target steps (T), counting the `<eos>` prediction row.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Source length (S).
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.data[t * self.cols + s]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }
}

#[derive(Debug, Clone)]
pub struct MonoLstmModel {
    pub cfg: MonoLstmConfig,
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    pub encoder: Vec<LstmParams>,
    pub decoder: Vec<LstmParams>,
    /// `[2*hidden, tgt_vocab]`; logits are `[h_t ; c_t] · w_out`.
    pub w_out: Tensor,
}

struct MonoVars {
    src_embed: Var,
    tgt_embed: Var,
    encoder: Vec<LstmVars>,
    decoder: Vec<LstmVars>,
    w_out: Var,
}

/// Advance a layer stack one step, applying dropout to each layer's input.
fn run_stack(
    tape: &Tape,
    layers: &[LstmVars],
    x: Var,
    state: &mut [(Var, Var)],
    dropout: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    let mut input = x;
    for (l, w) in layers.iter().enumerate() {
        let dropped = tape.dropout(input, dropout, training, rng)?;
        let (h, c) = lstm_cell(tape, dropped, state[l].0, state[l].1, w)?;
        state[l] = (h, c);
        input = h;
    }
    Ok(input)
}

impl MonoLstmModel {
    pub fn init(cfg: MonoLstmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).derive("monolstm-init");
        let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
        let src_embed =
            Tensor::uniform(vec![cfg.src_vocab, e], -INIT_SCALE, INIT_SCALE, &mut rng).with_grad();
        let tgt_embed =
            Tensor::uniform(vec![cfg.tgt_vocab, e], -INIT_SCALE, INIT_SCALE, &mut rng).with_grad();
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            encoder.push(LstmParams::init(if l == 0 { e } else { h }, h, &mut rng));
        }
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            decoder.push(LstmParams::init(if l == 0 { e } else { h }, h, &mut rng));
        }
        let w_out =
            Tensor::uniform(vec![2 * h, cfg.tgt_vocab], -INIT_SCALE, INIT_SCALE, &mut rng)
                .with_grad();
        Ok(MonoLstmModel {
            cfg,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            w_out,
        })
    }

    fn vars(&self, tape: &Tape) -> MonoVars {
        MonoVars {
            src_embed: tape.leaf(&self.src_embed),
            tgt_embed: tape.leaf(&self.tgt_embed),
            encoder: self.encoder.iter().map(|p| p.vars(tape)).collect(),
            decoder: self.decoder.iter().map(|p| p.vars(tape)).collect(),
            w_out: tape.leaf(&self.w_out),
        }
    }

    fn var_list(v: &MonoVars) -> Vec<Var> {
        let mut out = vec![v.src_embed, v.tgt_embed];
        for w in v.encoder.iter().chain(&v.decoder) {
            out.extend([w.w_ih, w.w_hh, w.b]);
        }
        out.push(v.w_out);
        out
    }

    fn check_ids(&self, ids: &[u32], vocab: usize, side: &str) -> Result<()> {
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Encoding(format!(
                    "{side} id {id} outside the checkpoint vocabulary of {vocab}"
                )));
            }
        }
        Ok(())
    }

    /// Unidirectional encoding of one sentence; state `s` (0-based) is a
    /// function of `x[..=s]` only.
    pub fn encode_source(&self, x: &[u32]) -> Result<Vec<Vec<f64>>> {
        if x.is_empty() {
            return Err(Error::Input("cannot encode an empty source".into()));
        }
        self.check_ids(x, self.cfg.src_vocab, "source")?;
        let tape = Tape::inference();
        let v = self.vars(&tape);
        let mut rng = Rng::new(0);
        let mut state: Vec<(Var, Var)> = (0..self.cfg.encoder_layers)
            .map(|_| zero_state(&tape, 1, self.cfg.hidden_dim))
            .collect();
        let mut out = Vec::with_capacity(x.len());
        for &id in x {
            let emb = tape.embed(v.src_embed, &[id])?;
            let top = run_stack(&tape, &v.encoder, emb, &mut state, 0.0, false, &mut rng)?;
            out.push(tape.value(top).data().to_vec());
        }
        Ok(out)
    }

    /// Source-blind decoder states for a target `y` (which ends in `<eos>`):
    /// state `t` is computed after consuming `<bos>, y_1, …, y_t` shifted by
    /// one, i.e. from `y_{1:t}`'s prefix only — and from no source at all.
    pub fn decoder_states(&self, y: &[u32]) -> Result<Vec<Vec<f64>>> {
        if y.is_empty() {
            return Err(Error::Input("cannot decode an empty target".into()));
        }
        self.check_ids(y, self.cfg.tgt_vocab, "target")?;
        let tape = Tape::inference();
        let v = self.vars(&tape);
        let mut rng = Rng::new(0);
        let mut state: Vec<(Var, Var)> = (0..self.cfg.decoder_layers)
            .map(|_| zero_state(&tape, 1, self.cfg.hidden_dim))
            .collect();
        let mut inputs = Vec::with_capacity(y.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&y[..y.len() - 1]);
        let mut out = Vec::with_capacity(inputs.len());
        for &id in &inputs {
            let emb = tape.embed(v.tgt_embed, &[id])?;
            let top = run_stack(&tape, &v.decoder, emb, &mut state, 0.0, false, &mut rng)?;
            out.push(tape.value(top).data().to_vec());
        }
        Ok(out)
    }

    /// Raw dot-product scores `e(t,s) = h_t · h̄_s`. These, not the
    /// normalized weights, are the prefix-local quantity.
    pub fn unnormalized_scores(
        &self,
        dec_states: &[Vec<f64>],
        enc_states: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        let h = self.cfg.hidden_dim;
        for row in dec_states.iter().chain(enc_states) {
            if row.len() != h {
                return Err(Error::Shape {
                    op: "unnormalized_scores",
                    lhs: vec![h],
                    rhs: vec![row.len()],
                });
            }
        }
        Ok(dec_states
            .iter()
            .map(|ht| {
                enc_states
                    .iter()
                    .map(|hs| ht.iter().zip(hs).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect())
    }

    /// Attention weights and prediction logits from precomputed states.
    pub fn attention_and_predict(
        &self,
        dec_states: &[Vec<f64>],
        enc_states: &[Vec<f64>],
    ) -> Result<(AttentionMatrix, Tensor)> {
        let scores = self.unnormalized_scores(dec_states, enc_states)?;
        let (t_len, s_len) = (dec_states.len(), enc_states.len());
        let h = self.cfg.hidden_dim;
        let vt = self.cfg.tgt_vocab;
        let mut alpha = Vec::with_capacity(t_len * s_len);
        let mut logits = vec![0.0; t_len * vt];
        for (t, row) in scores.iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&e| (e - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let weights: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
            // Context vector, then logits = [h_t ; c_t] · w_out.
            let mut ctx = vec![0.0; h];
            for (s, &w) in weights.iter().enumerate() {
                for k in 0..h {
                    ctx[k] += w * enc_states[s][k];
                }
            }
            let wd = self.w_out.data();
            let lrow = &mut logits[t * vt..(t + 1) * vt];
            for k in 0..h {
                let hv = dec_states[t][k];
                if hv != 0.0 {
                    let wrow = &wd[k * vt..(k + 1) * vt];
                    for j in 0..vt {
                        lrow[j] += hv * wrow[j];
                    }
                }
            }
            for k in 0..h {
                let cv = ctx[k];
                if cv != 0.0 {
                    let wrow = &wd[(h + k) * vt..(h + k + 1) * vt];
                    for j in 0..vt {
                        lrow[j] += cv * wrow[j];
                    }
                }
            }
            alpha.extend(weights);
        }
        Ok((
            AttentionMatrix::new(t_len, s_len, alpha)?,
            Tensor::new(vec![t_len, vt], logits)?,
        ))
    }

    /// The T×S attention matrix for one pair, in evaluation mode. Row count
    /// T includes the `<eos>` prediction step.
    pub fn attention_matrix(&self, pair: &SentencePair) -> Result<AttentionMatrix> {
        let enc = self.encode_source(&pair.source)?;
        let dec = self.decoder_states(&pair.target)?;
        Ok(self.attention_and_predict(&dec, &enc)?.0)
    }

    /// Serialize with the optimizer settings and step count needed to resume
    /// or fingerprint the run. Parameter order matches [`Self::params`].
    pub fn to_checkpoint(&self, optim: &AdamConfig, trained_steps: u64) -> Checkpoint {
        let c = &self.cfg;
        let config = vec![
            ("embed_dim".into(), c.embed_dim as f64),
            ("hidden_dim".into(), c.hidden_dim as f64),
            ("encoder_layers".into(), c.encoder_layers as f64),
            ("decoder_layers".into(), c.decoder_layers as f64),
            ("dropout".into(), c.dropout),
            ("label_smoothing".into(), c.label_smoothing),
            ("src_vocab".into(), c.src_vocab as f64),
            ("tgt_vocab".into(), c.tgt_vocab as f64),
            ("trained_steps".into(), trained_steps as f64),
            ("beta1".into(), optim.beta1),
            ("beta2".into(), optim.beta2),
            ("eps".into(), optim.eps),
            ("peak_lr".into(), optim.peak_lr),
            ("warmup_steps".into(), optim.warmup_steps as f64),
            ("warmup_init_lr".into(), optim.warmup_init_lr),
            ("clip_norm".into(), optim.clip_norm),
        ];
        let params = self
            .param_names()
            .into_iter()
            .zip(self.params().into_iter().cloned())
            .collect();
        Checkpoint {
            arch: ARCH_TAG.into(),
            config,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, AdamConfig, u64)> {
        if ck.arch != ARCH_TAG {
            return Err(Error::Incompatible(format!(
                "checkpoint architecture {:?} is not {ARCH_TAG:?}",
                ck.arch
            )));
        }
        let cfg = MonoLstmConfig {
            embed_dim: ck.config_usize("embed_dim")?,
            hidden_dim: ck.config_usize("hidden_dim")?,
            encoder_layers: ck.config_usize("encoder_layers")?,
            decoder_layers: ck.config_usize("decoder_layers")?,
            dropout: ck.config_value("dropout")?,
            label_smoothing: ck.config_value("label_smoothing")?,
            src_vocab: ck.config_usize("src_vocab")?,
            tgt_vocab: ck.config_usize("tgt_vocab")?,
        };
        cfg.validate()?;
        let optim = AdamConfig {
            beta1: ck.config_value("beta1")?,
            beta2: ck.config_value("beta2")?,
            eps: ck.config_value("eps")?,
            peak_lr: ck.config_value("peak_lr")?,
            warmup_steps: ck.config_usize("warmup_steps")? as u64,
            warmup_init_lr: ck.config_value("warmup_init_lr")?,
            clip_norm: ck.config_value("clip_norm")?,
        };
        let trained_steps = ck.config_usize("trained_steps")? as u64;
        let mut model = Self::init(cfg, 0)?;
        let names = model.param_names();
        let mut tensors = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let stored = ck.param(name)?;
            let expect = model.params()[i].shape().to_vec();
            if stored.shape() != expect {
                return Err(Error::Incompatible(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    expect
                )));
            }
            tensors.push(stored.clone());
        }
        for (slot, tensor) in model.params_mut().into_iter().zip(tensors) {
            *slot = tensor;
        }
        Ok((model, optim, trained_steps))
    }
}

impl Seq2SeqModel for MonoLstmModel {
    fn param_names(&self) -> Vec<String> {
        let mut names = vec!["src_embed".to_string(), "tgt_embed".to_string()];
        for l in 0..self.encoder.len() {
            names.extend([
                format!("enc{l}.w_ih"),
                format!("enc{l}.w_hh"),
                format!("enc{l}.b"),
            ]);
        }
        for l in 0..self.decoder.len() {
            names.extend([
                format!("dec{l}.w_ih"),
                format!("dec{l}.w_hh"),
                format!("dec{l}.b"),
            ]);
        }
        names.push("w_out".to_string());
        names
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.src_embed, &self.tgt_embed];
        for p in self.encoder.iter().chain(&self.decoder) {
            out.extend([&p.w_ih, &p.w_hh, &p.b]);
        }
        out.push(&self.w_out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.src_embed, &mut self.tgt_embed];
        for p in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend([&mut p.w_ih, &mut p.w_hh, &mut p.b]);
        }
        out.push(&mut self.w_out);
        out
    }

    fn forward_logits(
        &self,
        tape: &Tape,
        batch: &PaddedBatch,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let v = self.vars(tape);
        let bsz = batch.batch_size();
        let h = self.cfg.hidden_dim;
        let dropout = self.cfg.dropout;

        let mut enc_state: Vec<(Var, Var)> = (0..self.encoder.len())
            .map(|_| zero_state(tape, bsz, h))
            .collect();
        let mut enc_tops = Vec::with_capacity(batch.src_max());
        for s in 0..batch.src_max() {
            let emb = tape.embed(v.src_embed, &batch.src_col(s))?;
            enc_tops.push(run_stack(
                tape,
                &v.encoder,
                emb,
                &mut enc_state,
                dropout,
                training,
                rng,
            )?);
        }

        let mut dec_state: Vec<(Var, Var)> = (0..self.decoder.len())
            .map(|_| zero_state(tape, bsz, h))
            .collect();
        let mut step_logits = Vec::with_capacity(batch.tgt_max());
        for t in 0..batch.tgt_max() {
            let emb = tape.embed(v.tgt_embed, &batch.tgt_in_col(t))?;
            let top = run_stack(
                tape,
                &v.decoder,
                emb,
                &mut dec_state,
                dropout,
                training,
                rng,
            )?;
            let scores = tape.attn_scores(top, &enc_tops)?;
            let alpha = tape.softmax_rows_masked(scores, batch.src_valid())?;
            let ctx = tape.weighted_sum(alpha, &enc_tops)?;
            let cat = tape.concat_cols(&[top, ctx])?;
            let cat = tape.dropout(cat, dropout, training, rng)?;
            step_logits.push(tape.matmul(cat, v.w_out)?);
        }
        let logits = tape.concat_rows(&step_logits)?;
        Ok((logits, Self::var_list(&v)))
    }

    fn label_smoothing(&self) -> f64 {
        self.cfg.label_smoothing
    }
}

#[derive(Debug, Clone)]
pub struct MonoTrainSettings {
    pub model: MonoLstmConfig,
    pub optim: AdamConfig,
    pub train: TrainOptions,
}

/// Teacher-forced training on full sentence pairs. Deterministic for a
/// fixed seed: identical reruns produce bit-identical models.
pub fn train_monolstm<O: FnMut(TrainEvent)>(
    pairs: &[SentencePair],
    settings: &MonoTrainSettings,
    observe: O,
) -> Result<(MonoLstmModel, Vec<EpochStats>)> {
    if pairs.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    let mut model = MonoLstmModel::init(settings.model.clone(), settings.train.seed)?;
    let sizes: Vec<usize> = model.params().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(settings.optim.clone(), &sizes)?;
    let stats = train_epochs(
        &mut model,
        &mut adam,
        &settings.train,
        |_, _| Ok(pairs.to_vec()),
        observe,
    )?;
    Ok((model, stats))
}
