//! Desk-scale adaptive simultaneous machine translation.
//!
//! The pipeline turns a parallel corpus into an adaptive streaming translator:
//!
//! 1. [`monolstm`] trains a causal-attention LSTM whose unnormalized attention
//!    scores depend only on source/target prefixes.
//! 2. [`prefixgen`] converts its attention matrices into self-translatable
//!    prefix pairs under a cumulative-information threshold.
//! 3. [`simul`] trains a translation model on a 1:1 mix of prefix pairs and
//!    full-sentence pairs (from scratch or by one-epoch fine-tuning).
//! 4. [`stream`] runs adaptive decode-until-eos or wait-k policies over a
//!    token stream, producing translations plus read/write traces.
//! 5. [`metrics`] scores the result: corpus BLEU and Average Lagging.
//!
//! Everything runs on a small self-contained f64 tensor/autodiff stack
//! ([`tensor`], [`tape`], [`optim`]) so results are deterministic and
//! gradient-checkable on CPU.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod lstm;
pub mod metrics;
pub mod monolstm;
pub mod optim;
pub mod prefixgen;
pub mod rng;
pub mod simul;
pub mod stream;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
