//! Corpus ingestion: BPE subword tokenization, vocabulary management,
//! parallel-corpus loading, and batched dataset iteration.

mod batch;
mod bpe;
mod corpus;
mod vocab;

pub use batch::{batch_iterator, pad_batch, Batch, PaddedBatch};
pub use bpe::{detokenize, learn_bpe, BpeModel, WORD_END};
pub use corpus::{load_parallel_corpus, LoadStats, SentencePair};
pub use vocab::{Vocabulary, BOS, EOS, PAD, UNK};
