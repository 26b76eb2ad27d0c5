//! Line-aligned parallel corpus loading.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::vocab::{Vocabulary, EOS, PAD};

/// One aligned sentence pair, already encoded. The target always ends with
/// `<eos>`; neither side contains `<pad>`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    /// 1-based line number in the input files.
    pub line: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub kept: usize,
    pub dropped_empty: usize,
    pub dropped_long: usize,
}

/// Encode two line-aligned token files into sentence pairs. Pairs with an
/// empty side are dropped, as are pairs where either side exceeds `max_len`
/// tokens (the target measured before `<eos>` is appended).
pub fn load_parallel_corpus(
    source_path: &Path,
    target_path: &Path,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<SentencePair>, LoadStats)> {
    let src_body = fs::read_to_string(source_path)?;
    let tgt_body = fs::read_to_string(target_path)?;
    let src_lines: Vec<&str> = src_body.lines().collect();
    let tgt_lines: Vec<&str> = tgt_body.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Input(format!(
            "line-count mismatch: {} has {} lines, {} has {}",
            source_path.display(),
            src_lines.len(),
            target_path.display(),
            tgt_lines.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src_lines.len());
    let mut stats = LoadStats::default();
    for (i, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let source = source_vocab.encode_line(s);
        let mut target = target_vocab.encode_line(t);
        if source.is_empty() || target.is_empty() {
            stats.dropped_empty += 1;
            continue;
        }
        if source.len() > max_len || target.len() > max_len {
            stats.dropped_long += 1;
            continue;
        }
        debug_assert!(!source.contains(&PAD) && !target.contains(&PAD));
        target.push(EOS);
        pairs.push(SentencePair {
            source,
            target,
            line: i + 1,
        });
        stats.kept += 1;
    }
    Ok((pairs, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(path: &Path, body: &str) {
        fs::File::create(path)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
    }

    fn vocabs() -> (Vocabulary, Vocabulary) {
        (
            Vocabulary::build("a b c d e".split_whitespace(), 1),
            Vocabulary::build("x y z".split_whitespace(), 1),
        )
    }

    #[test]
    fn loads_and_appends_eos() {
        let dir = tempfile::tempdir().unwrap();
        let (sp, tp) = (dir.path().join("s"), dir.path().join("t"));
        write(&sp, "a b\nc\n");
        write(&tp, "x\ny z\n");
        let (sv, tv) = vocabs();
        let (pairs, stats) = load_parallel_corpus(&sp, &tp, &sv, &tv, 100).unwrap();
        assert_eq!(stats.kept, 2);
        assert_eq!(pairs[0].source, vec![sv.encode_token("a"), sv.encode_token("b")]);
        assert_eq!(pairs[0].target, vec![tv.encode_token("x"), EOS]);
        assert_eq!(pairs[0].line, 1);
        assert_eq!(pairs[1].line, 2);
    }

    #[test]
    fn drops_empty_and_overlong_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let (sp, tp) = (dir.path().join("s"), dir.path().join("t"));
        write(&sp, "a\n\na b c d e\n");
        write(&tp, "x\ny\nz\n");
        let (sv, tv) = vocabs();
        let (pairs, stats) = load_parallel_corpus(&sp, &tp, &sv, &tv, 3).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(stats.dropped_empty, 1);
        assert_eq!(stats.dropped_long, 1);
    }

    #[test]
    fn line_count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let (sp, tp) = (dir.path().join("s"), dir.path().join("t"));
        write(&sp, "a\nb\n");
        write(&tp, "x\n");
        let (sv, tv) = vocabs();
        let err = load_parallel_corpus(&sp, &tp, &sv, &tv, 100).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('1'), "got: {msg}");
    }

    #[test]
    fn unknown_tokens_encode_to_unk() {
        let dir = tempfile::tempdir().unwrap();
        let (sp, tp) = (dir.path().join("s"), dir.path().join("t"));
        write(&sp, "a qqq\n");
        write(&tp, "x\n");
        let (sv, tv) = vocabs();
        let (pairs, _) = load_parallel_corpus(&sp, &tp, &sv, &tv, 100).unwrap();
        assert_eq!(pairs[0].source[1], crate::text::UNK);
    }
}
