//! `adadata` — batch pipelines for adaptive simultaneous translation.
//!
//! Exit codes: 0 success, 1 usage error, 2 input/data error, 3 training
//! failure. Every failure prints a single-line diagnostic to stderr.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adadata::checkpoint::Checkpoint;
use adadata::error::{Error, Result};
use adadata::metrics::{corpus_bleu, result_line, sentence_al, BleuScore, LatencyReport};
use adadata::monolstm::{train_monolstm, MonoLstmModel, MonoTrainSettings};
use adadata::prefixgen::{
    generate_corpus_prefixes, read_prefix_file, write_prefix_file, GenerationConfig, PrefixPair,
};
use adadata::simul::{
    finetune, train_full_sentence, train_mixed_from_scratch, SimulModel, SimulTrainSettings,
};
use adadata::stream::{adaptive_decode, full_sentence_decode, waitk_decode, DecodeTrace};
use adadata::text::{
    detokenize, learn_bpe, load_parallel_corpus, BpeModel, SentencePair, Vocabulary, EOS,
};
use adadata::trainer::TrainEvent;
use clap::{Parser, Subcommand};
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "adadata", version, about = "Adaptive simultaneous translation pipelines")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-pair-encoding model from tokenized text.
    BpeLearn {
        /// Tokenized input text, one sentence per line.
        input: PathBuf,
        /// Where to write the merge table.
        output: PathBuf,
        /// Number of merges to learn.
        #[arg(long, default_value_t = 1000)]
        merges: usize,
    },
    /// Segment tokenized text with a learned byte-pair-encoding model.
    BpeApply {
        /// Merge table written by bpe-learn.
        model: PathBuf,
        input: PathBuf,
        output: PathBuf,
    },
    /// Undo subword segmentation (join continuation pieces).
    Detok { input: PathBuf, output: PathBuf },
    /// Build a vocabulary file from segmented text.
    VocabBuild {
        input: PathBuf,
        output: PathBuf,
        /// Keep only tokens seen at least this many times.
        #[arg(long, default_value_t = 1)]
        min_frequency: u64,
    },
    /// Train the causal-attention measurement model on full sentences.
    TrainMono {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Pretrain the translation model on full sentences only.
    PretrainFull {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Generate self-translatable prefix pairs from the measurement model.
    GenPrefixes {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Train the translation model from scratch on the full+prefix mix.
    TrainSimul {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// One-epoch adaptation of the pretrained model on the full+prefix mix.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Stream segmented source text through a translation checkpoint.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// adaptive | waitk:<k> | full (defaults to the config's policy).
        #[arg(long)]
        policy: Option<String>,
        /// Segmented source text, one sentence per line.
        input: PathBuf,
        /// Where to write hypothesis lines.
        #[arg(long)]
        hyp_out: PathBuf,
        /// Where to write read/write traces (blank-line separated).
        #[arg(long)]
        trace_out: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Score hypotheses against references and traces.
    Evaluate {
        /// Hypothesis lines (segmented).
        #[arg(long)]
        hyps: PathBuf,
        /// One or more reference files (segmented), line-aligned with hyps.
        #[arg(long, required = true, num_args = 1..)]
        refs: Vec<PathBuf>,
        /// Trace file written by decode.
        #[arg(long)]
        traces: PathBuf,
        /// Score over raw subwords instead of joined words.
        #[arg(long)]
        subword_bleu: bool,
    },
    /// Run the full quality–latency sweep over thresholds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Fine-tune from the full-sentence checkpoint instead of training
        /// from scratch at every threshold.
        #[arg(long)]
        finetune: bool,
        #[command(flatten)]
        ov: Overrides,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = i32::from(err.use_stderr());
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli.cmd) {
        eprintln!("error: {err}");
        std::process::exit(match err {
            Error::InvalidParam(_) => 1,
            Error::Training { .. } => 3,
            _ => 2,
        });
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BpeLearn {
            input,
            output,
            merges,
        } => {
            let lines = read_lines(&input)?;
            let model = learn_bpe(lines.iter().map(String::as_str), merges)?;
            model.save(&output)?;
            println!("wrote {} ({} merges)", output.display(), model.num_merges());
            Ok(())
        }
        Command::BpeApply {
            model,
            input,
            output,
        } => {
            let model = BpeModel::load(&model)?;
            let lines = read_lines(&input)?;
            let body: String = lines
                .iter()
                .map(|line| model.apply_line(line).join(" ") + "\n")
                .collect();
            write_atomic(&output, &body)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::Detok { input, output } => {
            let lines = read_lines(&input)?;
            let body: String = lines
                .iter()
                .map(|line| {
                    let toks: Vec<&str> = line.split_whitespace().collect();
                    detokenize(&toks) + "\n"
                })
                .collect();
            write_atomic(&output, &body)?;
            println!("wrote {}", output.display());
            Ok(())
        }
        Command::VocabBuild {
            input,
            output,
            min_frequency,
        } => {
            let lines = read_lines(&input)?;
            let vocab =
                Vocabulary::build(lines.iter().flat_map(|l| l.split_whitespace()), min_frequency);
            vocab.save(&output)?;
            println!("wrote {} ({} tokens)", output.display(), vocab.len());
            Ok(())
        }
        Command::TrainMono { config, ov } => cmd_train_mono(&config, &ov),
        Command::PretrainFull { config, ov } => cmd_pretrain_full(&config, &ov),
        Command::GenPrefixes { config, ov } => cmd_gen_prefixes(&config, &ov),
        Command::TrainSimul { config, ov } => cmd_train_simul(&config, &ov),
        Command::Finetune { config, ov } => cmd_finetune(&config, &ov),
        Command::Decode {
            config,
            checkpoint,
            policy,
            input,
            hyp_out,
            trace_out,
            ov,
        } => cmd_decode(&config, &checkpoint, policy, &input, &hyp_out, &trace_out, &ov),
        Command::Evaluate {
            hyps,
            refs,
            traces,
            subword_bleu,
        } => cmd_evaluate(&hyps, &refs, &traces, subword_bleu),
        Command::Sweep {
            config,
            finetune,
            ov,
        } => cmd_sweep(&config, finetune, &ov),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let body = fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(body.lines().map(str::to_owned).collect())
}

fn write_atomic(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn log_event(ev: TrainEvent) {
    println!("epoch={} step={} loss={:.6}", ev.epoch, ev.step, ev.loss);
}

fn load_train_corpus(cfg: &RunConfig) -> Result<Vec<SentencePair>> {
    let (sv, tv) = cfg.load_vocabs()?;
    let (pairs, stats) = load_parallel_corpus(
        &cfg.data.train_src,
        &cfg.data.train_tgt,
        &sv,
        &tv,
        cfg.data.max_len,
    )?;
    println!(
        "corpus: kept={} dropped_empty={} dropped_long={}",
        stats.kept, stats.dropped_empty, stats.dropped_long
    );
    Ok(pairs)
}

fn cmd_train_mono(config: &Path, ov: &Overrides) -> Result<()> {
    let cfg = RunConfig::load(config, ov)?;
    cfg.echo_effective()?;
    let (sv, tv) = cfg.load_vocabs()?;
    let pairs = load_train_corpus(&cfg)?;
    let settings = MonoTrainSettings {
        model: cfg.mono_config(sv.len(), tv.len()),
        optim: cfg.mono_adam(),
        train: cfg.mono_train(),
    };
    let (model, stats) = train_monolstm(&pairs, &settings, log_event)?;
    let trained_steps: u64 = stats.iter().map(|s| s.steps).sum();
    let ck = model.to_checkpoint(&settings.optim, trained_steps);
    let path = cfg.mono_ckpt();
    ck.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_pretrain_full(config: &Path, ov: &Overrides) -> Result<()> {
    let cfg = RunConfig::load(config, ov)?;
    cfg.echo_effective()?;
    let (sv, tv) = cfg.load_vocabs()?;
    let pairs = load_train_corpus(&cfg)?;
    let settings = SimulTrainSettings {
        model: cfg.simul_config(sv.len(), tv.len()),
        optim: cfg.simul_adam(),
        train: cfg.simul_train(),
    };
    let (model, adam, _) = train_full_sentence(&pairs, &settings, log_event)?;
    let ck = model.to_checkpoint(&settings.optim, adam.steps_taken());
    let path = cfg.full_ckpt();
    ck.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gen_prefixes(config: &Path, ov: &Overrides) -> Result<()> {
    let cfg = RunConfig::load(config, ov)?;
    cfg.echo_effective()?;
    let ck = Checkpoint::load(&cfg.mono_ckpt())?;
    let (model, _, _) = MonoLstmModel::from_checkpoint(&ck)?;
    let pairs = load_train_corpus(&cfg)?;
    let gen = cfg.generation()?;
    let records = generate_corpus_prefixes(&pairs, &model, &gen)?;
    let path = cfg.prefix_file(gen.threshold);
    write_prefix_file(&path, gen.threshold, &records)?;
    println!("wrote {} ({} records)", path.display(), records.len());
    Ok(())
}

fn load_prefix_records(cfg: &RunConfig, threshold: f64) -> Result<Vec<PrefixPair>> {
    let path = cfg.prefix_file(threshold);
    if !path.exists() {
        return Err(Error::Input(format!(
            "missing prefix file {}; run gen-prefixes first",
            path.display()
        )));
    }
    let (_, records) = read_prefix_file(&path)?;
    Ok(records)
}

fn cmd_train_simul(config: &Path, ov: &Overrides) -> Result<()> {
    let cfg = RunConfig::load(config, ov)?;
    cfg.echo_effective()?;
    let (sv, tv) = cfg.load_vocabs()?;
    let pairs = load_train_corpus(&cfg)?;
    let records = load_prefix_records(&cfg, cfg.generate.threshold)?;
    let settings = SimulTrainSettings {
        model: cfg.simul_config(sv.len(), tv.len()),
        optim: cfg.simul_adam(),
        train: cfg.simul_train(),
    };
    let (model, adam, _) = train_mixed_from_scratch(&pairs, &records, &settings, log_event)?;
    let ck = model.to_checkpoint(&settings.optim, adam.steps_taken());
    let path = cfg.simul_ckpt(cfg.generate.threshold);
    ck.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_finetune(config: &Path, ov: &Overrides) -> Result<()> {
    let cfg = RunConfig::load(config, ov)?;
    cfg.echo_effective()?;
    let (sv, tv) = cfg.load_vocabs()?;
    let pairs = load_train_corpus(&cfg)?;
    let records = load_prefix_records(&cfg, cfg.generate.threshold)?;
    let base = Checkpoint::load(&cfg.full_ckpt())?;
    let expected = cfg.simul_config(sv.len(), tv.len());
    let train = cfg.simul_train();
    let (model, adam, _) = finetune(&base, &expected, &pairs, &records, &train, log_event)?;
    let optim = cfg.simul_adam();
    let ck = model.to_checkpoint(&optim, adam.steps_taken());
    let path = cfg.finetune_ckpt(cfg.generate.threshold);
    ck.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

enum Policy {
    Adaptive,
    WaitK(usize),
    Full,
}

fn parse_policy(text: &str) -> Result<Policy> {
    match text {
        "adaptive" => Ok(Policy::Adaptive),
        "full" => Ok(Policy::Full),
        other => match other.strip_prefix("waitk:").and_then(|k| k.parse().ok()) {
            Some(k) => Ok(Policy::WaitK(k)),
            None => Err(Error::InvalidParam(format!(
                "unknown policy {other:?}; expected adaptive, waitk:<k>, or full"
            ))),
        },
    }
}

/// Encode one sentence per line, terminated the way the training corpus is:
/// with the end-of-sequence id.
fn encode_source_lines(lines: &[String], vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let mut ids = vocab.encode_line(line);
        if ids.is_empty() {
            return Err(Error::Input(format!("input line {} is empty", i + 1)));
        }
        ids.push(EOS);
        out.push(ids);
    }
    Ok(out)
}

fn decode_corpus(
    model: &SimulModel,
    sources: &[Vec<u32>],
    policy: &Policy,
) -> Result<Vec<DecodeTrace>> {
    let mut traces = Vec::with_capacity(sources.len());
    for source in sources {
        let mut session = model.session();
        let trace = match policy {
            Policy::Adaptive => adaptive_decode(&mut session, source)?,
            Policy::WaitK(k) => waitk_decode(&mut session, source, *k)?,
            Policy::Full => full_sentence_decode(&mut session, source)?,
        };
        traces.push(trace);
    }
    Ok(traces)
}

fn hyp_file_body(traces: &[DecodeTrace], vocab: &Vocabulary) -> Result<String> {
    let mut body = String::new();
    for trace in traces {
        let written = trace.written();
        body.push_str(&vocab.decode_all(&written)?.join(" "));
        body.push('\n');
    }
    Ok(body)
}

fn trace_file_body(traces: &[DecodeTrace]) -> String {
    traces
        .iter()
        .map(|t| t.dump() + "\n")
        .collect::<Vec<_>>()
        .join("")
}

fn parse_trace_file(body: &str) -> Result<Vec<DecodeTrace>> {
    let mut traces = Vec::new();
    for block in body.split("\n\n") {
        if block.trim().is_empty() {
            continue;
        }
        traces.push(DecodeTrace::parse(block)?);
    }
    Ok(traces)
}

#[allow(clippy::too_many_arguments)]
fn cmd_decode(
    config: &Path,
    checkpoint: &Path,
    policy: Option<String>,
    input: &Path,
    hyp_out: &Path,
    trace_out: &Path,
    ov: &Overrides,
) -> Result<()> {
    let cfg = RunConfig::load(config, ov)?;
    let policy = parse_policy(policy.as_deref().unwrap_or(&cfg.decode.policy))?;
    let (sv, tv) = cfg.load_vocabs()?;
    let ck = Checkpoint::load(checkpoint)?;
    let (model, _, _) = SimulModel::from_checkpoint(&ck)?;
    let lines = read_lines(input)?;
    let sources = encode_source_lines(&lines, &sv)?;
    let traces = decode_corpus(&model, &sources, &policy)?;
    write_atomic(hyp_out, &hyp_file_body(&traces, &tv)?)?;
    write_atomic(trace_out, &trace_file_body(&traces))?;
    println!("wrote {} and {}", hyp_out.display(), trace_out.display());
    Ok(())
}

/// Per-sentence lagging with one reporting convention on top of the metric:
/// a trace that wrote nothing scores its source length, the latency of a
/// translator that consumed everything before falling silent.
fn corpus_latency(traces: &[DecodeTrace]) -> Result<LatencyReport> {
    if traces.is_empty() {
        return Err(Error::Input("lagging needs at least one trace".into()));
    }
    let mut per_sentence = Vec::with_capacity(traces.len());
    for trace in traces {
        per_sentence.push(if trace.num_writes() == 0 {
            trace.validate()?;
            trace.source_len as f64
        } else {
            sentence_al(trace)?
        });
    }
    let mean_al = per_sentence.iter().sum::<f64>() / per_sentence.len() as f64;
    Ok(LatencyReport {
        mean_al,
        per_sentence,
        n_sentences: traces.len(),
    })
}

/// Split scored text into token sequences: raw subwords, or joined words
/// after undoing the segmentation.
fn scoring_tokens(line: &str, subword: bool) -> Vec<String> {
    if subword {
        line.split_whitespace().map(str::to_owned).collect()
    } else {
        let pieces: Vec<&str> = line.split_whitespace().collect();
        detokenize(&pieces)
            .split_whitespace()
            .map(str::to_owned)
            .collect()
    }
}

fn score_corpus(
    hyp_lines: &[String],
    ref_files: &[Vec<String>],
    subword: bool,
) -> Result<BleuScore> {
    for refs in ref_files {
        if refs.len() != hyp_lines.len() {
            return Err(Error::Input(format!(
                "reference has {} lines but hypotheses have {}",
                refs.len(),
                hyp_lines.len()
            )));
        }
    }
    let hyps: Vec<Vec<String>> = hyp_lines
        .iter()
        .map(|l| scoring_tokens(l, subword))
        .collect();
    let refs: Vec<Vec<Vec<String>>> = (0..hyp_lines.len())
        .map(|i| {
            ref_files
                .iter()
                .map(|f| scoring_tokens(&f[i], subword))
                .collect()
        })
        .collect();
    corpus_bleu(&hyps, &refs)
}

fn cmd_evaluate(hyps: &Path, refs: &[PathBuf], traces: &Path, subword_bleu: bool) -> Result<()> {
    let hyp_lines = read_lines(hyps)?;
    let ref_files: Vec<Vec<String>> = refs
        .iter()
        .map(|p| read_lines(p))
        .collect::<Result<_>>()?;
    let score = score_corpus(&hyp_lines, &ref_files, subword_bleu)?;
    let trace_body = fs::read_to_string(traces)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", traces.display())))?;
    let parsed = parse_trace_file(&trace_body)?;
    if parsed.len() != hyp_lines.len() {
        return Err(Error::Input(format!(
            "trace file has {} traces but hypotheses have {} lines",
            parsed.len(),
            hyp_lines.len()
        )));
    }
    let latency = corpus_latency(&parsed)?;
    println!("{}", result_line(&score, &latency));
    Ok(())
}

struct SweepContext {
    cfg: RunConfig,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    train_pairs: Vec<SentencePair>,
    test_sources: Vec<Vec<u32>>,
    test_refs: Vec<String>,
    mono: MonoLstmModel,
}

/// One sweep point: generate prefixes at `e`, train (or fine-tune), decode
/// the test set adaptively, and score it.
fn sweep_point(ctx: &SweepContext, e: f64, use_finetune: bool) -> Result<(f64, f64)> {
    let base = ctx.cfg.generation()?;
    let mut gen = GenerationConfig::new(e)?;
    gen.drop_empty = base.drop_empty;
    gen.dedup = base.dedup;
    gen.include_full = base.include_full;
    let records = generate_corpus_prefixes(&ctx.train_pairs, &ctx.mono, &gen)?;
    write_prefix_file(&ctx.cfg.prefix_file(e), e, &records)?;
    let (model, adam, optim) = if use_finetune {
        let base = Checkpoint::load(&ctx.cfg.full_ckpt())?;
        let expected = ctx
            .cfg
            .simul_config(ctx.src_vocab.len(), ctx.tgt_vocab.len());
        let train = ctx.cfg.simul_train();
        let (model, adam, _) =
            finetune(&base, &expected, &ctx.train_pairs, &records, &train, log_event)?;
        (model, adam, ctx.cfg.simul_adam())
    } else {
        let settings = SimulTrainSettings {
            model: ctx
                .cfg
                .simul_config(ctx.src_vocab.len(), ctx.tgt_vocab.len()),
            optim: ctx.cfg.simul_adam(),
            train: ctx.cfg.simul_train(),
        };
        let (model, adam, _) =
            train_mixed_from_scratch(&ctx.train_pairs, &records, &settings, log_event)?;
        (model, adam, settings.optim)
    };
    let path = if use_finetune {
        ctx.cfg.finetune_ckpt(e)
    } else {
        ctx.cfg.simul_ckpt(e)
    };
    model.to_checkpoint(&optim, adam.steps_taken()).save(&path)?;
    score_model(ctx, &model, &Policy::Adaptive)
}

fn score_model(ctx: &SweepContext, model: &SimulModel, policy: &Policy) -> Result<(f64, f64)> {
    let traces = decode_corpus(model, &ctx.test_sources, policy)?;
    let hyp_body = hyp_file_body(&traces, &ctx.tgt_vocab)?;
    let hyps: Vec<String> = hyp_body.lines().map(str::to_owned).collect();
    let score = score_corpus(&hyps, std::slice::from_ref(&ctx.test_refs), false)?;
    let latency = corpus_latency(&traces)?;
    Ok((latency.mean_al, score.bleu))
}

fn cmd_sweep(config: &Path, finetune_flag: bool, ov: &Overrides) -> Result<()> {
    let cfg = RunConfig::load(config, ov)?;
    cfg.echo_effective()?;
    let use_finetune = finetune_flag || cfg.sweep.finetune;
    let thresholds = cfg.sweep.thresholds.clone();
    if thresholds.is_empty() {
        return Err(Error::InvalidParam("sweep needs at least one threshold".into()));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParam(
            "sweep thresholds must be strictly increasing".into(),
        ));
    }
    let (test_src, test_tgt) = match (&cfg.data.test_src, &cfg.data.test_tgt) {
        (Some(s), Some(t)) => (s.clone(), t.clone()),
        _ => {
            return Err(Error::Input(
                "sweep needs data.test_src and data.test_tgt".into(),
            ))
        }
    };
    let (src_vocab, tgt_vocab) = cfg.load_vocabs()?;
    let train_pairs = load_train_corpus(&cfg)?;
    let mono_ck = Checkpoint::load(&cfg.mono_ckpt())?;
    let (mono, _, _) = MonoLstmModel::from_checkpoint(&mono_ck)?;
    if use_finetune && !cfg.full_ckpt().exists() {
        return Err(Error::Input(format!(
            "missing full-sentence checkpoint {}; run pretrain-full first",
            cfg.full_ckpt().display()
        )));
    }
    let test_lines = read_lines(&test_src)?;
    let test_sources = encode_source_lines(&test_lines, &src_vocab)?;
    let test_refs = read_lines(&test_tgt)?;
    if test_refs.len() != test_sources.len() {
        return Err(Error::Input(format!(
            "test source has {} lines but test target has {}",
            test_sources.len(),
            test_refs.len()
        )));
    }
    let ctx = SweepContext {
        cfg,
        src_vocab,
        tgt_vocab,
        train_pairs,
        test_sources,
        test_refs,
        mono,
    };

    let mut csv = String::from("e,al,bleu,seconds\n");
    for &e in &thresholds {
        let start = Instant::now();
        let row = match sweep_point(&ctx, e, use_finetune) {
            Ok((al, bleu)) => format!("{e},{al:.3},{bleu:.2},{:.1}", start.elapsed().as_secs_f64()),
            Err(err) => {
                eprintln!("threshold {e} failed: {err}");
                format!("{e},error,error,{:.1}", start.elapsed().as_secs_f64())
            }
        };
        println!("{row}");
        csv.push_str(&row);
        csv.push('\n');
    }
    // Latency-unconstrained reference point from the pretrained model.
    let start = Instant::now();
    let full_row = match Checkpoint::load(&ctx.cfg.full_ckpt())
        .and_then(|ck| SimulModel::from_checkpoint(&ck))
        .and_then(|(model, _, _)| score_model(&ctx, &model, &Policy::Full))
    {
        Ok((al, bleu)) => format!("full,{al:.3},{bleu:.2},{:.1}", start.elapsed().as_secs_f64()),
        Err(err) => {
            eprintln!("full-sentence row failed: {err}");
            format!("full,error,error,{:.1}", start.elapsed().as_secs_f64())
        }
    };
    println!("{full_row}");
    csv.push_str(&full_row);
    csv.push('\n');
    let out = ctx.cfg.out_dir.join("sweep.csv");
    write_atomic(&out, &csv)?;
    println!("wrote {}", out.display());
    Ok(())
}
