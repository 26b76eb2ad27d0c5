//! Run configuration: one TOML file per experiment, flag overrides on top,
//! and an effective-config echo into the output directory so every run
//! records exactly what it executed.

use std::fs;
use std::path::{Path, PathBuf};

use adadata::error::{Error, Result};
use adadata::monolstm::MonoLstmConfig;
use adadata::optim::AdamConfig;
use adadata::prefixgen::GenerationConfig;
use adadata::simul::SimulConfig;
use adadata::text::Vocabulary;
use adadata::trainer::TrainOptions;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub mono: MonoSection,
    #[serde(default)]
    pub simul: SimulSection,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub decode: DecodeSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    #[serde(default)]
    pub test_src: Option<PathBuf>,
    #[serde(default)]
    pub test_tgt: Option<PathBuf>,
    pub src_vocab: PathBuf,
    pub tgt_vocab: PathBuf,
    #[serde(default = "d_max_len")]
    pub max_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoSection {
    #[serde(default = "d_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d_layers")]
    pub encoder_layers: usize,
    #[serde(default = "d_layers")]
    pub decoder_layers: usize,
    #[serde(default = "d_mono_dropout")]
    pub dropout: f64,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: usize,
}

impl Default for MonoSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section must default")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulSection {
    #[serde(default = "d_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_dim")]
    pub hidden_dim: usize,
    #[serde(default = "d_layers")]
    pub encoder_layers: usize,
    #[serde(default = "d_layers")]
    pub decoder_layers: usize,
    #[serde(default = "d_simul_dropout")]
    pub dropout: f64,
    #[serde(default = "d_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: usize,
}

impl Default for SimulSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section must default")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    #[serde(default = "d_threshold")]
    pub threshold: f64,
    #[serde(default = "d_true")]
    pub drop_empty: bool,
    #[serde(default = "d_true")]
    pub dedup: bool,
    #[serde(default)]
    pub include_full: bool,
}

impl Default for GenerateSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section must default")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "d_thresholds")]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub finetune: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section must default")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    #[serde(default = "d_policy")]
    pub policy: String,
}

impl Default for DecodeSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section must default")
    }
}

fn d_seed() -> u64 {
    1
}
fn d_max_len() -> usize {
    60
}
fn d_dim() -> usize {
    64
}
fn d_layers() -> usize {
    2
}
fn d_mono_dropout() -> f64 {
    0.2
}
fn d_simul_dropout() -> f64 {
    0.3
}
fn d_smoothing() -> f64 {
    0.1
}
fn d_peak_lr() -> f64 {
    0.003
}
fn d_warmup() -> u64 {
    400
}
fn d_epochs() -> usize {
    10
}
fn d_max_tokens() -> usize {
    1024
}
fn d_threshold() -> f64 {
    0.3
}
fn d_true() -> bool {
    true
}
fn d_thresholds() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
}
fn d_policy() -> String {
    "adaptive".into()
}

/// Flag-level overrides shared by the config-driven commands. Anything set
/// here wins over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Override the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Override the epoch count of the section the command trains.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the peak learning rate of the section the command trains.
    #[arg(long)]
    pub peak_lr: Option<f64>,
    /// Override the prefix-generation threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
}

impl RunConfig {
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let body = fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&body)
            .map_err(|e| Error::Format(format!("config {}: {e}", path.display())))?;
        if let Some(seed) = ov.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &ov.out_dir {
            cfg.out_dir = dir.clone();
        }
        if let Some(epochs) = ov.epochs {
            cfg.mono.epochs = epochs;
            cfg.simul.epochs = epochs;
        }
        if let Some(lr) = ov.peak_lr {
            cfg.mono.peak_lr = lr;
            cfg.simul.peak_lr = lr;
        }
        if let Some(e) = ov.threshold {
            cfg.generate.threshold = e;
        }
        Ok(cfg)
    }

    /// Record the resolved configuration next to the run's outputs.
    pub fn echo_effective(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir)?;
        let body = toml::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        let path = self.out_dir.join("effective-config.toml");
        let tmp = path.with_extension("toml.tmp");
        fs::write(&tmp, body)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn mono_config(&self, src_vocab: usize, tgt_vocab: usize) -> MonoLstmConfig {
        MonoLstmConfig {
            embed_dim: self.mono.embed_dim,
            hidden_dim: self.mono.hidden_dim,
            encoder_layers: self.mono.encoder_layers,
            decoder_layers: self.mono.decoder_layers,
            dropout: self.mono.dropout,
            label_smoothing: self.mono.label_smoothing,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn mono_adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.mono.peak_lr,
            warmup_steps: self.mono.warmup_steps,
            ..MonoLstmConfig::desk_adam(self.mono.peak_lr)
        }
    }

    pub fn mono_train(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.mono.epochs,
            max_tokens: self.mono.max_tokens,
            seed: self.seed,
            log_every: 50,
        }
    }

    pub fn simul_config(&self, src_vocab: usize, tgt_vocab: usize) -> SimulConfig {
        SimulConfig {
            embed_dim: self.simul.embed_dim,
            hidden_dim: self.simul.hidden_dim,
            encoder_layers: self.simul.encoder_layers,
            decoder_layers: self.simul.decoder_layers,
            dropout: self.simul.dropout,
            label_smoothing: self.simul.label_smoothing,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn simul_adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.simul.peak_lr,
            warmup_steps: self.simul.warmup_steps,
            ..SimulConfig::desk_adam(self.simul.peak_lr)
        }
    }

    pub fn simul_train(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.simul.epochs,
            max_tokens: self.simul.max_tokens,
            seed: self.seed,
            log_every: 50,
        }
    }

    pub fn generation(&self) -> Result<GenerationConfig> {
        let mut g = GenerationConfig::new(self.generate.threshold)?;
        g.drop_empty = self.generate.drop_empty;
        g.dedup = self.generate.dedup;
        g.include_full = self.generate.include_full;
        Ok(g)
    }

    pub fn load_vocabs(&self) -> Result<(Vocabulary, Vocabulary)> {
        Ok((
            Vocabulary::load(&self.data.src_vocab)?,
            Vocabulary::load(&self.data.tgt_vocab)?,
        ))
    }

    /// Conventional file locations inside the output directory.
    pub fn mono_ckpt(&self) -> PathBuf {
        self.out_dir.join("mono.ckpt")
    }
    pub fn full_ckpt(&self) -> PathBuf {
        self.out_dir.join("full.ckpt")
    }
    pub fn simul_ckpt(&self, e: f64) -> PathBuf {
        self.out_dir.join(format!("simul-e{e}.ckpt"))
    }
    pub fn finetune_ckpt(&self, e: f64) -> PathBuf {
        self.out_dir.join(format!("finetune-e{e}.ckpt"))
    }
    pub fn prefix_file(&self, e: f64) -> PathBuf {
        self.out_dir.join(format!("prefixes-e{e}.tsv"))
    }
}
