//! Flat `key = value` pipeline configuration with flag overrides.

use std::path::{Path, PathBuf};

use sgcap_core::error::{Error, Result};
use sgcap_core::training::TrainingConfig;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub scrub_rules: Option<PathBuf>,
    pub features_dir: PathBuf,
    pub vectors_file: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Vectorization scheme, e.g. `pretrained-50+tfidf`.
    pub scheme: String,
    pub split_threshold: usize,
    pub min_count: u64,
    pub embed_dim: usize,
    pub lstm_dim: usize,
    pub mm_dim: usize,
    pub img_dim: usize,
    pub init_half_range: f64,
    pub beam_size: usize,
    pub max_len: usize,
    pub normalize_score: bool,
    pub top_k: usize,
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub max_sentence_len: usize,
    pub grad_clip: Option<f64>,
    pub heldout_fraction: f64,
    pub stop_at_perplexity: Option<f64>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            scrub_rules: None,
            features_dir: PathBuf::from("."),
            vectors_file: None,
            out_dir: PathBuf::from("out"),
            scheme: "pretrained-50+tfidf".into(),
            split_threshold: 10,
            min_count: 3,
            embed_dim: 1024,
            lstm_dim: 2048,
            mm_dim: 2048,
            img_dim: 2048,
            init_half_range: 0.08,
            beam_size: 3,
            max_len: 20,
            normalize_score: true,
            top_k: 3,
            learning_rate: 1e-4,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
            batch_size: 64,
            l2: 1e-5,
            dropout: 0.5,
            max_epochs: 10,
            max_sentence_len: 60,
            grad_clip: None,
            heldout_fraction: 0.1,
            stop_at_perplexity: None,
            seed: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("config key {key}: cannot parse '{value}'")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus" => self.corpus = PathBuf::from(value),
            "scrub_rules" => {
                self.scrub_rules = if value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "features_dir" => self.features_dir = PathBuf::from(value),
            "vectors_file" => {
                self.vectors_file = if value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "scheme" => self.scheme = value.to_string(),
            "split_threshold" => self.split_threshold = parse(key, value)?,
            "min_count" => self.min_count = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "lstm_dim" => self.lstm_dim = parse(key, value)?,
            "mm_dim" => self.mm_dim = parse(key, value)?,
            "img_dim" => self.img_dim = parse(key, value)?,
            "init_half_range" => self.init_half_range = parse(key, value)?,
            "beam_size" => self.beam_size = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "normalize_score" => self.normalize_score = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "rms_decay" => self.rms_decay = parse(key, value)?,
            "rms_epsilon" => self.rms_epsilon = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "max_sentence_len" => self.max_sentence_len = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse_opt(key, value)?,
            "heldout_fraction" => self.heldout_fraction = parse(key, value)?,
            "stop_at_perplexity" => self.stop_at_perplexity = parse_opt(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut config = Self::default();
        let text = std::fs::read_to_string(path)?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected 'key = value'".into(),
            })?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.learning_rate,
            rms_decay: self.rms_decay,
            rms_epsilon: self.rms_epsilon,
            batch_size: self.batch_size,
            l2: self.l2,
            dropout: self.dropout,
            max_epochs: self.max_epochs,
            seed: self.seed,
            max_sentence_len: self.max_sentence_len,
            grad_clip: self.grad_clip,
            heldout_fraction: self.heldout_fraction,
            stop_at_perplexity: self.stop_at_perplexity,
        }
    }

    pub fn decode(&self) -> sgcap_core::decoding::DecodeConfig {
        sgcap_core::decoding::DecodeConfig {
            beam_size: self.beam_size,
            max_len: self.max_len,
            normalize_score: self.normalize_score,
        }
    }
}
