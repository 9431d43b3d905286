//! Paired character-level BiLSTM similarity encoders.
//!
//! A source-language encoder and an English encoder map titles to fixed-size
//! vectors; training maximizes the cosine similarity of parallel titles over
//! in-batch negatives with a max-margin loss. The trained pair transfers
//! unchanged to languages never seen in training, which is the whole point:
//! the source side only ever sees symbols, not language identity.

mod checkpoint;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{EncoderParams, InputLayer, InputSpec, LstmParams, SideParams};
pub use train::{train, EpochStats, TrainHistory};

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Aligned (source title, English title) training pairs for one language
/// pair. Pairs are deduplicated and both sides are always non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelTitleCorpus {
    src_lang: String,
    pairs: Vec<(String, String)>,
}

impl ParallelTitleCorpus {
    pub fn new(src_lang: &str, pairs: Vec<(String, String)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(pairs.len());
        for (src, en) in pairs {
            if src.is_empty() || en.is_empty() {
                return Err(Error::InvalidArgument(
                    "corpus pair with an empty side".into(),
                ));
            }
            if seen.insert((src.clone(), en.clone())) {
                kept.push((src, en));
            }
        }
        if kept.is_empty() {
            return Err(Error::EmptyInput("parallel corpus"));
        }
        Ok(ParallelTitleCorpus {
            src_lang: src_lang.to_owned(),
            pairs: kept,
        })
    }

    /// Parse the TSV form: `src_title<TAB>en_title`, one pair per line.
    pub fn parse(text: &str, file: &str, src_lang: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.is_empty() {
                continue;
            }
            let (src, en) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(file, lineno, "expected `src<TAB>en`"))?;
            if en.contains('\t') {
                return Err(Error::parse(file, lineno, "expected exactly two columns"));
            }
            if src.is_empty() || en.is_empty() {
                return Err(Error::parse(file, lineno, "empty title"));
            }
            pairs.push((src.to_owned(), en.to_owned()));
        }
        ParallelTitleCorpus::new(src_lang, pairs)
            .map_err(|_| Error::parse(file, 0, "no usable pairs"))
    }

    pub fn load(path: &Path, src_lang: &str) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        ParallelTitleCorpus::parse(&text, &path.display().to_string(), src_lang)
    }

    pub fn src_lang(&self) -> &str {
        &self.src_lang
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainingConfig {
    /// Hinge margin λ.
    pub margin: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Consecutive epochs without a dev improvement before stopping.
    pub patience: usize,
    /// Fraction of the main corpus held out for dev retrieval accuracy.
    pub dev_fraction: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            margin: 0.5,
            batch_size: 32,
            max_epochs: 100,
            learning_rate: 1e-3,
            seed: 0,
            patience: 5,
            dev_fraction: 0.05,
            embed_dim: 64,
            hidden_dim: 512,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch size must be at least 2 (in-batch negatives need another entry)".into(),
            ));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidArgument(
                "max_epochs and patience must be at least 1".into(),
            ));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dev fraction must be in (0, 1), got {}",
                self.dev_fraction
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("zero model dimension".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}
