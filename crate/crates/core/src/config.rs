//! JSON run configuration for the command-line tool.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_synthetic, ParallelCorpus, SyntheticTask};
use crate::error::{Error, Result};
use crate::model::train::TrainConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub task: SyntheticTask,
    /// Vocabulary size including the four special tokens.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { task: SyntheticTask::Copy, vocab_size: 20, min_len: 5, max_len: 15, train_pairs: 2000, dev_pairs: 200 }
    }
}

/// Either parallel text files or a synthetic task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub dev_source: Option<PathBuf>,
    pub dev_target: Option<PathBuf>,
    /// Pairs split off the end of the training files when no dev files are given.
    pub dev_size: usize,
    pub synthetic: Option<SyntheticData>,
    /// Minimum training count for a word to enter the vocabulary.
    pub min_freq: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Overrides both the model and the training seed when set.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_out() -> PathBuf {
    PathBuf::from(".")
}

pub struct LoadedData {
    pub train: ParallelCorpus,
    pub dev: Option<ParallelCorpus>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.gma.validate()?;
        let d = &self.data;
        let files = d.train_source.is_some() || d.train_target.is_some();
        match (&d.synthetic, files) {
            (Some(_), true) => {
                return Err(Error::Config("data: give either training files or a synthetic task, not both".into()))
            }
            (None, false) => return Err(Error::Config("data: no training data configured".into())),
            (None, true) if d.train_source.is_none() || d.train_target.is_none() => {
                return Err(Error::Config("data: train_source and train_target go together".into()))
            }
            _ => {}
        }
        if d.dev_source.is_some() != d.dev_target.is_some() {
            return Err(Error::Config("data: dev_source and dev_target go together".into()));
        }
        if let Some(s) = &d.synthetic {
            if s.min_len == 0 || s.min_len > s.max_len {
                return Err(Error::Config(format!("synthetic lengths {}..={} are invalid", s.min_len, s.max_len)));
            }
        }
        Ok(())
    }

    /// Model and training seeds after applying the top-level override.
    pub fn seeds(&self) -> (u64, u64) {
        self.seed.map_or((self.model.seed, self.train.seed), |s| (s, s))
    }

    pub fn load_data(&self) -> Result<LoadedData> {
        let d = &self.data;
        if let Some(s) = &d.synthetic {
            let (seed, _) = self.seeds();
            let train = make_synthetic(s.task, s.vocab_size, (s.min_len, s.max_len), s.train_pairs, seed)?;
            let dev = if s.dev_pairs > 0 {
                Some(make_synthetic(s.task, s.vocab_size, (s.min_len, s.max_len), s.dev_pairs, seed.wrapping_add(1))?)
            } else {
                None
            };
            return Ok(LoadedData { train, dev });
        }
        let (Some(src), Some(tgt)) = (&d.train_source, &d.train_target) else {
            return Err(Error::Config("data: no training data configured".into()));
        };
        let corpus = ParallelCorpus::load(src, tgt, None)?;
        if let (Some(ds), Some(dt)) = (&d.dev_source, &d.dev_target) {
            return Ok(LoadedData { train: corpus, dev: Some(ParallelCorpus::load(ds, dt, None)?) });
        }
        if d.dev_size > 0 {
            let (train, dev) = corpus.split_tail(d.dev_size)?;
            return Ok(LoadedData { train, dev: Some(dev) });
        }
        Ok(LoadedData { train: corpus, dev: None })
    }
}
