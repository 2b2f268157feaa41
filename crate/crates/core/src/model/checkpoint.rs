//! Versioned binary checkpoint: magic, version, JSON header with config and
//! vocabularies, then named parameter arrays as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"GMASIMT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    source_vocab: Vec<String>,
    target_vocab: Vec<String>,
    min_freq: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn new(model: Model, source_vocab: Vocabulary, target_vocab: Vocabulary) -> Result<Self> {
        let cfg = model.config();
        if cfg.source_vocab != source_vocab.len() || cfg.target_vocab != target_vocab.len() {
            return Err(Error::VocabMismatch(format!(
                "model sized for {}/{} tokens, vocabularies have {}/{}",
                cfg.source_vocab,
                cfg.target_vocab,
                source_vocab.len(),
                target_vocab.len()
            )));
        }
        Ok(Self { model, source_vocab, target_vocab })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config().clone(),
            source_vocab: self.source_vocab.tokens().to_vec(),
            target_vocab: self.target_vocab.tokens().to_vec(),
            min_freq: self.source_vocab.min_freq(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let entries = self.model.params().entries();
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.len()?;
        let header: Header = serde_json::from_slice(r.take(n)?)?;
        let count = r.len()?;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.len()?;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let ndim = r.len()?;
            let shape: Vec<usize> = (0..ndim).map(|_| r.len()).collect::<Result<_>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let source_vocab = Vocabulary::from_tokens(header.source_vocab, header.min_freq)?;
        let target_vocab = Vocabulary::from_tokens(header.target_vocab, header.min_freq)?;
        let model = Model::from_parts(header.config, ModelParams::from_entries(entries)?)?;
        Self::new(model, source_vocab, target_vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}
