//! Corpora, vocabularies, gold alignments, synthetic tasks and batching.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

pub type Sentence = Vec<String>;

pub fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_freq` times. Ids are assigned by
    /// descending frequency, ties broken lexicographically.
    pub fn build(sentences: &[Sentence], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        if sentences.iter().all(Vec::is_empty) {
            return Err(Error::Empty("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in sentences.iter().flatten() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> =
            counts.into_iter().filter(|(t, c)| *c >= min_freq && !SPECIALS.contains(t)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let tokens =
            SPECIALS.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t.to_owned())).collect();
        Self::from_tokens(tokens, min_freq)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::VocabMismatch("token list must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index, min_freq })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    /// Maps ids back to tokens, dropping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> Sentence {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK]).to_owned())
            .collect()
    }
}

/// Word alignment links of one sentence pair as 1-based `(source, target)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SentenceAlignment {
    pub sure: BTreeSet<(usize, usize)>,
    pub possible: BTreeSet<(usize, usize)>,
}

impl SentenceAlignment {
    pub fn from_sure(links: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self { sure: links.into_iter().collect(), possible: BTreeSet::new() }
    }

    /// Sure and possible links together.
    pub fn all(&self) -> BTreeSet<(usize, usize)> {
        self.sure.union(&self.possible).copied().collect()
    }

    /// Leftmost linked source position for each target position `1..=target_len`.
    pub fn leftmost_source(&self, target_len: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; target_len];
        for (s, t) in self.all() {
            if (1..=target_len).contains(&t) {
                let slot = &mut out[t - 1];
                *slot = Some(slot.map_or(s, |cur: usize| cur.min(s)));
            }
        }
        out
    }

    pub fn check_bounds(&self, source_len: usize, target_len: usize) -> Result<()> {
        for &(s, t) in self.sure.iter().chain(&self.possible) {
            if s == 0 || s > source_len {
                return Err(Error::IndexOutOfRange { index: s, limit: source_len });
            }
            if t == 0 || t > target_len {
                return Err(Error::IndexOutOfRange { index: t, limit: target_len });
            }
        }
        Ok(())
    }
}

pub type AlignmentSet = Vec<SentenceAlignment>;

/// Parses Pharaoh text: per line, `s-t` (sure) or `s?t` (possible) pairs,
/// 0-based in the text.
pub fn parse_alignments(text: &str, origin: &Path) -> Result<AlignmentSet> {
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let mut a = SentenceAlignment::default();
            for item in line.split_whitespace() {
                let (sep, possible) = match (item.find('-'), item.find('?')) {
                    (Some(i), None) => (i, false),
                    (None, Some(i)) => (i, true),
                    _ => {
                        return Err(Error::Parse {
                            path: origin.display().to_string(),
                            line: n + 1,
                            message: format!("expected s-t pair, got {item:?}"),
                        })
                    }
                };
                let parse = |s: &str| {
                    s.parse::<usize>().map_err(|_| Error::Parse {
                        path: origin.display().to_string(),
                        line: n + 1,
                        message: format!("non-numeric index in {item:?}"),
                    })
                };
                let link = (parse(&item[..sep])? + 1, parse(&item[sep + 1..])? + 1);
                if possible {
                    a.possible.insert(link);
                } else {
                    a.sure.insert(link);
                }
            }
            Ok(a)
        })
        .collect()
}

pub fn load_alignments(path: &Path) -> Result<AlignmentSet> {
    parse_alignments(&read_text(path)?, path)
}

pub fn format_alignments(set: &[SentenceAlignment]) -> String {
    let mut out = String::new();
    for a in set {
        let items: Vec<String> = a
            .sure
            .iter()
            .map(|(s, t)| format!("{}-{}", s - 1, t - 1))
            .chain(a.possible.iter().map(|(s, t)| format!("{}?{}", s - 1, t - 1)))
            .collect();
        let _ = writeln!(out, "{}", items.join(" "));
    }
    out
}

pub fn write_alignments(path: &Path, set: &[SentenceAlignment]) -> Result<()> {
    fs::write(path, format_alignments(set))?;
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

pub fn read_sentences(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read_text(path)?.lines().map(tokenize).collect())
}

pub fn write_sentences(path: &Path, sentences: &[Sentence]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        let _ = writeln!(out, "{}", s.join(" "));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub source: Vec<Sentence>,
    pub target: Vec<Sentence>,
    pub alignments: Option<AlignmentSet>,
}

impl ParallelCorpus {
    pub fn new(source: Vec<Sentence>, target: Vec<Sentence>, alignments: Option<AlignmentSet>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::InvalidShape(format!(
                "{} source sentences but {} target sentences",
                source.len(),
                target.len()
            )));
        }
        if source.is_empty() {
            return Err(Error::Empty("corpus has no sentences".into()));
        }
        if let Some(n) = source.iter().zip(&target).position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::Empty(format!("sentence pair {} is empty", n + 1)));
        }
        if let Some(a) = &alignments {
            if a.len() != source.len() {
                return Err(Error::InvalidShape(format!("{} alignment lines for {} sentences", a.len(), source.len())));
            }
            for ((al, s), t) in a.iter().zip(&source).zip(&target) {
                al.check_bounds(s.len(), t.len())?;
            }
        }
        Ok(Self { source, target, alignments })
    }

    pub fn load(source: &Path, target: &Path, alignments: Option<&Path>) -> Result<Self> {
        let a = alignments.map(load_alignments).transpose()?;
        Self::new(read_sentences(source)?, read_sentences(target)?, a)
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(&self, n: usize) -> Result<(Self, Self)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!("cannot hold out {n} of {} sentences", self.len())));
        }
        let cut = self.len() - n;
        let part = |r: std::ops::Range<usize>| {
            Self::new(
                self.source[r.clone()].to_vec(),
                self.target[r.clone()].to_vec(),
                self.alignments.as_ref().map(|a| a[r].to_vec()),
            )
        };
        Ok((part(0..cut)?, part(cut..self.len())?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticTask {
    Copy,
    /// Target `i` repeats source `min(i + d, J)`.
    ShiftedCopy {
        d: usize,
    },
    /// Each window of `w` consecutive source words is reversed.
    LocalReorder {
        w: usize,
    },
}

impl SyntheticTask {
    /// 1-based source position feeding target position `i` (1-based).
    fn source_of(self, i: usize, len: usize) -> usize {
        match self {
            SyntheticTask::Copy => i,
            SyntheticTask::ShiftedCopy { d } => (i + d).min(len),
            SyntheticTask::LocalReorder { w } => {
                let start = (i - 1) / w * w;
                let end = (start + w).min(len);
                start + end - i + 1
            }
        }
    }
}

pub fn synthetic_token(k: usize) -> String {
    format!("w{k}")
}

/// Generates `count` pairs with lengths drawn uniformly from `lengths` and
/// content tokens from `vocab_size - 4` symbols, with exact gold links.
pub fn make_synthetic(
    task: SyntheticTask,
    vocab_size: usize,
    lengths: (usize, usize),
    count: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    if vocab_size <= SPECIALS.len() {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} leaves no room beyond the {} specials",
            SPECIALS.len()
        )));
    }
    let (lo, hi) = lengths;
    if lo == 0 || lo > hi || count == 0 {
        return Err(Error::Config(format!("invalid synthetic ranges: lengths {lo}..={hi}, count {count}")));
    }
    match task {
        SyntheticTask::ShiftedCopy { d: 0 } | SyntheticTask::LocalReorder { w: 0 } => {
            return Err(Error::Config(format!("{task:?} needs a positive parameter")))
        }
        _ => {}
    }
    let content = vocab_size - SPECIALS.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut source = Vec::with_capacity(count);
    let mut target = Vec::with_capacity(count);
    let mut align = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(lo..=hi);
        let src: Sentence = (0..len).map(|_| synthetic_token(rng.gen_range(0..content))).collect();
        let links: Vec<(usize, usize)> = (1..=len).map(|i| (task.source_of(i, len), i)).collect();
        target.push(links.iter().map(|&(s, _)| src[s - 1].clone()).collect());
        source.push(src);
        align.push(SentenceAlignment::from_sure(links));
    }
    ParallelCorpus::new(source, target, Some(align))
}

/// Padded id batch. Targets are framed as `BOS y` (input) and `y EOS`
/// (output); masks are true on real tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub source: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<bool>>,
    pub target_in: Vec<Vec<usize>>,
    pub target_out: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Unpadded `(source, target)` ids of row `r`, target without framing.
    pub fn pair(&self, r: usize) -> (Vec<usize>, Vec<usize>) {
        let strip = |ids: &[usize], mask: &[bool]| -> Vec<usize> {
            ids.iter().zip(mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect()
        };
        let src = strip(&self.source[r], &self.source_mask[r]);
        let mut tgt = strip(&self.target_out[r], &self.target_mask[r]);
        tgt.pop();
        (src, tgt)
    }
}

fn pad(rows: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    rows.iter()
        .map(|r| {
            let mut ids = r.clone();
            ids.resize(width, PAD);
            let mask = (0..width).map(|k| k < r.len()).collect();
            (ids, mask)
        })
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batches {
    pub batches: Vec<Batch>,
    /// Pairs dropped for exceeding `max_positions`.
    pub skipped: usize,
}

/// Shuffles with `seed` and groups into padded batches. Pairs whose source
/// or framed target would exceed `max_positions` are skipped.
pub fn batch(
    corpus: &ParallelCorpus,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    batch_size: usize,
    max_positions: usize,
    seed: u64,
) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..corpus.len())
        .filter(|&k| corpus.source[k].len() <= max_positions && corpus.target[k].len() < max_positions)
        .collect();
    let skipped = corpus.len() - order.len();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let batches = order
        .chunks(batch_size)
        .map(|chunk| {
            let src: Vec<Vec<usize>> = chunk.iter().map(|&k| source_vocab.encode(&corpus.source[k])).collect();
            let tgt: Vec<Vec<usize>> = chunk.iter().map(|&k| target_vocab.encode(&corpus.target[k])).collect();
            let tin: Vec<Vec<usize>> =
                tgt.iter().map(|t| std::iter::once(BOS).chain(t.iter().copied()).collect()).collect();
            let tout: Vec<Vec<usize>> =
                tgt.iter().map(|t| t.iter().copied().chain(std::iter::once(EOS)).collect()).collect();
            let (source, source_mask) = pad(&src);
            let (target_in, _) = pad(&tin);
            let (target_out, target_mask) = pad(&tout);
            Batch { indices: chunk.to_vec(), source, source_mask, target_in, target_out, target_mask }
        })
        .collect();
    Ok(Batches { batches, skipped })
}
