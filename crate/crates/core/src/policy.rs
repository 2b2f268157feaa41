//! Streaming READ/WRITE policy driven by predicted output positions.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::EOS;
use crate::error::{Error, Result};
use crate::model::argmax;

/// Result of asking a decoder for the next target token.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    /// At least `required` source words are needed before writing.
    Wait { required: usize },
    Ready {
        logits: Vec<f64>,
        /// Output position of the token, at most the received count.
        g: usize,
        /// Per layer aligned position of the token.
        layer_p: Vec<f64>,
    },
}

/// Anything that can predict the next target token from a source prefix.
pub trait StreamingDecoder {
    fn step(&self, source: &[usize], source_complete: bool, target_prefix: &[usize], delta: f64)
        -> Result<StepOutcome>;

    /// Longest source the decoder accepts.
    fn max_source_len(&self) -> usize {
        usize::MAX
    }

    /// Most tokens (EOS included) the decoder can write for one sentence.
    fn max_target_len(&self) -> usize {
        usize::MAX
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Read,
    Write,
}

impl Action {
    pub fn symbol(self) -> char {
        match self {
            Action::Read => 'R',
            Action::Write => 'W',
        }
    }
}

pub fn format_actions(actions: &[Action]) -> String {
    actions.iter().map(|a| a.symbol()).collect()
}

pub fn parse_actions(s: &str) -> Result<Vec<Action>> {
    s.chars()
        .map(|c| match c {
            'R' => Ok(Action::Read),
            'W' => Ok(Action::Write),
            other => Err(Error::Contract(format!("unknown action symbol {other:?}"))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PolicyTrace {
    /// Source words received when each target token was written.
    pub g: Vec<usize>,
    pub actions: Vec<Action>,
    pub source_len: usize,
    /// Number of writes, the final EOS included.
    pub target_len: usize,
    /// Decoding stopped at the length limit before EOS.
    pub truncated: bool,
}

impl PolicyTrace {
    /// Trace that reads exactly up to `g(i)` before each write.
    pub fn from_g(g: &[usize], source_len: usize) -> Self {
        let mut actions = Vec::with_capacity(g.len() + source_len);
        let mut read = 0;
        for &gi in g {
            while read < gi {
                actions.push(Action::Read);
                read += 1;
            }
            actions.push(Action::Write);
        }
        Self { g: g.to_vec(), actions, source_len, target_len: g.len(), truncated: false }
    }

    pub fn action_string(&self) -> String {
        format_actions(&self.actions)
    }

    /// Output positions of real target tokens: the EOS write is dropped
    /// unless it is the only write.
    pub fn content_g(&self) -> &[usize] {
        if self.truncated || self.g.len() <= 1 {
            &self.g
        } else {
            &self.g[..self.g.len() - 1]
        }
    }
}

/// `g` reconstructed by counting READs before each WRITE.
pub fn replay(actions: &[Action]) -> Vec<usize> {
    let mut read = 0;
    let mut g = Vec::new();
    for a in actions {
        match a {
            Action::Read => read += 1,
            Action::Write => g.push(read),
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TraceViolation {
    Empty,
    ZeroPosition { index: usize },
    NotMonotone { index: usize },
    ExceedsSource { index: usize, g: usize, source_len: usize },
    WriteCount { writes: usize, entries: usize, target_len: usize },
    TooManyReads { reads: usize, source_len: usize },
    Causality { index: usize, reads: usize, g: usize },
    MissingFinalWrite,
}

impl fmt::Display for TraceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceViolation::Empty => write!(f, "trace has no writes"),
            TraceViolation::ZeroPosition { index } => write!(f, "g({}) is 0", index + 1),
            TraceViolation::NotMonotone { index } => write!(f, "g decreases at step {}", index + 1),
            TraceViolation::ExceedsSource { index, g, source_len } => {
                write!(f, "g({}) = {g} exceeds source length {source_len}", index + 1)
            }
            TraceViolation::WriteCount { writes, entries, target_len } => {
                write!(f, "{writes} writes, {entries} g entries and target length {target_len} disagree")
            }
            TraceViolation::TooManyReads { reads, source_len } => {
                write!(f, "{reads} reads from a source of {source_len} words")
            }
            TraceViolation::Causality { index, reads, g } => {
                write!(f, "token {} written after {reads} reads but g = {g}", index + 1)
            }
            TraceViolation::MissingFinalWrite => write!(f, "trace does not end with a write"),
        }
    }
}

impl std::error::Error for TraceViolation {}

/// Returns the first violated trace invariant.
pub fn validate_trace(trace: &PolicyTrace) -> std::result::Result<(), TraceViolation> {
    if trace.g.is_empty() {
        return Err(TraceViolation::Empty);
    }
    for (k, &gi) in trace.g.iter().enumerate() {
        if gi == 0 {
            return Err(TraceViolation::ZeroPosition { index: k });
        }
        if k > 0 && gi < trace.g[k - 1] {
            return Err(TraceViolation::NotMonotone { index: k });
        }
        if gi > trace.source_len {
            return Err(TraceViolation::ExceedsSource { index: k, g: gi, source_len: trace.source_len });
        }
    }
    let writes = trace.actions.iter().filter(|a| **a == Action::Write).count();
    if writes != trace.g.len() || writes != trace.target_len {
        return Err(TraceViolation::WriteCount { writes, entries: trace.g.len(), target_len: trace.target_len });
    }
    let reads = trace.actions.len() - writes;
    if reads > trace.source_len {
        return Err(TraceViolation::TooManyReads { reads, source_len: trace.source_len });
    }
    for (k, (r, &gi)) in replay(&trace.actions).into_iter().zip(&trace.g).enumerate() {
        if r != gi {
            return Err(TraceViolation::Causality { index: k, reads: r, g: gi });
        }
    }
    if trace.actions.last() != Some(&Action::Write) {
        return Err(TraceViolation::MissingFinalWrite);
    }
    Ok(())
}

/// Wait-k schedule `g(i) = min(k + i − 1, J)` for `I` writes.
pub fn wait_k_trace(k: usize, source_len: usize, target_len: usize) -> Result<PolicyTrace> {
    if k == 0 || source_len == 0 || target_len == 0 {
        return Err(Error::Config(format!("wait-k needs k, J and I positive (k={k}, J={source_len}, I={target_len})")));
    }
    let g: Vec<usize> = (1..=target_len).map(|i| (k + i - 1).min(source_len)).collect();
    Ok(PolicyTrace::from_g(&g, source_len))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutput {
    /// Written tokens without the final EOS.
    pub hypothesis: Vec<usize>,
    pub trace: PolicyTrace,
    /// Per written token, per layer aligned position.
    pub layer_p: Vec<Vec<f64>>,
}

/// Greedy simultaneous decoding over a source that arrives one token at a
/// time. Without `max_len` the limit is `2·J + 10` once `J` is known; it
/// never exceeds the decoder's own target capacity.
pub fn simulate_streaming<D, S>(decoder: &D, source: S, delta: f64, max_len: Option<usize>) -> Result<StreamOutput>
where
    D: StreamingDecoder + ?Sized,
    S: IntoIterator<Item = usize>,
{
    let mut stream = source.into_iter();
    let mut received = Vec::new();
    let mut complete = false;
    let mut actions = Vec::new();
    let mut read = |received: &mut Vec<usize>, actions: &mut Vec<Action>, complete: &mut bool| match stream.next() {
        Some(t) => {
            received.push(t);
            actions.push(Action::Read);
            true
        }
        None => {
            *complete = true;
            false
        }
    };
    if !read(&mut received, &mut actions, &mut complete) {
        return Err(Error::Empty("source stream".into()));
    }
    let hard_cap = decoder.max_source_len().saturating_mul(2).saturating_add(10);

    let mut hypothesis = Vec::new();
    let mut g = Vec::new();
    let mut layer_p = Vec::new();
    let mut truncated = false;
    loop {
        let limit = match (max_len, complete) {
            (Some(m), _) => m,
            (None, true) => 2 * received.len() + 10,
            (None, false) => hard_cap,
        }
        .min(decoder.max_target_len());
        if g.len() >= limit {
            truncated = true;
            break;
        }
        match decoder.step(&received, complete, &hypothesis, delta)? {
            StepOutcome::Wait { required } => {
                if complete || required <= received.len() {
                    return Err(Error::Contract(format!(
                        "decoder waits for {required} words with {} received (complete: {complete})",
                        received.len()
                    )));
                }
                while received.len() < required && read(&mut received, &mut actions, &mut complete) {}
            }
            StepOutcome::Ready { logits, g: gi, layer_p: lp } => {
                if gi > received.len() {
                    return Err(Error::Contract(format!(
                        "decoder wrote with g = {gi} but only {} words were received",
                        received.len()
                    )));
                }
                let token = argmax(&logits);
                g.push(received.len());
                actions.push(Action::Write);
                layer_p.push(lp);
                if token == EOS {
                    break;
                }
                hypothesis.push(token);
            }
        }
    }
    let target_len = g.len();
    // Latency is measured against the full source even when decoding stops early.
    let source_len = received.len() + stream.count();
    Ok(StreamOutput { hypothesis, trace: PolicyTrace { g, actions, source_len, target_len, truncated }, layer_p })
}

/// Serializable per-sentence trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub hypothesis: String,
    pub g: Vec<usize>,
    pub actions: String,
    pub source_len: usize,
    #[serde(default)]
    pub truncated: bool,
    /// Only EOS was written.
    #[serde(default)]
    pub empty: bool,
    #[serde(default)]
    pub layer_p: Vec<Vec<f64>>,
}

impl TraceRecord {
    pub fn new(hypothesis: String, output: &StreamOutput) -> Self {
        Self {
            empty: output.hypothesis.is_empty(),
            hypothesis,
            g: output.trace.g.clone(),
            actions: output.trace.action_string(),
            source_len: output.trace.source_len,
            truncated: output.trace.truncated,
            layer_p: output.layer_p.clone(),
        }
    }

    pub fn to_trace(&self) -> Result<PolicyTrace> {
        Ok(PolicyTrace {
            g: self.g.clone(),
            actions: parse_actions(&self.actions)?,
            source_len: self.source_len,
            target_len: self.g.len(),
            truncated: self.truncated,
        })
    }
}
