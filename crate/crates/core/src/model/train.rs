//! Adam training loop and corpus-level evaluation helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, Model, ModelParams};
use crate::data::{batch, ParallelCorpus, Sentence, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{bleu, latency_summary, LatencySummary};
use crate::numerics::Graph;
use crate::policy::{simulate_streaming, StreamOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Linear learning-rate warmup in optimizer steps.
    pub warmup_steps: usize,
    /// Seed for shuffling and dropout.
    pub seed: u64,
    /// Dev sentences decoded in streaming mode after each epoch; 0 skips.
    pub dev_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
            warmup_steps: 100,
            seed: 1,
            dev_limit: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }

    fn rate(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, beta1, beta2, eps }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, grad) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = params.tensor_mut(k).data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One row of the learning-curve log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Token-weighted mean training loss over the epoch.
    pub loss: f64,
    pub dev_bleu: Option<f64>,
    pub dev_al: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "step,loss,dev_bleu,dev_al";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        format!("{},{:.6},{},{}", self.step, self.loss, opt(self.dev_bleu), opt(self.dev_al))
    }
}

pub struct TrainData<'a> {
    pub corpus: &'a ParallelCorpus,
    pub source_vocab: &'a Vocabulary,
    pub target_vocab: &'a Vocabulary,
    pub dev: Option<&'a ParallelCorpus>,
}

/// Trains `model` in place, calling `on_epoch` after each epoch.
pub fn train(
    model: &mut Model,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.source_vocab.len() != model.config().source_vocab || data.target_vocab.len() != model.config().target_vocab
    {
        return Err(Error::VocabMismatch(format!(
            "model expects {}/{} tokens, vocabularies have {}/{}",
            model.config().source_vocab,
            model.config().target_vocab,
            data.source_vocab.len(),
            data.target_vocab.len()
        )));
    }
    let mut adam = Adam::new(model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let delta = model.delta();
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let batches = batch(
            data.corpus,
            data.source_vocab,
            data.target_vocab,
            cfg.batch_size,
            model.config().max_positions,
            cfg.seed.wrapping_add(epoch as u64),
        )?;
        if batches.batches.is_empty() {
            return Err(Error::Empty("every training pair exceeds max_positions".into()));
        }
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for b in &batches.batches {
            let pairs: Vec<(Vec<usize>, Vec<usize>)> = (0..b.len()).map(|r| b.pair(r)).collect();
            let count: usize = pairs.iter().map(|(_, t)| t.len() + 1).sum();
            let mut g = Graph::new();
            let vars = model.param_vars(&mut g);
            let loss = model.batch_loss(&mut g, &vars, &pairs, delta, Some(&mut dropout_rng))?;
            let value = g.value(loss).item();
            step += 1;
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            g.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(model.params().entries())
                .map(|(v, (_, t))| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();
            let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence { step, loss: norm });
            }
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grads.iter_mut().flatten().for_each(|x| *x *= s);
            }
            adam.step(model.params_mut(), &grads, cfg.rate(step));
            loss_sum += value * count as f64;
            tokens += count;
        }
        let (dev_bleu, dev_al) = match data.dev {
            Some(dev) if cfg.dev_limit > 0 => {
                let n = cfg.dev_limit.min(dev.len());
                let sub = ParallelCorpus::new(dev.source[..n].to_vec(), dev.target[..n].to_vec(), None)?;
                let eval = stream_corpus(model, &sub, data.source_vocab, data.target_vocab, delta)?;
                (Some(eval.bleu), Some(eval.latency.al))
            }
            _ => (None, None),
        };
        let entry = EpochLog { epoch, step, loss: loss_sum / tokens as f64, dev_bleu, dev_al };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct StreamEval {
    pub hypotheses: Vec<Sentence>,
    pub outputs: Vec<StreamOutput>,
    pub bleu: f64,
    pub latency: LatencySummary,
}

/// Streams every source sentence through the policy and scores the result.
pub fn stream_corpus(
    model: &Model,
    corpus: &ParallelCorpus,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    delta: f64,
) -> Result<StreamEval> {
    let mut hypotheses = Vec::with_capacity(corpus.len());
    let mut outputs = Vec::with_capacity(corpus.len());
    for src in &corpus.source {
        let ids = source_vocab.encode(src);
        let out = simulate_streaming(model, ids, delta, None)?;
        hypotheses.push(target_vocab.decode(&out.hypothesis));
        outputs.push(out);
    }
    let bleu = bleu(&hypotheses, &corpus.target)?;
    let traces: Vec<(Vec<usize>, usize)> =
        outputs.iter().map(|o| (o.trace.content_g().to_vec(), o.trace.source_len)).collect();
    let latency = latency_summary(&traces)?;
    Ok(StreamEval { hypotheses, outputs, bleu, latency })
}

/// Teacher-forced statistics over a corpus.
#[derive(Clone, Debug)]
pub struct TeacherForcedEval {
    /// Fraction of target tokens (EOS included) predicted by argmax.
    pub accuracy: f64,
    pub loss: f64,
    /// Per sentence: output positions of the target tokens (EOS excluded).
    pub g: Vec<Vec<usize>>,
    /// Per sentence, per layer, per target token: aligned position.
    pub layer_p: Vec<Vec<Vec<f64>>>,
    /// Per sentence, per track, per target token: aligned position.
    pub track_p: Vec<Vec<Vec<f64>>>,
    pub source_lens: Vec<usize>,
}

pub fn teacher_forced(
    model: &Model,
    corpus: &ParallelCorpus,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    delta: f64,
) -> Result<TeacherForcedEval> {
    let (mut correct, mut total, mut loss) = (0usize, 0usize, 0.0);
    let mut eval = TeacherForcedEval {
        accuracy: 0.0,
        loss: 0.0,
        g: Vec::with_capacity(corpus.len()),
        layer_p: Vec::with_capacity(corpus.len()),
        track_p: Vec::with_capacity(corpus.len()),
        source_lens: Vec::with_capacity(corpus.len()),
    };
    for (src, tgt) in corpus.source.iter().zip(&corpus.target) {
        let (s, t) = (source_vocab.encode(src), target_vocab.encode(tgt));
        let out = model.decode_train_delta(&s, &t, delta)?;
        let n = t.len();
        correct += out.correct;
        total += n + 1;
        loss += out.loss * (n + 1) as f64;
        eval.g.push(out.state.g[..n].to_vec());
        eval.layer_p.push(out.layer_p.iter().map(|p| p[..n].to_vec()).collect());
        eval.track_p.push(out.state.p.iter().map(|p| p[..n].to_vec()).collect());
        eval.source_lens.push(s.len());
    }
    eval.accuracy = correct as f64 / total as f64;
    eval.loss = loss / total as f64;
    Ok(eval)
}

/// Greedy next-token accuracy helper for logits rows.
pub fn token_accuracy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let hits = logits.iter().zip(targets).filter(|(row, &t)| argmax(row) == t).count();
    hits as f64 / targets.len().max(1) as f64
}
