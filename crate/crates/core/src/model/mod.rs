//! Pre-LN transformer encoder/decoder with GMA in every decoder
//! cross-attention layer.

pub mod checkpoint;
pub mod train;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::gma::{
    output_positions, overall_output_positions, prior_matrix, AlignmentState, AttentionMatrices, GmaConfig,
    PositionMode, SigmaMode,
};
use crate::numerics::{causal_mask, Graph, Tensor, Var};
use crate::policy::{StepOutcome, StreamingDecoder};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub d_model: usize,
    /// Per-head query/key/value width.
    pub d_k: usize,
    pub d_ff: usize,
    /// Hidden width of the position predictor.
    pub d_predictor: usize,
    /// Decoder layers; the encoder uses the same depth.
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub seed: u64,
    pub encoder_causal: bool,
    pub gma: GmaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            source_vocab: 20,
            target_vocab: 20,
            d_model: 32,
            d_k: 16,
            d_ff: 64,
            d_predictor: 16,
            layers: 2,
            heads: 2,
            max_positions: 64,
            dropout: 0.0,
            seed: 1,
            encoder_causal: true,
            gma: GmaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("source_vocab", self.source_vocab),
            ("target_vocab", self.target_vocab),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("d_ff", self.d_ff),
            ("d_predictor", self.d_predictor),
            ("layers", self.layers),
            ("heads", self.heads),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        if self.target_vocab <= EOS || self.source_vocab <= EOS {
            return Err(Error::Config("vocabularies must include the special tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.gma.validate()
    }

    pub fn tracks(&self) -> usize {
        self.gma.sharing.track_count(self.layers, self.heads)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (k, (name, t)) in entries.iter().enumerate() {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
            if index.insert(name.clone(), k).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
            }
        }
        Ok(Self { entries, index })
    }

    /// Random initialization with `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let hk = config.heads * config.d_k;
        let mut e: Vec<(String, Tensor)> = Vec::new();
        let xavier = |r: usize, c: usize| (6.0 / (r + c) as f64).sqrt();
        let emb_bound = (3.0 / d as f64).sqrt();
        e.push(("src_emb".into(), uniform(&mut rng, &[config.source_vocab, d], emb_bound)?));
        e.push(("tgt_emb".into(), uniform(&mut rng, &[config.target_vocab, d], emb_bound)?));
        let attention = |e: &mut Vec<(String, Tensor)>, rng: &mut ChaCha8Rng, prefix: &str| -> Result<()> {
            for w in ["wq", "wk", "wv"] {
                e.push((format!("{prefix}.{w}"), uniform(rng, &[d, hk], xavier(d, hk))?));
            }
            e.push((format!("{prefix}.wo"), uniform(rng, &[hk, d], xavier(hk, d))?));
            Ok(())
        };
        let norm = |e: &mut Vec<(String, Tensor)>, prefix: &str| {
            e.push((format!("{prefix}.g"), Tensor::full(&[d], 1.0)));
            e.push((format!("{prefix}.b"), Tensor::zeros(&[d])));
        };
        let ffn = |e: &mut Vec<(String, Tensor)>, rng: &mut ChaCha8Rng, prefix: &str| -> Result<()> {
            let f = config.d_ff;
            e.push((format!("{prefix}.w1"), uniform(rng, &[d, f], xavier(d, f))?));
            e.push((format!("{prefix}.b1"), Tensor::zeros(&[f])));
            e.push((format!("{prefix}.w2"), uniform(rng, &[f, d], xavier(f, d))?));
            e.push((format!("{prefix}.b2"), Tensor::zeros(&[d])));
            Ok(())
        };
        for l in 0..config.layers {
            norm(&mut e, &format!("enc.{l}.ln1"));
            attention(&mut e, &mut rng, &format!("enc.{l}.self"))?;
            norm(&mut e, &format!("enc.{l}.ln2"));
            ffn(&mut e, &mut rng, &format!("enc.{l}.ffn"))?;
        }
        norm(&mut e, "enc.ln");
        for l in 0..config.layers {
            norm(&mut e, &format!("dec.{l}.ln1"));
            attention(&mut e, &mut rng, &format!("dec.{l}.self"))?;
            norm(&mut e, &format!("dec.{l}.ln2"));
            attention(&mut e, &mut rng, &format!("dec.{l}.cross"))?;
            norm(&mut e, &format!("dec.{l}.ln3"));
            ffn(&mut e, &mut rng, &format!("dec.{l}.ffn"))?;
        }
        norm(&mut e, "dec.ln");
        e.push(("out.w".into(), uniform(&mut rng, &[d, config.target_vocab], xavier(d, config.target_vocab))?));
        e.push(("out.b".into(), Tensor::zeros(&[config.target_vocab])));
        let dp = config.d_predictor;
        for t in 0..config.tracks() {
            e.push((format!("gma.{t}.w"), uniform(&mut rng, &[d, dp], xavier(d, dp))?));
            // zero output weights start every track at Δp = 1 (and σ = 1 when predicted)
            e.push((format!("gma.{t}.v"), Tensor::zeros(&[dp, 1])));
            if config.gma.sigma == SigmaMode::Predicted {
                e.push((format!("gma.{t}.vs"), Tensor::zeros(&[dp, 1])));
            }
        }
        Self::from_entries(e)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&k| &self.entries[k].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn tensor_mut(&mut self, k: usize) -> &mut Tensor {
        &mut self.entries[k].1
    }

    /// Replaces the tensor called `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let k = self.position(name).ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        if value.shape() != self.entries[k].1.shape() {
            return Err(Error::InvalidShape(format!(
                "{name} has shape {:?}, got {:?}",
                self.entries[k].1.shape(),
                value.shape()
            )));
        }
        self.entries[k].1 = value;
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn sinusoid_table(positions: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; positions * d];
    for pos in 0..positions {
        for k in 0..d {
            let rate = 10000f64.powf((2 * (k / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + k] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![positions, d], data).expect("non-empty table")
}

/// Teacher-forced forward results for one sentence pair.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Mean cross-entropy over `y` and the final EOS.
    pub loss: f64,
    /// `[(|y| + 1) × V]`; row `i` predicts `y_{i+1}` (EOS last).
    pub logits: Tensor,
    pub state: AlignmentState,
    pub attention: Vec<AttentionMatrices>,
    /// Per layer, per step: furthest aligned position among that layer's tracks.
    pub layer_p: Vec<Vec<f64>>,
    /// Argmax predictions matching the reference, out of `|y| + 1`.
    pub correct: usize,
}

pub(crate) struct Pass {
    pub logits: Var,
    pub state: AlignmentState,
    pub attention: Vec<AttentionMatrices>,
    pub layer_p: Vec<Vec<f64>>,
}

pub(crate) enum PassOutcome {
    Ready(Pass),
    Wait { required: usize },
}

struct Track {
    p: Var,
    sigma: Var,
    prior: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let reference = ModelParams::init(&config)?;
        if reference.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, got {}",
                reference.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.entries().iter().zip(params.entries()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {n} {:?} does not match expected {rn} {:?}",
                    t.shape(),
                    rt.shape()
                )));
            }
        }
        let positions = sinusoid_table(config.max_positions, config.d_model);
        Ok(Self { config, params, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn delta(&self) -> f64 {
        self.config.gma.delta
    }

    pub fn set_delta(&mut self, delta: f64) -> Result<()> {
        let mut gma = self.config.gma;
        gma.delta = delta;
        gma.validate()?;
        self.config.gma = gma;
        Ok(())
    }

    /// Adds every parameter to `g` as a differentiable leaf, in storage order.
    pub fn param_vars(&self, g: &mut Graph) -> Vec<Var> {
        self.params.entries().iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self.params.position(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn check_ids(ids: &[usize], vocab: usize, side: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Empty(format!("{side} sequence")));
        }
        match ids.iter().find(|&&t| t >= vocab) {
            Some(&t) => Err(Error::IndexOutOfRange { index: t, limit: vocab }),
            None => Ok(()),
        }
    }

    fn check_length(&self, n: usize) -> Result<()> {
        if n > self.config.max_positions {
            return Err(Error::IndexOutOfRange { index: n, limit: self.config.max_positions });
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, vars: &[Var], table: &str, ids: &[usize]) -> Result<Var> {
        self.check_length(ids.len())?;
        let e = g.gather_rows(self.var(vars, table), ids)?;
        let e = g.scale(e, (self.config.d_model as f64).sqrt());
        let pe = Tensor::new(
            vec![ids.len(), self.config.d_model],
            self.positions.data()[..ids.len() * self.config.d_model].to_vec(),
        )?;
        let pe = g.constant(pe);
        g.add(e, pe)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let shape = g.value(x).shape().to_vec();
                let n = g.value(x).numel();
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
                let m = g.constant(Tensor::new(shape, mask)?);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    fn norm(&self, g: &mut Graph, vars: &[Var], x: Var, prefix: &str) -> Result<Var> {
        let gain = self.var(vars, &format!("{prefix}.g"));
        let bias = self.var(vars, &format!("{prefix}.b"));
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn heads(&self, g: &mut Graph, x: Var, w: Var) -> Result<Vec<Var>> {
        let proj = g.matmul(x, w)?;
        let dk = self.config.d_k;
        (0..self.config.heads).map(|h| g.slice_cols(proj, h * dk, (h + 1) * dk)).collect()
    }

    fn scores(&self, g: &mut Graph, q: Var, k: Var) -> Result<Var> {
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        Ok(g.scale(s, 1.0 / (self.config.d_k as f64).sqrt()))
    }

    fn self_attention(&self, g: &mut Graph, vars: &[Var], x: Var, prefix: &str, causal: bool) -> Result<Var> {
        let n = g.value(x).rows();
        let q = self.heads(g, x, self.var(vars, &format!("{prefix}.wq")))?;
        let k = self.heads(g, x, self.var(vars, &format!("{prefix}.wk")))?;
        let v = self.heads(g, x, self.var(vars, &format!("{prefix}.wv")))?;
        let mask = causal.then(|| g.constant(causal_mask(n)));
        let mut ctx = Vec::with_capacity(q.len());
        for h in 0..q.len() {
            let mut s = self.scores(g, q[h], k[h])?;
            if let Some(m) = mask {
                s = g.add(s, m)?;
            }
            let a = g.softmax_lastdim(s);
            ctx.push(g.matmul(a, v[h])?);
        }
        let c = g.concat_cols(&ctx)?;
        g.matmul(c, self.var(vars, &format!("{prefix}.wo")))
    }

    fn ffn(&self, g: &mut Graph, vars: &[Var], x: Var, prefix: &str) -> Result<Var> {
        let h = g.matmul(x, self.var(vars, &format!("{prefix}.w1")))?;
        let h = g.add(h, self.var(vars, &format!("{prefix}.b1")))?;
        let h = g.relu(h);
        let o = g.matmul(h, self.var(vars, &format!("{prefix}.w2")))?;
        g.add(o, self.var(vars, &format!("{prefix}.b2")))
    }

    fn encoder(&self, g: &mut Graph, vars: &[Var], src: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        Self::check_ids(src, self.config.source_vocab, "source")?;
        let mut x = self.embed(g, vars, "src_emb", src)?;
        for l in 0..self.config.layers {
            let a = self.norm(g, vars, x, &format!("enc.{l}.ln1"))?;
            let a = self.self_attention(g, vars, a, &format!("enc.{l}.self"), self.config.encoder_causal)?;
            let a = self.dropout(g, a, rng.as_deref_mut())?;
            x = g.add(x, a)?;
            let f = self.norm(g, vars, x, &format!("enc.{l}.ln2"))?;
            let f = self.ffn(g, vars, f, &format!("enc.{l}.ffn"))?;
            let f = self.dropout(g, f, rng.as_deref_mut())?;
            x = g.add(x, f)?;
        }
        self.norm(g, vars, x, "enc.ln")
    }

    /// Source hidden states for a (possibly partial) source.
    pub fn encode(&self, src: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.entries().iter().map(|(_, t)| g.constant(t.clone())).collect();
        let z = self.encoder(&mut g, &vars, src, None)?;
        Ok(g.value(z).clone())
    }

    fn predict_track(&self, g: &mut Graph, vars: &[Var], t: usize, input: Var) -> Result<(Var, Var, Vec<f64>)> {
        let n = g.value(input).rows();
        let h = g.matmul(input, self.var(vars, &format!("gma.{t}.w")))?;
        let h = g.tanh(h);
        let o = g.matmul(h, self.var(vars, &format!("gma.{t}.v")))?;
        let o = g.reshape(o, vec![1, n])?;
        let step = g.exp(o);
        let raw = g.value(step).data().to_vec();
        let p = match self.config.gma.position {
            PositionMode::Incremental => g.cumsum_lastdim(step),
            PositionMode::Absolute => step,
        };
        let p = g.add_scalar(p, 1.0);
        let p = g.reshape(p, vec![n])?;
        let sigma = match self.config.gma.sigma.divisor() {
            Some(d) => g.scale(p, 1.0 / d),
            None => {
                let s = g.matmul(h, self.var(vars, &format!("gma.{t}.vs")))?;
                let s = g.reshape(s, vec![n])?;
                g.exp(s)
            }
        };
        Ok((p, sigma, raw))
    }

    /// Full forward pass. With an incomplete source, stops with
    /// [`PassOutcome::Wait`] as soon as some track needs more source words
    /// than `src` holds.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn run(
        &self,
        g: &mut Graph,
        vars: &[Var],
        src: &[usize],
        complete: bool,
        tgt_in: &[usize],
        delta: f64,
        record: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<PassOutcome> {
        let cfg = &self.config;
        let (layers, heads) = (cfg.layers, cfg.heads);
        let sharing = cfg.gma.sharing;
        let z = self.encoder(g, vars, src, rng.as_deref_mut())?;
        Self::check_ids(tgt_in, cfg.target_vocab, "target")?;
        let j_len = src.len();
        let n = tgt_in.len();

        let tracks_total = cfg.tracks();
        let mut tracks: Vec<Option<Track>> = (0..tracks_total).map(|_| None).collect();
        let mut state = AlignmentState {
            delta_p: vec![Vec::new(); tracks_total],
            p: vec![Vec::new(); tracks_total],
            sigma: vec![Vec::new(); tracks_total],
            support: vec![Vec::new(); tracks_total],
            g: Vec::new(),
        };
        let mut attention = Vec::new();

        let mut u = self.embed(g, vars, "tgt_emb", tgt_in)?;
        for l in 0..layers {
            let a = self.norm(g, vars, u, &format!("dec.{l}.ln1"))?;

            let mut required = 0;
            for t in 0..tracks_total {
                if sharing.track_source_layer(t, heads) != l {
                    continue;
                }
                let (p, sigma, raw) = self.predict_track(g, vars, t, a)?;
                let pv = g.value(p).data().to_vec();
                let support = output_positions(&pv, delta, j_len, complete);
                required = required.max(*support.last().expect("non-empty target"));
                state.delta_p[t] = raw;
                state.p[t] = pv;
                state.sigma[t] = g.value(sigma).data().to_vec();
                state.support[t] = support;
                tracks[t] = Some(Track { p, sigma, prior: None });
            }
            if !complete && required > j_len {
                return Ok(PassOutcome::Wait { required });
            }

            let s = self.self_attention(g, vars, a, &format!("dec.{l}.self"), true)?;
            let s = self.dropout(g, s, rng.as_deref_mut())?;
            u = g.add(u, s)?;

            let b = self.norm(g, vars, u, &format!("dec.{l}.ln2"))?;
            let prefix = format!("dec.{l}.cross");
            let q = self.heads(g, b, self.var(vars, &format!("{prefix}.wq")))?;
            let k = self.heads(g, z, self.var(vars, &format!("{prefix}.wk")))?;
            let v = self.heads(g, z, self.var(vars, &format!("{prefix}.wv")))?;
            let mut ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let t = sharing.track_index(l, h, heads);
                let track = tracks[t].as_mut().expect("track predicted at or below this layer");
                let prior = match track.prior {
                    Some(pr) => pr,
                    None => {
                        let pr = prior_matrix(g, track.p, Some(track.sigma), &state.support[t], j_len, cfg.gma.prior)?;
                        track.prior = Some(pr);
                        pr
                    }
                };
                let s = self.scores(g, q[h], k[h])?;
                let alpha = g.softmax_lastdim(s);
                let joint = g.mul(alpha, prior)?;
                let beta = g.normalize_rows(joint)?;
                if record {
                    attention.push(AttentionMatrices {
                        layer: l,
                        head: h,
                        alpha: g.value(alpha).clone(),
                        prior: g.value(prior).clone(),
                        beta: g.value(beta).clone(),
                    });
                }
                ctx.push(g.matmul(beta, v[h])?);
            }
            let c = g.concat_cols(&ctx)?;
            let c = g.matmul(c, self.var(vars, &format!("{prefix}.wo")))?;
            let c = self.dropout(g, c, rng.as_deref_mut())?;
            u = g.add(u, c)?;

            let f = self.norm(g, vars, u, &format!("dec.{l}.ln3"))?;
            let f = self.ffn(g, vars, f, &format!("dec.{l}.ffn"))?;
            let f = self.dropout(g, f, rng.as_deref_mut())?;
            u = g.add(u, f)?;
        }
        let u = self.norm(g, vars, u, "dec.ln")?;
        let logits = g.matmul(u, self.var(vars, "out.w"))?;
        let logits = g.add(logits, self.var(vars, "out.b"))?;

        state.g = overall_output_positions(&state.support);
        let layer_p = (0..layers)
            .map(|l| {
                (0..n)
                    .map(|i| {
                        (0..heads)
                            .map(|h| state.p[sharing.track_index(l, h, heads)][i])
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect()
            })
            .collect();
        Ok(PassOutcome::Ready(Pass { logits, state, attention, layer_p }))
    }

    fn framed(tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut tin = Vec::with_capacity(tgt.len() + 1);
        tin.push(BOS);
        tin.extend_from_slice(tgt);
        let mut tout = tgt.to_vec();
        tout.push(EOS);
        (tin, tout)
    }

    /// Teacher-forced loss of one pair inside an existing graph. Returns the
    /// mean token loss and the number of predicted tokens.
    pub fn sentence_loss(
        &self,
        g: &mut Graph,
        vars: &[Var],
        src: &[usize],
        tgt: &[usize],
        delta: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, usize)> {
        let (tin, tout) = Self::framed(tgt);
        let PassOutcome::Ready(pass) = self.run(g, vars, src, true, &tin, delta, false, rng)? else {
            unreachable!("a complete source never waits")
        };
        let loss = g.cross_entropy(pass.logits, &tout, &vec![true; tout.len()])?;
        Ok((loss, tout.len()))
    }

    /// Token-weighted mean loss over `pairs` of `(source, target)` ids.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        vars: &[Var],
        pairs: &[(Vec<usize>, Vec<usize>)],
        delta: f64,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if pairs.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let total: usize = pairs.iter().map(|(_, t)| t.len() + 1).sum();
        let mut acc: Option<Var> = None;
        for (src, tgt) in pairs {
            let (loss, count) = self.sentence_loss(g, vars, src, tgt, delta, rng.as_deref_mut())?;
            let weighted = g.scale(loss, count as f64 / total as f64);
            acc = Some(match acc {
                Some(a) => g.add(a, weighted)?,
                None => weighted,
            });
        }
        Ok(acc.expect("non-empty batch"))
    }

    /// Teacher-forced pass with the configured relaxation offset.
    pub fn decode_train(&self, src: &[usize], tgt: &[usize]) -> Result<TrainOutput> {
        self.decode_train_delta(src, tgt, self.delta())
    }

    pub fn decode_train_delta(&self, src: &[usize], tgt: &[usize], delta: f64) -> Result<TrainOutput> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.entries().iter().map(|(_, t)| g.constant(t.clone())).collect();
        let (tin, tout) = Self::framed(tgt);
        let PassOutcome::Ready(pass) = self.run(&mut g, &vars, src, true, &tin, delta, true, None)? else {
            unreachable!("a complete source never waits")
        };
        let loss = g.cross_entropy(pass.logits, &tout, &vec![true; tout.len()])?;
        let logits = g.value(pass.logits).clone();
        let correct = (0..tout.len()).filter(|&i| argmax(logits.row(i)) == tout[i]).count();
        Ok(TrainOutput {
            loss: g.value(loss).item(),
            logits,
            state: pass.state,
            attention: pass.attention,
            layer_p: pass.layer_p,
            correct,
        })
    }

    /// One incremental decoding step for the token after `target_prefix`
    /// given the source words received so far.
    pub fn decode_step(
        &self,
        source: &[usize],
        source_complete: bool,
        target_prefix: &[usize],
        delta: f64,
    ) -> Result<StepOutcome> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.entries().iter().map(|(_, t)| g.constant(t.clone())).collect();
        let mut tin = Vec::with_capacity(target_prefix.len() + 1);
        tin.push(BOS);
        tin.extend_from_slice(target_prefix);
        match self.run(&mut g, &vars, source, source_complete, &tin, delta, false, None)? {
            PassOutcome::Wait { required } => Ok(StepOutcome::Wait { required }),
            PassOutcome::Ready(pass) => {
                let last = tin.len() - 1;
                Ok(StepOutcome::Ready {
                    logits: g.value(pass.logits).row(last).to_vec(),
                    g: pass.state.g[last],
                    layer_p: pass.layer_p.iter().map(|p| p[last]).collect(),
                })
            }
        }
    }
}

impl StreamingDecoder for Model {
    fn step(
        &self,
        source: &[usize],
        source_complete: bool,
        target_prefix: &[usize],
        delta: f64,
    ) -> Result<StepOutcome> {
        self.decode_step(source, source_complete, target_prefix, delta)
    }

    fn max_source_len(&self) -> usize {
        self.config.max_positions
    }

    fn max_target_len(&self) -> usize {
        self.config.max_positions
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}
