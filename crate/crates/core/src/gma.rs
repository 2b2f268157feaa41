//! Gaussian multi-head attention.
//!
//! Each target step `i` carries a predicted aligned source position `p_i`
//! (1-based, fractional) built from positive incremental steps. The output
//! position `g(i) = ⌊p_i + δ⌋` bounds which source words may be attended,
//! and a location prior centered on `p_i` is multiplied into the soft
//! attention and renormalized over the first `g(i)` words.
//!
//! Positions are 1-based everywhere in this module's public surface; only
//! slice indexing subtracts one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_row, CustomOp, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorVariant {
    #[default]
    Gaussian,
    Laplace,
    Linear,
    None,
}

/// How the prior width follows the aligned position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `σ = p / 2`
    #[default]
    Half,
    /// `σ = p`
    Full,
    /// `σ = p / 3`
    Third,
    /// `σ` from a second predictor head through `exp`.
    Predicted,
}

impl SigmaMode {
    /// Divisor applied to `p`, or `None` for a predicted width.
    pub fn divisor(self) -> Option<f64> {
        match self {
            SigmaMode::Half => Some(2.0),
            SigmaMode::Full => Some(1.0),
            SigmaMode::Third => Some(3.0),
            SigmaMode::Predicted => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    /// One track per (layer, head).
    AllIndependent,
    /// One track per layer, shared by its heads.
    #[default]
    ShareHeads,
    /// One track per head, predicted at the first layer and reused by all layers.
    ShareLayers,
    /// A single track for the whole decoder.
    ShareAll,
}

impl SharingMode {
    pub fn track_count(self, layers: usize, heads: usize) -> usize {
        match self {
            SharingMode::AllIndependent => layers * heads,
            SharingMode::ShareHeads => layers,
            SharingMode::ShareLayers => heads,
            SharingMode::ShareAll => 1,
        }
    }

    /// Track used by `head` of `layer`.
    pub fn track_index(self, layer: usize, head: usize, heads: usize) -> usize {
        match self {
            SharingMode::AllIndependent => layer * heads + head,
            SharingMode::ShareHeads => layer,
            SharingMode::ShareLayers => head,
            SharingMode::ShareAll => 0,
        }
    }

    /// Decoder layer whose input state feeds `track`.
    pub fn track_source_layer(self, track: usize, heads: usize) -> usize {
        match self {
            SharingMode::AllIndependent => track / heads,
            SharingMode::ShareHeads => track,
            SharingMode::ShareLayers | SharingMode::ShareAll => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// `p_i = p_{i-1} + Δp_i`, `p_0 = 1`.
    #[default]
    Incremental,
    /// `p_i = 1 + exp(·)` predicted directly.
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmaConfig {
    /// Relaxation offset in source words.
    pub delta: f64,
    pub prior: PriorVariant,
    pub sigma: SigmaMode,
    pub sharing: SharingMode,
    pub position: PositionMode,
}

impl Default for GmaConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            prior: PriorVariant::Gaussian,
            sigma: SigmaMode::Half,
            sharing: SharingMode::ShareHeads,
            position: PositionMode::Incremental,
        }
    }
}

impl GmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be a finite non-negative number, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Predicted alignment tracks for one sentence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentState {
    /// Per track, per step: `Δp_i` (or the raw prediction in absolute mode).
    pub delta_p: Vec<Vec<f64>>,
    /// Per track, per step: aligned position `p_i`.
    pub p: Vec<Vec<f64>>,
    /// Per track, per step: prior width `σ_i`.
    pub sigma: Vec<Vec<f64>>,
    /// Per track, per step: attention support bound of that track.
    pub support: Vec<Vec<usize>>,
    /// Per step: output position, the max over all tracks.
    pub g: Vec<usize>,
}

impl AlignmentState {
    pub fn steps(&self) -> usize {
        self.g.len()
    }
}

/// Attention weights of one cross-attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrices {
    pub layer: usize,
    pub head: usize,
    /// Soft attention `α`, `[I × J]`.
    pub alpha: Tensor,
    /// Normalized prior, zero beyond the support bound.
    pub prior: Tensor,
    /// Posterior attention `β`.
    pub beta: Tensor,
}

/// Scaled dot-product attention weights for a single head.
pub fn soft_attention(queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
    if !queries.is_matrix() || !keys.is_matrix() || queries.cols() != keys.cols() {
        return Err(Error::InvalidShape(format!(
            "queries {:?} and keys {:?} must be matrices with equal width",
            queries.shape(),
            keys.shape()
        )));
    }
    let (rows, cols, dk) = (queries.rows(), keys.rows(), queries.cols());
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; rows * cols];
    let mut logits = vec![0.0; cols];
    for i in 0..rows {
        for (j, l) in logits.iter_mut().enumerate() {
            *l = queries.row(i).iter().zip(keys.row(j)).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_row(&logits, &mut out[i * cols..(i + 1) * cols]);
    }
    Tensor::new(vec![rows, cols], out)
}

/// `Δp = exp(vᵀ tanh(s · W))` for a single state.
pub fn predict_incremental_step(state: &[f64], w: &Tensor, v: &[f64]) -> Result<f64> {
    if !w.is_matrix() || w.rows() != state.len() || w.cols() != v.len() {
        return Err(Error::InvalidShape(format!(
            "predictor weights {:?} do not fit state {} / output {}",
            w.shape(),
            state.len(),
            v.len()
        )));
    }
    let mut acc = 0.0;
    for (h, vh) in v.iter().enumerate() {
        let pre: f64 = state.iter().enumerate().map(|(k, s)| s * w.get(k, h)).sum();
        acc += vh * pre.tanh();
    }
    Ok(acc.exp())
}

/// Unrolls `p_i = p_{i-1} + Δp_i` from `p_0 = 1`.
pub fn aligned_positions(delta_p: &[f64]) -> Result<Vec<f64>> {
    let mut p = 1.0;
    delta_p
        .iter()
        .map(|&d| {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Contract(format!("incremental steps must be positive and finite, got {d}")));
            }
            p += d;
            Ok(p)
        })
        .collect()
}

/// Output positions `g(i) = ⌊p_i + δ⌋` for one track.
///
/// Values are at least 1 and non-decreasing. With a complete source they
/// are clamped to `source_len`; otherwise a value above `source_len` means
/// the caller has to wait for more input.
pub fn output_positions(p: &[f64], delta: f64, source_len: usize, source_complete: bool) -> Vec<usize> {
    let mut prev = 1usize;
    p.iter()
        .map(|&pi| {
            let raw = (pi + delta).floor();
            let mut g = if raw < 1.0 { 1 } else { raw as usize };
            if source_complete {
                g = g.min(source_len.max(1));
            }
            g = g.max(prev);
            prev = g;
            g
        })
        .collect()
}

/// Per-step maximum over tracks.
pub fn overall_output_positions(supports: &[Vec<usize>]) -> Vec<usize> {
    let steps = supports.first().map_or(0, Vec::len);
    (0..steps).map(|i| supports.iter().map(|s| s[i]).max().unwrap_or(1)).collect()
}

/// Expands per-track incremental steps to aligned positions for every
/// (layer, head) pair. Returns `p[layer][head]`.
pub fn share_positions(
    track_delta_p: &[Vec<f64>],
    sharing: SharingMode,
    layers: usize,
    heads: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let expected = sharing.track_count(layers, heads);
    if track_delta_p.len() != expected {
        return Err(Error::InvalidShape(format!(
            "{sharing:?} with {layers} layers and {heads} heads has {expected} tracks, got {}",
            track_delta_p.len()
        )));
    }
    let tracks: Vec<Vec<f64>> = track_delta_p.iter().map(|d| aligned_positions(d)).collect::<Result<_>>()?;
    Ok((0..layers).map(|l| (0..heads).map(|h| tracks[sharing.track_index(l, h, heads)].clone()).collect()).collect())
}

/// Log-density of the unnormalized prior at 1-based `j` and its partial
/// derivatives with respect to `p` and `σ`.
fn log_density(variant: PriorVariant, j: f64, p: f64, sigma: f64, support: usize) -> (f64, f64, f64) {
    match variant {
        PriorVariant::Gaussian => {
            let d = j - p;
            let s2 = sigma * sigma;
            (-d * d / (2.0 * s2), d / s2, d * d / (s2 * sigma))
        }
        PriorVariant::Laplace => {
            let d = j - p;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            (-d.abs() / sigma, sign / sigma, d.abs() / (sigma * sigma))
        }
        PriorVariant::Linear => {
            // Width max(g, p) + 1 keeps every in-support word positive even
            // when the support was clamped below p.
            let beyond = p > support as f64;
            let width = if beyond { p + 1.0 } else { support as f64 + 1.0 };
            let d = j - p;
            let a = d.abs();
            let u = 1.0 - a / width;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            let mut du = sign / width;
            if beyond {
                du += a / (width * width);
            }
            (u.ln(), du / u, 0.0)
        }
        PriorVariant::None => (0.0, 0.0, 0.0),
    }
}

struct PriorRow {
    values: Vec<f64>,
    dp: Vec<f64>,
    dsigma: Vec<f64>,
}

fn prior_row(p: f64, sigma: f64, support: usize, source_len: usize, variant: PriorVariant) -> Result<PriorRow> {
    if support < 1 || support > source_len {
        return Err(Error::Contract(format!("prior support {support} outside 1..={source_len}")));
    }
    if matches!(variant, PriorVariant::Gaussian | PriorVariant::Laplace) && !(sigma > 0.0) {
        return Err(Error::Contract(format!("prior width must be positive, got {sigma}")));
    }
    if !p.is_finite() {
        return Err(Error::NonFinite("aligned position".into()));
    }
    let mut values = vec![0.0; source_len];
    let mut dp = vec![0.0; source_len];
    let mut dsigma = vec![0.0; source_len];
    let mut logs = Vec::with_capacity(support);
    for j in 0..support {
        let (l, lp, ls) = log_density(variant, (j + 1) as f64, p, sigma, support);
        logs.push(l);
        dp[j] = lp;
        dsigma[j] = ls;
    }
    softmax_row(&logs, &mut values[..support]);
    Ok(PriorRow { values, dp, dsigma })
}

/// Normalized prior over source positions `1..=source_len`; exactly zero
/// beyond `support`.
pub fn prior_distribution(
    p: f64,
    sigma: f64,
    support: usize,
    source_len: usize,
    variant: PriorVariant,
) -> Result<Vec<f64>> {
    prior_row(p, sigma, support, source_len, variant).map(|r| r.values)
}

/// Renormalized product of soft attention and prior over `j ≤ support`.
pub fn posterior_attention(alpha: &[f64], prior: &[f64], support: usize) -> Result<Vec<f64>> {
    if alpha.len() != prior.len() || support > alpha.len() {
        return Err(Error::InvalidShape(format!("alpha {} / prior {} / support {support}", alpha.len(), prior.len())));
    }
    let mut beta = vec![0.0; alpha.len()];
    let mut total = 0.0;
    for j in 0..support {
        beta[j] = alpha[j] * prior[j];
        total += beta[j];
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateRow { row: 0 });
    }
    for b in beta.iter_mut().take(support) {
        *b /= total;
    }
    Ok(beta)
}

/// Context vectors `c_i = Σ_j β_ij v_j`.
pub fn gma_context(beta: &Tensor, values: &Tensor) -> Result<Tensor> {
    if !beta.is_matrix() || !values.is_matrix() || beta.cols() != values.rows() {
        return Err(Error::InvalidShape(format!(
            "beta {:?} incompatible with values {:?}",
            beta.shape(),
            values.shape()
        )));
    }
    let (rows, j_len, d) = (beta.rows(), beta.cols(), values.cols());
    let mut out = vec![0.0; rows * d];
    for i in 0..rows {
        for j in 0..j_len {
            let b = beta.get(i, j);
            if b == 0.0 {
                continue;
            }
            for k in 0..d {
                out[i * d + k] += b * values.get(j, k);
            }
        }
    }
    Tensor::new(vec![rows, d], out)
}

struct LocationPrior {
    supports: Vec<usize>,
    source_len: usize,
    variant: PriorVariant,
}

impl CustomOp for LocationPrior {
    fn name(&self) -> &str {
        "location_prior"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        if self.variant == PriorVariant::None {
            return vec![None; inputs.len()];
        }
        let p = inputs[0].data();
        let sigma = inputs.get(1).map(|t| t.data());
        let j_len = self.source_len;
        let mut gp = vec![0.0; p.len()];
        let mut gs = vec![0.0; p.len()];
        for (i, &support) in self.supports.iter().enumerate() {
            let s = sigma.map_or(1.0, |s| s[i]);
            let row = prior_row(p[i], s, support, j_len, self.variant).expect("forward pass validated the same row");
            let values = &output.data()[i * j_len..(i + 1) * j_len];
            let gr = &grad[i * j_len..(i + 1) * j_len];
            let mean: f64 = values.iter().zip(gr).map(|(v, g)| v * g).sum();
            for j in 0..support {
                let w = values[j] * (gr[j] - mean);
                gp[i] += w * row.dp[j];
                gs[i] += w * row.dsigma[j];
            }
        }
        let mut out = vec![Some(gp)];
        if sigma.is_some() {
            out.push(Some(gs));
        }
        out
    }
}

/// Differentiable `[I × J]` prior matrix from aligned positions `p` (`I`
/// values) and widths `sigma`. Supports act as a hard, non-differentiable
/// mask. With [`PriorVariant::None`] the result is a constant.
pub fn prior_matrix(
    g: &mut Graph,
    p: Var,
    sigma: Option<Var>,
    supports: &[usize],
    source_len: usize,
    variant: PriorVariant,
) -> Result<Var> {
    let pv = g.value(p).data().to_vec();
    if pv.len() != supports.len() {
        return Err(Error::InvalidShape(format!("{} positions but {} supports", pv.len(), supports.len())));
    }
    let sv = match sigma {
        Some(s) => {
            let s = g.value(s).data().to_vec();
            if s.len() != pv.len() {
                return Err(Error::InvalidShape("sigma length differs from p".into()));
            }
            s
        }
        None if matches!(variant, PriorVariant::Gaussian | PriorVariant::Laplace) => {
            return Err(Error::Contract(format!("{variant:?} prior needs a width")));
        }
        None => vec![1.0; pv.len()],
    };
    let mut data = Vec::with_capacity(pv.len() * source_len);
    for i in 0..pv.len() {
        data.extend(prior_row(pv[i], sv[i], supports[i], source_len, variant)?.values);
    }
    let out = Tensor::new(vec![pv.len(), source_len], data)?;
    let op = Box::new(LocationPrior { supports: supports.to_vec(), source_len, variant });
    if variant == PriorVariant::None {
        return Ok(g.constant(out));
    }
    let inputs: Vec<Var> = std::iter::once(p).chain(sigma).collect();
    Ok(g.custom(&inputs, out, op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn soft_attention_examples() {
        let q = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.5]]).unwrap();
        let k = Tensor::from_rows(&vec![vec![0.3, 0.7]; 4]).unwrap();
        let a = soft_attention(&q, &k).unwrap();
        for v in a.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let k1 = Tensor::from_rows(&[vec![2.0, 1.0]]).unwrap();
        assert_eq!(soft_attention(&q, &k1).unwrap().data(), &[1.0, 1.0]);

        // scalar-loop oracle on a 2×3 instance
        let q = Tensor::from_rows(&[vec![0.2, -0.4], vec![1.1, 0.3]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.5, 0.1], vec![-0.3, 0.8], vec![0.9, -0.6]]).unwrap();
        let a = soft_attention(&q, &k).unwrap();
        for i in 0..2 {
            let scores: Vec<f64> =
                (0..3).map(|j| (q.get(i, 0) * k.get(j, 0) + q.get(i, 1) * k.get(j, 1)) / 2f64.sqrt()).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                assert!((a.get(i, j) - scores[j].exp() / z).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn incremental_step_examples() {
        let s = [0.3, -1.2, 2.0];
        let w = Tensor::new(vec![3, 2], vec![0.1, -0.4, 0.7, 0.2, -0.3, 0.5]).unwrap();
        assert_eq!(predict_incremental_step(&s, &w, &[0.0, 0.0]).unwrap(), 1.0);
        let wz = Tensor::zeros(&[3, 2]);
        assert_eq!(predict_incremental_step(&s, &wz, &[3.0, -2.0]).unwrap(), 1.0);
        assert!(predict_incremental_step(&s, &w, &[1.0]).is_err());
        assert!(predict_incremental_step(&s, &w, &[5.0, -7.0]).unwrap() > 0.0);
    }

    #[test]
    fn incremental_step_gradient_matches_finite_differences() {
        let s = Tensor::new(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![0.1, -0.4, 0.7, 0.2, -0.3, 0.5]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![0.8, -0.6]).unwrap();
        let report = grad_check(
            |g, p| {
                let h = g.matmul(p[0], p[1])?;
                let h = g.tanh(h);
                let o = g.matmul(h, p[2])?;
                Ok(g.exp(o))
            },
            &[s.clone(), w.clone(), v.clone()],
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6);
        let direct = predict_incremental_step(s.data(), &w, v.data()).unwrap();
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(s), g.constant(w), g.constant(v));
        let h = g.matmul(a, b).unwrap();
        let h = g.tanh(h);
        let o = g.matmul(h, c).unwrap();
        let o = g.exp(o);
        assert!((g.value(o).item() - direct).abs() < 1e-14);
    }

    #[test]
    fn aligned_position_examples() {
        assert_eq!(aligned_positions(&[0.5, 1.0, 2.0]).unwrap(), vec![1.5, 2.5, 4.5]);
        assert_eq!(aligned_positions(&[1.0, 1.0, 1.0]).unwrap(), vec![2.0, 3.0, 4.0]);
        assert!(aligned_positions(&[1.0, 0.0]).is_err());
        assert!(aligned_positions(&[-1.0]).is_err());
        // unit steps on equal lengths: a diagonal schedule lagging by one word
        let p = aligned_positions(&[1.0; 5]).unwrap();
        assert_eq!(output_positions(&p, 0.0, 6, true), vec![2, 3, 4, 5, 6]);
    }

    #[test]
    fn output_position_examples() {
        assert_eq!(output_positions(&[1.0, 2.3, 4.9], 1.0, 10, false), vec![2, 3, 5]);
        assert_eq!(output_positions(&[5.4], 2.0, 6, true), vec![6]);
        assert_eq!(output_positions(&[1.0], 0.0, 3, false), vec![1]);
        // beyond the received prefix: wait signal when incomplete, clamp when complete
        assert_eq!(output_positions(&[3.2], 1.0, 3, false), vec![4]);
        assert_eq!(output_positions(&[3.2], 1.0, 3, true), vec![3]);
        // non-monotone input (absolute mode) is made monotone
        assert_eq!(output_positions(&[3.0, 1.5, 4.0], 0.0, 9, true), vec![3, 3, 4]);
        assert_eq!(output_positions(&[0.2], 0.0, 9, true), vec![1]);
    }

    #[test]
    fn prior_examples() {
        // σ = p/2 = 1 at p = 2
        let row = prior_distribution(2.0, 1.0, 3, 5, PriorVariant::Gaussian).unwrap();
        let e = (-0.5f64).exp();
        let z = 1.0 + 2.0 * e;
        close(&row, &[e / z, 1.0 / z, e / z, 0.0, 0.0], 1e-15);
        close(&row[..3], &[0.2741, 0.4519, 0.2741], 1e-4);

        for variant in [PriorVariant::Gaussian, PriorVariant::Laplace, PriorVariant::Linear, PriorVariant::None] {
            let row = prior_distribution(3.7, 1.85, 1, 4, variant).unwrap();
            assert_eq!(row, vec![1.0, 0.0, 0.0, 0.0]);
            // p at the middle of the support gives a symmetric row
            let row = prior_distribution(3.0, 1.5, 5, 6, variant).unwrap();
            for j in 0..5 {
                assert!((row[j] - row[4 - j]).abs() < 1e-15);
            }
            assert_eq!(row[5], 0.0);
            assert!(prior_distribution(2.0, 1.0, 0, 4, variant).is_err());
        }
        let uniform = prior_distribution(9.0, 4.5, 4, 6, PriorVariant::None).unwrap();
        close(&uniform, &[0.25, 0.25, 0.25, 0.25, 0.0, 0.0], 1e-15);
        // linear ramp with slope 1/(g+1)
        let lin = prior_distribution(2.0, 1.0, 3, 3, PriorVariant::Linear).unwrap();
        let u = [0.75, 1.0, 0.75];
        close(&lin, &u.map(|x| x / 2.5), 1e-15);
        assert!(prior_distribution(2.0, 0.0, 3, 3, PriorVariant::Gaussian).is_err());
    }

    #[test]
    fn posterior_examples() {
        let beta = posterior_attention(&[0.1, 0.2, 0.7], &[0.25, 0.5, 0.25], 3).unwrap();
        close(&beta, &[0.025 / 0.3, 0.1 / 0.3, 0.175 / 0.3], 1e-15);
        close(&beta, &[0.0833, 0.3333, 0.5833], 1e-4);

        let prior = [0.2, 0.3, 0.5, 0.0];
        let beta = posterior_attention(&[0.25; 4], &prior, 3).unwrap();
        close(&beta, &prior, 1e-15);

        let alpha = [0.1, 0.3, 0.2, 0.4];
        let beta = posterior_attention(&alpha, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0], 3).unwrap();
        close(&beta, &[1.0 / 6.0, 0.5, 1.0 / 3.0, 0.0], 1e-15);

        assert!(matches!(posterior_attention(&[0.5, 0.5], &[0.0, 0.0], 2), Err(Error::DegenerateRow { .. })));
    }

    #[test]
    fn context_examples() {
        let values = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(gma_context(&onehot, &values).unwrap().data(), &[3.0, 4.0]);

        let same = Tensor::from_rows(&vec![vec![7.0, -1.0]; 3]).unwrap();
        let beta = Tensor::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.4, 0.0]]).unwrap();
        let c = gma_context(&beta, &same).unwrap();
        close(c.data(), &[7.0, -1.0, 7.0, -1.0], 1e-14);

        let c = gma_context(&beta, &values).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let direct: f64 = (0..3).map(|j| beta.get(i, j) * values.get(j, k)).sum();
                assert!((c.get(i, k) - direct).abs() < 1e-14);
            }
        }
        assert!(gma_context(&beta, &beta).is_err());
    }

    #[test]
    fn sharing_track_counts() {
        let counts: Vec<usize> =
            [SharingMode::AllIndependent, SharingMode::ShareHeads, SharingMode::ShareLayers, SharingMode::ShareAll]
                .iter()
                .map(|m| m.track_count(6, 8))
                .collect();
        assert_eq!(counts, vec![48, 6, 8, 1]);

        let steps = vec![vec![1.0, 0.5, 2.0]];
        let a = share_positions(&steps, SharingMode::ShareAll, 1, 1).unwrap();
        let b = share_positions(&steps, SharingMode::AllIndependent, 1, 1).unwrap();
        assert_eq!(a, b);

        let per_layer = vec![vec![1.0, 1.0], vec![2.0, 0.5]];
        let p = share_positions(&per_layer, SharingMode::ShareHeads, 2, 3).unwrap();
        for layer in &p {
            assert!(layer.iter().all(|h| h == &layer[0]));
        }
        assert_eq!(p[1][2], vec![3.0, 3.5]);
        assert!(share_positions(&per_layer, SharingMode::ShareAll, 2, 3).is_err());

        let supports = vec![vec![1, 2, 4], vec![2, 2, 3]];
        assert_eq!(overall_output_positions(&supports), vec![2, 2, 4]);
    }

    fn gaussian_posterior_loss(g: &mut Graph, p: Var, alpha: Var, supports: &[usize], j_len: usize) -> Result<Var> {
        let sigma = g.scale(p, 0.5);
        let prior = prior_matrix(g, p, Some(sigma), supports, j_len, PriorVariant::Gaussian)?;
        let prod = g.mul(alpha, prior)?;
        let beta = g.normalize_rows(prod)?;
        let targets: Vec<usize> = (0..supports.len()).map(|i| i % j_len).collect();
        let weights = g.constant(Tensor::new(
            vec![supports.len(), j_len],
            (0..supports.len() * j_len).map(|k| ((k * 7) % 5) as f64 - 2.0).collect(),
        )?);
        let mixed = g.mul(beta, weights)?;
        g.cross_entropy(mixed, &targets, &vec![true; supports.len()])
    }

    #[test]
    fn prior_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for variant in [PriorVariant::Gaussian, PriorVariant::Laplace, PriorVariant::Linear] {
            for _ in 0..4 {
                let n = 4;
                let j_len = 7;
                let p: Vec<f64> = (0..n).map(|_| rng.gen_range(1.1..6.0)).collect();
                let s: Vec<f64> = (0..n).map(|_| rng.gen_range(0.4..3.0)).collect();
                // supports stay fixed while probing p, and cover p so the
                // row actually depends on it
                let supports: Vec<usize> = p.iter().map(|&pi| (pi.floor() as usize + 2).min(j_len)).collect();
                let weights: Vec<f64> = (0..n * j_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let report = grad_check(
                    |g, params| {
                        let prior = prior_matrix(g, params[0], Some(params[1]), &supports, j_len, variant)?;
                        let w = g.constant(Tensor::new(vec![n, j_len], weights.clone())?);
                        let m = g.mul(prior, w)?;
                        Ok(g.sum(m))
                    },
                    &[Tensor::vector(p.clone()), Tensor::vector(s.clone())],
                )
                .unwrap();
                assert!(report.max_rel_error < 1e-6, "{variant:?}: {:?}", report.per_param);
            }
        }
    }

    #[test]
    fn linear_prior_beyond_clamped_support_stays_positive() {
        let supports = [3usize, 3];
        let report = grad_check(
            |g, params| {
                let prior = prior_matrix(g, params[0], None, &supports, 3, PriorVariant::Linear)?;
                let w = g.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.9, -1.0])?);
                let m = g.mul(prior, w)?;
                Ok(g.sum(m))
            },
            &[Tensor::vector(vec![5.5, 9.25])],
        )
        .unwrap();
        // every in-support word lies left of p, so the normalized ramp no
        // longer moves with p
        assert!(report.max_abs_error < 1e-9);
        let row = prior_distribution(9.25, 1.0, 3, 3, PriorVariant::Linear).unwrap();
        assert!(row.iter().all(|&v| v > 0.0));
        let far = prior_distribution(40.0, 1.0, 3, 3, PriorVariant::Linear).unwrap();
        close(&row, &far, 1e-12);
    }

    #[test]
    fn posterior_through_gaussian_mean_and_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let j_len = 6;
        let supports = [2usize, 3, 5, 6];
        let p = vec![1.6, 2.4, 4.3, 5.9];
        let alpha: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let raw: Vec<f64> = (0..j_len).map(|_| rng.gen_range(0.05..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let alpha = Tensor::from_rows(&alpha).unwrap();
        let report = grad_check(
            |g, params| gaussian_posterior_loss(g, params[0], params[1], &supports, j_len),
            &[Tensor::vector(p), alpha],
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{:?}", report.per_param);
        assert!(report.autodiff[0].iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn none_prior_has_no_gradient_path() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::vector(vec![1.5, 2.5]));
        let prior = prior_matrix(&mut g, p, None, &[2, 3], 4, PriorVariant::None).unwrap();
        assert!(!g.requires_grad(prior));
        let w = g.leaf(Tensor::full(&[2, 4], 0.5));
        let m = g.mul(prior, w).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert!(g.grad(p).is_none());
        assert_eq!(g.value(prior).row(1), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn posterior_support_and_prefix_softmax(
            seed in 0u64..10_000,
            j_len in 1usize..12,
            rows in 1usize..10,
            delta in 0.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dk = 4;
            let q = random_rows(&mut rng, rows, dk);
            let k = random_rows(&mut rng, j_len, dk);
            let steps: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.2..2.5)).collect();
            let p = aligned_positions(&steps).unwrap();
            let g = output_positions(&p, delta, j_len, true);
            let alpha = soft_attention(&q, &k).unwrap();
            for i in 0..rows {
                let prior = prior_distribution(p[i], p[i] / 2.0, g[i], j_len, PriorVariant::Gaussian).unwrap();
                let beta = posterior_attention(alpha.row(i), &prior, g[i]).unwrap();
                let mass: f64 = beta[..g[i]].iter().sum();
                prop_assert!((mass - 1.0).abs() <= 1e-10);
                prop_assert!(beta[g[i]..].iter().all(|&b| b == 0.0));
                // softmax restricted to the received prefix gives the same posterior
                let kp = Tensor::new(vec![g[i], dk], k.data()[..g[i] * dk].to_vec()).unwrap();
                let qi = Tensor::new(vec![1, dk], q.row(i).to_vec()).unwrap();
                let alpha_prefix = soft_attention(&qi, &kp).unwrap();
                let beta_prefix = posterior_attention(alpha_prefix.row(0), &prior[..g[i]], g[i]).unwrap();
                for j in 0..g[i] {
                    prop_assert!((beta[j] - beta_prefix[j]).abs() <= 1e-10);
                }
            }
        }

        #[test]
        fn output_positions_monotone_in_step_and_delta(
            steps in proptest::collection::vec(0.01f64..3.0, 1..12),
            d1 in 0.0f64..3.0,
            extra in 0.0f64..3.0,
            j_len in 1usize..20,
        ) {
            let p = aligned_positions(&steps).unwrap();
            for complete in [true, false] {
                let lo = output_positions(&p, d1, j_len, complete);
                let hi = output_positions(&p, d1 + extra, j_len, complete);
                prop_assert!(lo.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b));
                prop_assert!(lo.iter().all(|&g| g >= 1));
                if complete {
                    prop_assert!(hi.iter().all(|&g| g <= j_len));
                }
            }
        }

        #[test]
        fn aligned_positions_strictly_increase(steps in proptest::collection::vec(1e-6f64..5.0, 1..20)) {
            let p = aligned_positions(&steps).unwrap();
            prop_assert!(p[0] > 1.0);
            prop_assert!(p.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
