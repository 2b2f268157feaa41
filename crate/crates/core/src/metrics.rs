//! Latency, quality and alignment metrics.
//!
//! `g` slices hold output positions per target token (1-based source
//! counts). `g(0) = 0` is implied wherever differences are taken.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SentenceAlignment;
use crate::error::{Error, Result};

fn check_trace(g: &[usize], source_len: usize, target_len: usize) -> Result<()> {
    if g.is_empty() || source_len == 0 {
        return Err(Error::Empty("latency metrics need a non-empty trace and source".into()));
    }
    if g.len() != target_len {
        return Err(Error::InvalidShape(format!("trace has {} entries for target length {target_len}", g.len())));
    }
    if let Some(&bad) = g.iter().find(|&&x| x == 0 || x > source_len) {
        return Err(Error::IndexOutOfRange { index: bad, limit: source_len });
    }
    Ok(())
}

/// Average lagging behind the ideal diagonal, summed up to the first step
/// that has read the whole source (or all steps if none does).
pub fn average_lagging(g: &[usize], source_len: usize, target_len: usize) -> Result<f64> {
    check_trace(g, source_len, target_len)?;
    let rate = source_len as f64 / target_len as f64;
    let tau = g.iter().position(|&x| x == source_len).map_or(target_len, |k| k + 1);
    let lag: f64 = g[..tau].iter().enumerate().map(|(k, &x)| x as f64 - k as f64 * rate).sum();
    Ok(lag / tau as f64)
}

/// Mean number of source words read between two writes that read anything.
pub fn consecutive_wait(g: &[usize]) -> Result<f64> {
    let mut prev = 0usize;
    let mut total = 0i64;
    let mut bursts = 0usize;
    for &x in g {
        let d = x as i64 - prev as i64;
        total += d;
        if d > 0 {
            bursts += 1;
        }
        prev = x;
    }
    if bursts == 0 {
        return Err(Error::Contract("trace never reads a source word".into()));
    }
    Ok(total as f64 / bursts as f64)
}

pub fn average_proportion(g: &[usize], source_len: usize, target_len: usize) -> Result<f64> {
    check_trace(g, source_len, target_len)?;
    let sum: usize = g.iter().sum();
    Ok(sum as f64 / (source_len * target_len) as f64)
}

/// Lagging with a non-decreasing clock `d_i = max(g(i), d_{i-1} + J/I)`,
/// `d_0 = 0`.
pub fn differentiable_average_lagging(g: &[usize], source_len: usize, target_len: usize) -> Result<f64> {
    check_trace(g, source_len, target_len)?;
    let rate = source_len as f64 / target_len as f64;
    let mut d = 0.0f64;
    let mut lag = 0.0;
    for (k, &x) in g.iter().enumerate() {
        d = (x as f64).max(d + rate);
        lag += d - k as f64 * rate;
    }
    Ok(lag / target_len as f64)
}

/// Corpus-level n-gram statistics for BLEU-4.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn collect(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<Self> {
        if hypotheses.len() != references.len() {
            return Err(Error::InvalidShape(format!(
                "{} hypotheses for {} references",
                hypotheses.len(),
                references.len()
            )));
        }
        if hypotheses.is_empty() {
            return Err(Error::Empty("BLEU needs at least one sentence".into()));
        }
        let mut s = Self::default();
        for (h, r) in hypotheses.iter().zip(references) {
            s.hyp_len += h.len();
            s.ref_len += r.len();
            for n in 1..=4 {
                let hc = ngram_counts(h, n);
                let rc = ngram_counts(r, n);
                s.totals[n - 1] += h.len().saturating_sub(n - 1);
                s.matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
            }
        }
        Ok(s)
    }

    /// Modified n-gram precisions; an empty denominator counts as 0.
    pub fn precisions(&self) -> [f64; 4] {
        std::array::from_fn(|k| if self.totals[k] == 0 { 0.0 } else { self.matches[k] as f64 / self.totals[k] as f64 })
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Score in percent, without smoothing.
    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p.contains(&0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / 4.0;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

/// Corpus BLEU-4 in percent.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    Ok(BleuStats::collect(hypotheses, references)?.score())
}

/// Links each target step `i` to the nearest integer source position of
/// `p_i`, clamped to `1..=source_len`.
pub fn predicted_alignment(p: &[f64], source_len: usize) -> SentenceAlignment {
    SentenceAlignment::from_sure(
        p.iter().enumerate().map(|(k, &pi)| ((pi.round().max(1.0) as usize).min(source_len), k + 1)),
    )
}

/// Corpus alignment error rate. Predicted possible links are ignored;
/// gold possible links extend the sure set.
pub fn aer(predicted: &[SentenceAlignment], gold: &[SentenceAlignment]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::InvalidShape(format!("{} predicted alignments for {} gold", predicted.len(), gold.len())));
    }
    let (mut a_s, mut a_p, mut a_n, mut s_n) = (0usize, 0usize, 0usize, 0usize);
    for (a, s) in predicted.iter().zip(gold) {
        let p = s.all();
        a_s += a.sure.intersection(&s.sure).count();
        a_p += a.sure.intersection(&p).count();
        a_n += a.sure.len();
        s_n += s.sure.len();
    }
    if s_n == 0 {
        return Err(Error::Empty("gold alignments contain no sure links".into()));
    }
    Ok(1.0 - (a_s + a_p) as f64 / (a_n + s_n) as f64)
}

/// Percentage of gold links `(s, i)` with `s ≤ g(i)`.
pub fn within_g_fraction(gold: &[SentenceAlignment], traces: &[Vec<usize>]) -> Result<f64> {
    if gold.len() != traces.len() {
        return Err(Error::InvalidShape(format!("{} gold alignments for {} traces", gold.len(), traces.len())));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (a, g) in gold.iter().zip(traces) {
        for (s, t) in a.all() {
            let gi = *g.get(t - 1).ok_or(Error::IndexOutOfRange { index: t, limit: g.len() })?;
            total += 1;
            if s <= gi {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Empty("no gold links".into()));
    }
    Ok(100.0 * hit as f64 / total as f64)
}

pub type Histogram = BTreeMap<i64, f64>;

fn normalize(counts: BTreeMap<i64, usize>) -> Histogram {
    let total: usize = counts.values().sum();
    counts.into_iter().map(|(k, c)| (k, c as f64 / total.max(1) as f64)).collect()
}

/// Proportions of `g(i) − g(i−1)` pooled over traces.
pub fn step_size_histogram(traces: &[Vec<usize>]) -> Histogram {
    let mut counts = BTreeMap::new();
    for g in traces {
        let mut prev = 0i64;
        for &x in g {
            *counts.entry(x as i64 - prev).or_insert(0) += 1;
            prev = x as i64;
        }
    }
    normalize(counts)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistograms {
    /// `A_i − A_{i−1}` between consecutive linked target tokens.
    pub non_monotonic: BTreeMap<i64, usize>,
    /// `max(A_i − max_{k<i} A_k, 0)`.
    pub monotonic: BTreeMap<i64, usize>,
    /// Target tokens without any gold link.
    pub unaligned: usize,
}

/// Distances between adjacent gold source positions, taking the leftmost
/// linked source word for each target token.
pub fn monotonic_distance_histogram(gold: &[SentenceAlignment], target_lens: &[usize]) -> Result<DistanceHistograms> {
    if gold.len() != target_lens.len() {
        return Err(Error::InvalidShape(format!("{} alignments for {} target lengths", gold.len(), target_lens.len())));
    }
    let mut h = DistanceHistograms::default();
    for (a, &len) in gold.iter().zip(target_lens) {
        let mut prev: Option<i64> = None;
        let mut furthest = i64::MIN;
        for slot in a.leftmost_source(len) {
            let Some(s) = slot else {
                h.unaligned += 1;
                continue;
            };
            let s = s as i64;
            if let Some(p) = prev {
                *h.non_monotonic.entry(s - p).or_insert(0) += 1;
                *h.monotonic.entry((s - furthest).max(0)).or_insert(0) += 1;
            }
            prev = Some(s);
            furthest = furthest.max(s);
        }
    }
    Ok(h)
}

/// Corpus means of the four latency metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub al: f64,
    pub ap: f64,
    pub cw: f64,
    pub dal: f64,
}

/// `traces` pairs each `g` with its source length; target length is `g.len()`.
pub fn latency_summary(traces: &[(Vec<usize>, usize)]) -> Result<LatencySummary> {
    if traces.is_empty() {
        return Err(Error::Empty("no traces".into()));
    }
    let mut s = LatencySummary::default();
    for (g, j) in traces {
        s.al += average_lagging(g, *j, g.len())?;
        s.ap += average_proportion(g, *j, g.len())?;
        s.cw += consecutive_wait(g)?;
        s.dal += differentiable_average_lagging(g, *j, g.len())?;
    }
    let n = traces.len() as f64;
    Ok(LatencySummary { al: s.al / n, ap: s.ap / n, cw: s.cw / n, dal: s.dal / n })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: f64,
    pub al: f64,
    pub ap: f64,
    pub cw: f64,
    pub dal: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub aer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub within_g_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub histograms: Option<BTreeMap<String, BTreeMap<String, f64>>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// One `key value` line per scalar field.
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        let scalars = [
            ("bleu", Some(self.bleu)),
            ("al", Some(self.al)),
            ("ap", Some(self.ap)),
            ("cw", Some(self.cw)),
            ("dal", Some(self.dal)),
            ("aer", self.aer),
            ("within_g_fraction", self.within_g_fraction),
        ];
        for (k, v) in scalars {
            if let Some(v) = v {
                let _ = writeln!(out, "{k} {v:.4}");
            }
        }
        out
    }
}

/// String-keyed copy of a histogram for JSON output.
pub fn histogram_entries<V: Copy + Into<f64>>(h: &BTreeMap<i64, V>) -> BTreeMap<String, f64> {
    h.iter().map(|(k, v)| (k.to_string(), (*v).into())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn wait_k(k: usize, j: usize, i: usize) -> Vec<usize> {
        (1..=i).map(|t| (k + t - 1).min(j)).collect()
    }

    #[test]
    fn al_cases() {
        assert_eq!(average_lagging(&[1, 2, 3], 3, 3).unwrap(), 1.0);
        assert_eq!(average_lagging(&[4, 4, 4, 4], 4, 4).unwrap(), 4.0);
        assert_eq!(average_lagging(&wait_k(3, 6, 6), 6, 6).unwrap(), 3.0);
        // never reaches J: tau falls back to I
        assert_eq!(average_lagging(&[1, 2], 4, 2).unwrap(), (1.0 + 0.0) / 2.0);
        assert!(average_lagging(&[1, 5], 4, 2).is_err());
        assert!(average_lagging(&[1], 4, 2).is_err());
    }

    #[test]
    fn cw_cases() {
        assert_eq!(consecutive_wait(&[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(consecutive_wait(&[3, 3, 3]).unwrap(), 3.0);
        assert_eq!(consecutive_wait(&[2, 2, 5, 6]).unwrap(), 2.0);
        assert!(consecutive_wait(&[]).is_err());
    }

    #[test]
    fn ap_cases() {
        assert!((average_proportion(&[1, 2, 3], 3, 3).unwrap() - 6.0 / 9.0).abs() < 1e-15);
        assert_eq!(average_proportion(&[5, 5], 5, 2).unwrap(), 1.0);
        assert_eq!(average_proportion(&[1], 1, 1).unwrap(), 1.0);
    }

    #[test]
    fn dal_cases() {
        assert_eq!(differentiable_average_lagging(&[1, 2, 3], 3, 3).unwrap(), 1.0);
        assert_eq!(differentiable_average_lagging(&[3, 3, 3], 3, 3).unwrap(), 3.0);
        assert_eq!(differentiable_average_lagging(&[7], 7, 1).unwrap(), 7.0);
    }

    /// Independent BLEU: explicit n-gram lists, clipped by linear search.
    fn oracle_bleu(h: &[Vec<String>], r: &[Vec<String>]) -> (f64, [f64; 4], f64) {
        let mut num = [0f64; 4];
        let mut den = [0f64; 4];
        let (mut c, mut rl) = (0f64, 0f64);
        for (hs, rs) in h.iter().zip(r) {
            c += hs.len() as f64;
            rl += rs.len() as f64;
            for n in 1..=4 {
                let grams = |s: &Vec<String>| -> Vec<Vec<String>> {
                    (0..(s.len() + 1).saturating_sub(n)).map(|k| s[k..k + n].to_vec()).collect()
                };
                let hg = grams(hs);
                let mut rg = grams(rs);
                den[n - 1] += hg.len() as f64;
                for gram in hg {
                    if let Some(pos) = rg.iter().position(|x| *x == gram) {
                        rg.remove(pos);
                        num[n - 1] += 1.0;
                    }
                }
            }
        }
        let p: [f64; 4] = std::array::from_fn(|k| if den[k] > 0.0 { num[k] / den[k] } else { 0.0 });
        let bp = if c > rl { 1.0 } else { (1.0 - rl / c).exp() };
        let score = if p.contains(&0.0) {
            0.0
        } else {
            100.0 * bp * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp()
        };
        (score, p, bp)
    }

    #[test]
    fn bleu_cases() {
        let h = vec![words("a b c d e"), words("x y z w")];
        assert!((bleu(&h, &h).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(bleu(&[words("a b")], &[words("c d")]).unwrap(), 0.0);
        assert!(bleu(&[], &[]).is_err());

        let hyp = [words("the cat sat")];
        let reference = [words("the cat sat down")];
        let stats = BleuStats::collect(&hyp, &reference).unwrap();
        assert!((stats.brevity_penalty() - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-15);
        assert_eq!(stats.precisions(), [1.0, 1.0, 1.0, 0.0]);
        // no 4-grams in the hypothesis and no smoothing
        assert_eq!(stats.score(), 0.0);
        let (score, p, bp) = oracle_bleu(&hyp, &reference);
        assert_eq!((stats.score(), stats.precisions(), stats.brevity_penalty()), (score, p, bp));

        // nonzero case with clipping and brevity
        let hyp = vec![words("the the cat sat on the mat"), words("a b c d e f")];
        let reference = vec![words("the cat sat on the mat today"), words("a b c d e f g h")];
        let ours = BleuStats::collect(&hyp, &reference).unwrap();
        let (score, p, bp) = oracle_bleu(&hyp, &reference);
        assert!(score > 0.0);
        assert!((ours.score() - score).abs() < 1e-12);
        assert_eq!(ours.precisions(), p);
        assert!((ours.brevity_penalty() - bp).abs() < 1e-15);
    }

    #[test]
    fn aer_cases() {
        let g = vec![SentenceAlignment::from_sure([(1, 1), (2, 2)])];
        assert_eq!(aer(&g, &g).unwrap(), 0.0);
        let d = vec![SentenceAlignment::from_sure([(3, 1), (1, 2)])];
        assert_eq!(aer(&d, &g).unwrap(), 1.0);
        let half = vec![SentenceAlignment::from_sure([(1, 1), (1, 2)])];
        assert_eq!(aer(&half, &g).unwrap(), 0.5);
        assert!(aer(&g, &[SentenceAlignment::default()]).is_err());

        let mut with_possible = g[0].clone();
        with_possible.possible.insert((1, 2));
        assert_eq!(aer(&half, &[with_possible]).unwrap(), 1.0 - 3.0 / 4.0);
    }

    #[test]
    fn predicted_links_round_and_clamp() {
        let a = predicted_alignment(&[1.4, 2.5, 9.0, 0.2], 4);
        assert_eq!(a.sure.iter().copied().collect::<Vec<_>>(), vec![(1, 1), (1, 4), (3, 2), (4, 3)]);
    }

    #[test]
    fn within_g_cases() {
        let diag = |n: usize| SentenceAlignment::from_sure((1..=n).map(|i| (i, i)));
        assert_eq!(within_g_fraction(&[diag(4)], &[vec![4, 4, 4, 4]]).unwrap(), 100.0);
        assert_eq!(within_g_fraction(&[diag(4)], &[vec![1, 2, 3, 4]]).unwrap(), 100.0);
        // diagonal+1 with g(i) = i: links (i+1, i) for i+1 ≤ 5 all miss
        let shifted = SentenceAlignment::from_sure((1..=4).map(|i| (i + 1, i)));
        assert_eq!(within_g_fraction(std::slice::from_ref(&shifted), &[vec![1, 2, 3, 4]]).unwrap(), 0.0);
        assert_eq!(within_g_fraction(&[shifted], &[vec![2, 2, 3, 5]]).unwrap(), 50.0);
        assert!(within_g_fraction(&[diag(4)], &[vec![1, 2]]).is_err());
    }

    #[test]
    fn step_size_cases() {
        let h = step_size_histogram(&[vec![1, 2, 3]]);
        assert_eq!(h, BTreeMap::from([(1, 1.0)]));
        // wait-3 on a long source with a short target, plus clamping
        let h = step_size_histogram(&[wait_k(3, 40, 6), wait_k(3, 4, 5)]);
        let keys: Vec<i64> = h.keys().copied().collect();
        assert_eq!(keys, vec![0, 1, 3]);

        let traces = vec![vec![2, 2, 5], vec![1, 3, 4, 4]];
        let pooled = step_size_histogram(&traces);
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for t in &traces {
            let mut prev = 0;
            for &x in t {
                *counts.entry(x as i64 - prev).or_default() += 1;
                prev = x as i64;
            }
        }
        for (k, c) in counts {
            assert!((pooled[&k] - c as f64 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn distance_cases() {
        let diag = SentenceAlignment::from_sure((1..=4).map(|i| (i, i)));
        let h = monotonic_distance_histogram(&[diag], &[4]).unwrap();
        assert_eq!(h.non_monotonic, BTreeMap::from([(1, 3)]));
        assert_eq!(h.monotonic, BTreeMap::from([(1, 3)]));

        let a = SentenceAlignment::from_sure([(3, 1), (1, 2), (4, 3)]);
        let h = monotonic_distance_histogram(&[a], &[3]).unwrap();
        assert_eq!(h.non_monotonic, BTreeMap::from([(-2, 1), (3, 1)]));
        assert_eq!(h.monotonic, BTreeMap::from([(0, 1), (1, 1)]));

        let rev = SentenceAlignment::from_sure([(3, 1), (2, 2), (1, 3)]);
        let h = monotonic_distance_histogram(&[rev], &[3]).unwrap();
        assert_eq!(h.monotonic, BTreeMap::from([(0, 2)]));

        let gap = SentenceAlignment::from_sure([(1, 1), (2, 3)]);
        let h = monotonic_distance_histogram(&[gap], &[3]).unwrap();
        assert_eq!(h.unaligned, 1);
        assert_eq!(h.non_monotonic, BTreeMap::from([(1, 1)]));
    }

    #[test]
    fn report_serialization() {
        let r = MetricsReport { bleu: 100.0, al: 1.0, ap: 0.5, cw: 1.0, dal: 1.0, ..Default::default() };
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(v.get("aer").is_none());
        assert_eq!(v["bleu"], 100.0);
        assert!(r.to_key_value().starts_with("bleu 100.0000\n"));
    }

    fn monotone_trace() -> impl Strategy<Value = (Vec<usize>, usize)> {
        (1usize..15, 1usize..15).prop_flat_map(|(j, i)| {
            (proptest::collection::vec(1usize..=j, i), Just(j)).prop_map(|(mut g, j)| {
                g.sort_unstable();
                (g, j)
            })
        })
    }

    proptest! {
        #[test]
        fn al_of_wait_k_is_k(j in 1usize..40, k_raw in 1usize..40) {
            let k = 1 + (k_raw - 1) % j;
            let g = wait_k(k, j, j);
            prop_assert_eq!(average_lagging(&g, j, j).unwrap(), k as f64);
        }

        #[test]
        fn latency_invariants((g, j) in monotone_trace()) {
            let i = g.len();
            let cw = consecutive_wait(&g).unwrap();
            let bursts = std::iter::once(g[0]).chain(g.windows(2).map(|w| w[1] - w[0])).filter(|&d| d > 0).count();
            prop_assert!((cw * bursts as f64 - *g.last().unwrap() as f64).abs() < 1e-9);
            prop_assert!(cw >= 1.0);
            let unit = g[0] == 1 && g.windows(2).all(|w| w[1] - w[0] <= 1);
            prop_assert_eq!(cw == 1.0, unit);

            let ap = average_proportion(&g, j, i).unwrap();
            prop_assert!(ap > 0.0 && ap <= 1.0);
            prop_assert_eq!(ap == 1.0, g.iter().all(|&x| x == j));

            let dal = differentiable_average_lagging(&g, j, i).unwrap();
            prop_assert!(dal >= 0.0);
            let reaches_at_end = g.iter().position(|&x| x == j).is_none_or(|k| k + 1 == i);
            if reaches_at_end {
                let al = average_lagging(&g, j, i).unwrap();
                prop_assert!(dal >= al - 1e-9);
            }
        }

        #[test]
        fn aer_symmetric_on_sure_sets(
            a in proptest::collection::btree_set((1usize..6, 1usize..6), 1..10),
            b in proptest::collection::btree_set((1usize..6, 1usize..6), 1..10),
        ) {
            let a = vec![SentenceAlignment::from_sure(a)];
            let b = vec![SentenceAlignment::from_sure(b)];
            prop_assert_eq!(aer(&a, &a).unwrap(), 0.0);
            let (x, y) = (aer(&a, &b).unwrap(), aer(&b, &a).unwrap());
            prop_assert!((x - y).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&x));
        }

        #[test]
        fn monotonic_buckets_non_negative(links in proptest::collection::vec(1usize..9, 1..12)) {
            let a = SentenceAlignment::from_sure(links.iter().enumerate().map(|(t, &s)| (s, t + 1)));
            let h = monotonic_distance_histogram(&[a], &[links.len()]).unwrap();
            prop_assert!(h.monotonic.keys().all(|&k| k >= 0));
            prop_assert_eq!(h.monotonic.values().sum::<usize>(), links.len() - 1);
        }
    }
}
