//! Contrastive probing of attention heads: negative-response mining,
//! compensated question activations, probe-pair assembly, logistic probes
//! and head ranking. Also the MSE and KL head selectors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LccError, Result};
use crate::linalg::{cosine_similarity, dot};
use crate::lossdiff::compensate_activation;
use crate::model::{
    forward_batch, logit_lens, ActivationTrace, Adam, CaptureRequest, HeadSite, ModelParams,
    PositionPolicy, Real, Site,
};

/// Maps a response to a fixed-width vector for similarity search.
pub trait ResponseEncoder {
    fn encode(&self, response: &[u32]) -> Result<Vec<f64>>;
}

/// Mean of the model's token-embedding rows over the response tokens.
pub struct MeanEmbeddingEncoder<'a, F> {
    params: &'a ModelParams<F>,
}

impl<'a, F: Real> MeanEmbeddingEncoder<'a, F> {
    pub fn new(params: &'a ModelParams<F>) -> Self {
        Self { params }
    }
}

impl<F: Real> ResponseEncoder for MeanEmbeddingEncoder<'_, F> {
    fn encode(&self, response: &[u32]) -> Result<Vec<f64>> {
        encode_response(response, self.params)
    }
}

pub fn encode_response<F: Real>(response: &[u32], params: &ModelParams<F>) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Err(LccError::InvalidArgument("cannot encode an empty response".into()));
    }
    let (v, d) = (params.config.vocab_size, params.config.d_model);
    let mut out = vec![0.0; d];
    for &t in response {
        if t as usize >= v {
            return Err(LccError::TokenOutOfRange { token: t, vocab_size: v });
        }
        let row = &params.tok_emb[t as usize * d..(t as usize + 1) * d];
        out.iter_mut().zip(row).for_each(|(o, x)| *o += x.as_f64());
    }
    let n = response.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveTuple {
    pub question: Vec<u32>,
    pub r_plus: Vec<u32>,
    pub r_minus: Vec<u32>,
    /// Index of the sample whose response became `r_minus`.
    pub provenance: usize,
}

/// Pairs each sample with the pool response most similar to its own
/// correct response, skipping responses textually equal to it. The pool is
/// the samples' own responses; ties go to the lowest pool index.
pub fn build_contrastive_dataset(
    samples: &[(Vec<u32>, Vec<u32>)],
    encoder: &dyn ResponseEncoder,
) -> Result<Vec<ContrastiveTuple>> {
    let enc: Vec<Vec<f64>> = samples.iter().map(|(_, r)| encoder.encode(r)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(samples.len());
    for (i, (q, r)) in samples.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, (_, cand)) in samples.iter().enumerate() {
            if cand == r {
                continue;
            }
            let sim = cosine_similarity(&enc[i], &enc[j])?.value;
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((j, sim));
            }
        }
        let (j, _) = best.ok_or_else(|| {
            LccError::InvalidArgument(format!("sample {i}: every response in the pool equals its own"))
        })?;
        out.push(ContrastiveTuple {
            question: q.clone(),
            r_plus: r.clone(),
            r_minus: samples[j].1.clone(),
            provenance: j,
        });
    }
    Ok(out)
}

/// `z_c^q = z_p^q + c`.
pub fn edit_question_activation(z_p_q: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    compensate_activation(z_p_q, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    pub m: Vec<f64>,
    pub label: u8,
}

/// Head activations needed to build probe pairs for any head: the pruned
/// model at the last question token and the dense model at the last token
/// of both full sequences.
#[derive(Debug, Clone)]
pub struct ProbeActivations {
    pub pruned_question: ActivationTrace,
    pub dense_plus: ActivationTrace,
    pub dense_minus: ActivationTrace,
    /// Tuples dropped because a sequence exceeded `max_seq_len`.
    pub skipped: usize,
}

pub fn collect_probe_activations<F: Real>(
    tuples: &[ContrastiveTuple],
    dense: &ModelParams<F>,
    pruned: &ModelParams<F>,
    heads: &[HeadSite],
) -> Result<ProbeActivations> {
    if dense.config != pruned.config {
        return Err(LccError::InvalidArgument(
            "dense and pruned models have different configurations".into(),
        ));
    }
    for t in tuples {
        if t.r_plus == t.r_minus {
            return Err(LccError::InvalidArgument("tuple with r_minus equal to r_plus".into()));
        }
    }
    let max = dense.config.max_seq_len;
    let join = |q: &[u32], r: &[u32]| [q, r].concat();
    let kept: Vec<&ContrastiveTuple> = tuples
        .iter()
        .filter(|t| t.question.len() + t.r_plus.len().max(t.r_minus.len()) <= max)
        .collect();
    let req = CaptureRequest::heads(heads.iter().copied(), PositionPolicy::Last);
    let questions: Vec<Vec<u32>> = kept.iter().map(|t| t.question.clone()).collect();
    let plus: Vec<Vec<u32>> = kept.iter().map(|t| join(&t.question, &t.r_plus)).collect();
    let minus: Vec<Vec<u32>> = kept.iter().map(|t| join(&t.question, &t.r_minus)).collect();
    let capture = |p: &ModelParams<F>, seqs: &[Vec<u32>]| -> Result<ActivationTrace> {
        Ok(forward_batch(p, seqs, Some(&req))?.1.expect("capture requested"))
    };
    Ok(ProbeActivations {
        pruned_question: capture(pruned, &questions)?,
        dense_plus: capture(dense, &plus)?,
        dense_minus: capture(dense, &minus)?,
        skipped: tuples.len() - kept.len(),
    })
}

impl ProbeActivations {
    /// `m⁺ = [z_c^q ∥ z_d^{q+r⁺}]` (label 1) and `m⁻ = [z_c^q ∥ z_d^{q+r⁻}]`
    /// (label 0) for every tuple, with `z_c^q` the pruned activation edited
    /// by `c`.
    pub fn pairs(&self, head: HeadSite, c: &[f64]) -> Result<Vec<ProbePair>> {
        let site = Site::from(head);
        let (q, p, m) = (
            self.pruned_question.get(site)?,
            self.dense_plus.get(site)?,
            self.dense_minus.get(site)?,
        );
        let mut out = Vec::with_capacity(2 * q.rows());
        for n in 0..q.rows() {
            let zc = edit_question_activation(q.row(n), c)?;
            out.push(ProbePair {
                m: [zc.as_slice(), p.row(n)].concat(),
                label: 1,
            });
            out.push(ProbePair {
                m: [zc.as_slice(), m.row(n)].concat(),
                label: 0,
            });
        }
        Ok(out)
    }
}

/// Probe pairs for one head; returns the pairs and the number of skipped
/// tuples.
pub fn build_probe_pairs<F: Real>(
    tuples: &[ContrastiveTuple],
    dense: &ModelParams<F>,
    pruned: &ModelParams<F>,
    head: HeadSite,
    c: &[f64],
) -> Result<(Vec<ProbePair>, usize)> {
    let acts = collect_probe_activations(tuples, dense, pruned, &[head])?;
    Ok((acts.pairs(head, c)?, acts.skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeHyper {
    pub lr: f64,
    pub epochs: usize,
    pub train_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            epochs: 100,
            train_fraction: 0.7,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub site: HeadSite,
    pub accuracy: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trains a logistic probe `σ(w·m + b)` with binary cross-entropy and Adam
/// on a seeded train split; accuracy is measured on the held-out split.
pub fn train_probe(site: HeadSite, pairs: &[ProbePair], hyper: &ProbeHyper) -> Result<ProbeRecord> {
    if pairs.len() < 4 {
        return Err(LccError::InvalidArgument(format!("{} probe pairs; need at least 4", pairs.len())));
    }
    if pairs.iter().all(|p| p.label == pairs[0].label) {
        return Err(LccError::InvalidArgument("probe pairs carry a single label".into()));
    }
    if !(hyper.train_fraction > 0.0 && hyper.train_fraction < 1.0) || hyper.batch_size == 0 {
        return Err(LccError::InvalidArgument("bad probe hyperparameters".into()));
    }
    let dim = pairs[0].m.len();
    if let Some(p) = pairs.iter().find(|p| p.m.len() != dim || p.label > 1) {
        return Err(LccError::shape(format!("length-{dim} input with a 0/1 label"), p.m.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((pairs.len() as f64 * hyper.train_fraction).round() as usize).clamp(1, pairs.len() - 1);
    let (train, val) = order.split_at(n_train);
    let mut train = train.to_vec();

    let mut w = vec![0.0; dim + 1];
    let mut adam = Adam::<f64>::new(hyper.lr, &[dim + 1]);
    let mut g = vec![0.0; dim + 1];
    for _ in 0..hyper.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(hyper.batch_size) {
            g.iter_mut().for_each(|x| *x = 0.0);
            for &i in batch {
                let p = &pairs[i];
                let err = sigmoid(dot(&w[..dim], &p.m) + w[dim]) - p.label as f64;
                for (gj, x) in g.iter_mut().zip(&p.m) {
                    *gj += err * x;
                }
                g[dim] += err;
            }
            let inv = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|x| *x *= inv);
            adam.step(&mut [w.as_mut_slice()], &[g.as_slice()]);
        }
    }
    let correct = val
        .iter()
        .filter(|&&i| {
            let p = &pairs[i];
            (sigmoid(dot(&w[..dim], &p.m) + w[dim]) >= 0.5) == (p.label == 1)
        })
        .count();
    let bias = w[dim];
    w.truncate(dim);
    Ok(ProbeRecord {
        site,
        accuracy: correct as f64 / val.len() as f64,
        weights: w,
        bias,
    })
}

fn top_fraction(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(LccError::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    if n == 0 {
        return Err(LccError::InvalidArgument("nothing to rank".into()));
    }
    Ok(((fraction * n as f64).ceil() as usize).clamp(1, n))
}

/// Heads ordered by validation accuracy (descending; ties by lower layer
/// then lower head), truncated to `⌈fraction · count⌉`.
pub fn rank_heads(records: &[ProbeRecord], fraction: f64) -> Result<Vec<HeadSite>> {
    let k = top_fraction(records.len(), fraction)?;
    let mut sorted: Vec<&ProbeRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.site.cmp(&b.site)));
    Ok(sorted[..k].iter().map(|r| r.site).collect())
}

/// Tabular ranking: `layer,head,accuracy,selected`, in ranking order.
pub fn ranking_csv(records: &[ProbeRecord], selected: &[HeadSite]) -> String {
    let mut sorted: Vec<&ProbeRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(a.site.cmp(&b.site)));
    let mut s = String::from("layer,head,accuracy,selected\n");
    for r in sorted {
        let _ = writeln!(
            s,
            "{},{},{:.6},{}",
            r.site.layer,
            r.site.head,
            r.accuracy,
            u8::from(selected.contains(&r.site))
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Mse,
    Kl,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.max(f64::MIN_POSITIVE).ln()))
        .sum()
}

/// Mean per-head discrepancy between dense and pruned activations. For
/// the KL metric each activation is read through its own model's logit
/// lens.
pub fn head_metric<F: Real>(
    dense_trace: &ActivationTrace,
    pruned_trace: &ActivationTrace,
    dense: &ModelParams<F>,
    pruned: &ModelParams<F>,
    metric: SelectionMetric,
) -> Result<BTreeMap<HeadSite, f64>> {
    if dense_trace.sample_ids != pruned_trace.sample_ids || dense_trace.position != pruned_trace.position {
        return Err(LccError::InvalidArgument("traces are not aligned".into()));
    }
    let mut out = BTreeMap::new();
    for site in dense_trace.sites.keys() {
        let Site::Head { layer, head } = *site else {
            continue;
        };
        let hs = HeadSite::new(layer, head);
        let (zd, zp) = (dense_trace.get(*site)?, pruned_trace.get(*site)?);
        if zd.rows() == 0 {
            return Err(LccError::InvalidArgument(format!("no samples for {hs}")));
        }
        let mut total = 0.0;
        for n in 0..zd.rows() {
            total += match metric {
                SelectionMetric::Mse => zd.row(n).iter().zip(zp.row(n)).map(|(a, b)| (a - b) * (a - b)).sum(),
                SelectionMetric::Kl => {
                    let lens = |p: &ModelParams<F>, z: &[f64]| -> Result<Vec<f64>> {
                        let z: Vec<F> = z.iter().map(|&x| F::of(x)).collect();
                        Ok(logit_lens(&z, hs, p)?.iter().map(|x| x.as_f64()).collect())
                    };
                    kl(&softmax(&lens(dense, zd.row(n))?), &softmax(&lens(pruned, zp.row(n))?))
                }
            };
        }
        out.insert(hs, total / zd.rows() as f64);
    }
    Ok(out)
}

/// Heads with the smallest metric first (ties by lower layer/head),
/// truncated to `⌈fraction · count⌉`.
pub fn select_heads_by_metric<F: Real>(
    dense_trace: &ActivationTrace,
    pruned_trace: &ActivationTrace,
    dense: &ModelParams<F>,
    pruned: &ModelParams<F>,
    metric: SelectionMetric,
    fraction: f64,
) -> Result<Vec<HeadSite>> {
    let scores = head_metric(dense_trace, pruned_trace, dense, pruned, metric)?;
    let k = top_fraction(scores.len(), fraction)?;
    let mut sorted: Vec<(HeadSite, f64)> = scores.into_iter().collect();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(sorted[..k].iter().map(|(s, _)| *s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Table(Vec<Vec<f64>>);

    impl ResponseEncoder for Table {
        fn encode(&self, r: &[u32]) -> Result<Vec<f64>> {
            let d = self.0[0].len();
            let mut out = vec![0.0; d];
            for &t in r {
                out.iter_mut().zip(&self.0[t as usize]).for_each(|(o, x)| *o += x);
            }
            Ok(out)
        }
    }

    #[test]
    fn two_response_pool_swaps() {
        let enc = Table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let samples = vec![(vec![9], vec![0]), (vec![8], vec![1]), (vec![7], vec![0])];
        let t = build_contrastive_dataset(&samples, &enc).unwrap();
        assert_eq!(t[0].r_minus, vec![1]);
        assert_eq!(t[0].provenance, 1);
        assert_eq!(t[1].r_minus, vec![0]);
        assert_eq!(t[1].provenance, 0);
        assert_eq!(t[2].provenance, 1);
    }

    #[test]
    fn identical_pool_is_rejected() {
        let enc = Table(vec![vec![1.0, 0.0]]);
        let samples = vec![(vec![1], vec![0]), (vec![2], vec![0])];
        assert!(build_contrastive_dataset(&samples, &enc).is_err());
    }

    #[test]
    fn separable_probe_is_perfect() {
        let pairs: Vec<ProbePair> = (0..40)
            .map(|i| {
                let label = (i % 2) as u8;
                let mut m = vec![0.0; 6];
                m[0] = if label == 1 { 1.0 } else { -1.0 };
                ProbePair { m, label }
            })
            .collect();
        let r = train_probe(HeadSite::new(0, 0), &pairs, &ProbeHyper::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.weights.len(), 6);
    }

    #[test]
    fn probe_input_validation() {
        let one = |label| ProbePair { m: vec![0.0; 2], label };
        assert!(train_probe(HeadSite::new(0, 0), &[one(1), one(0), one(1)], &ProbeHyper::default()).is_err());
        assert!(train_probe(HeadSite::new(0, 0), &vec![one(1); 8], &ProbeHyper::default()).is_err());
    }

    fn rec(layer: usize, head: usize, accuracy: f64) -> ProbeRecord {
        ProbeRecord {
            site: HeadSite::new(layer, head),
            accuracy,
            weights: vec![],
            bias: 0.0,
        }
    }

    #[test]
    fn ranking_rules() {
        let records = vec![rec(0, 0, 0.5), rec(0, 1, 0.9), rec(1, 0, 0.5), rec(1, 1, 0.7)];
        assert_eq!(rank_heads(&records, 0.5).unwrap(), vec![HeadSite::new(0, 1), HeadSite::new(1, 1)]);
        assert_eq!(rank_heads(&records, 1.0).unwrap()[2], HeadSite::new(0, 0));
        assert_eq!(rank_heads(&records[..1], 0.1).unwrap(), vec![HeadSite::new(0, 0)]);
        assert!(rank_heads(&[], 0.5).is_err());
        assert!(rank_heads(&records, 0.0).is_err());
        let csv = ranking_csv(&records, &[HeadSite::new(0, 1)]);
        assert!(csv.starts_with("layer,head,accuracy,selected\n0,1,0.900000,1\n1,1,0.700000,0\n"));
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert_eq!(kl(&p, &p), 0.0);
        assert!(kl(&p, &softmax(&[3.0, 2.0, 1.0])) > 0.0);
    }
}
