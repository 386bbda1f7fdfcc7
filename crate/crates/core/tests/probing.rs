mod common;

use std::collections::BTreeMap;

use common::{micro_config, micro_params, random_tokens, rng};
use lcc_core::linalg::Matrix;
use lcc_core::model::{logit_lens, ActivationTrace, HeadSite, PositionPolicy, Site, WeightKind};
use lcc_core::probing::*;
use lcc_core::pruning::{calibration_norms, prune_unstructured, wanda_scores};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn gaussian(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let (u, v): (f64, f64) = (r.random_range(1e-12..1.0), r.random());
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (n(a) * n(b))
}

#[test]
fn negatives_match_a_nearest_neighbour_oracle() {
    let cfg = micro_config();
    let p = micro_params(&cfg, 2);
    let pool: Vec<Vec<u32>> = vec![vec![3, 4], vec![5], vec![6, 7, 8], vec![3, 4], vec![9, 1]];
    let samples: Vec<(Vec<u32>, Vec<u32>)> = pool.iter().enumerate().map(|(i, r)| (vec![i as u32, 2], r.clone())).collect();
    let tuples = build_contrastive_dataset(&samples, &MeanEmbeddingEncoder::new(&p)).unwrap();
    let mean_emb = |r: &[u32]| -> Vec<f64> {
        let d = cfg.d_model;
        (0..d)
            .map(|j| r.iter().map(|&t| p.tok_emb[t as usize * d + j]).sum::<f64>() / r.len() as f64)
            .collect()
    };
    for (i, t) in tuples.iter().enumerate() {
        let mut best = None;
        for (j, cand) in pool.iter().enumerate() {
            if *cand == pool[i] {
                continue;
            }
            let s = cosine(&mean_emb(&pool[i]), &mean_emb(cand));
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let (j, _) = best.unwrap();
        assert_eq!(t.provenance, j);
        assert_eq!(t.r_minus, pool[j]);
        assert_ne!(t.r_minus, t.r_plus);
        assert_eq!(t.question, samples[i].0);
        assert_eq!(t.r_plus, pool[i]);
    }
    // samples 0 and 3 share a response, so neither may pick the other
    assert_ne!(tuples[0].provenance, 3);
    assert_ne!(tuples[3].provenance, 0);
}

#[test]
fn empty_response_cannot_be_encoded() {
    let p = micro_params(&micro_config(), 0);
    assert!(encode_response(&[], &p).is_err());
    assert!(encode_response(&[99], &p).is_err());
}

fn models() -> (lcc_core::model::ModelParams<f64>, lcc_core::model::ModelParams<f64>) {
    let cfg = micro_config();
    let dense = micro_params(&cfg, 4);
    let mut r = rng(1);
    let calib: Vec<Vec<u32>> = (0..6).map(|_| random_tokens(&mut r, 12, 8)).collect();
    let norms = calibration_norms(&dense, &calib).unwrap();
    let scores = wanda_scores(&dense, &norms, &WeightKind::ALL).unwrap();
    let (pruned, _) = prune_unstructured(&dense, 0.5, &scores).unwrap();
    (dense, pruned)
}

#[test]
fn pairs_are_balanced_and_share_the_question_half() {
    let (dense, pruned) = models();
    let mut r = rng(6);
    let samples: Vec<(Vec<u32>, Vec<u32>)> =
        (0..9).map(|_| (random_tokens(&mut r, 12, 5), random_tokens(&mut r, 12, 2))).collect();
    let mut tuples = build_contrastive_dataset(&samples, &MeanEmbeddingEncoder::new(&dense)).unwrap();
    // one tuple too long for the context
    tuples[0].question = vec![1; 9];
    let heads: Vec<HeadSite> = dense.config.heads().collect();
    let acts = collect_probe_activations(&tuples, &dense, &pruned, &heads).unwrap();
    assert_eq!(acts.skipped, 1);
    let dh = dense.config.d_head;
    let c: Vec<f64> = (0..dh).map(|j| j as f64 - 1.5).collect();
    for &h in &heads {
        let zero = acts.pairs(h, &vec![0.0; dh]).unwrap();
        let edited = acts.pairs(h, &c).unwrap();
        assert_eq!(zero.len(), 16);
        assert_eq!(zero.iter().filter(|p| p.label == 1).count(), 8);
        let q = acts.pruned_question.get(h.into()).unwrap();
        for (n, pair) in zero.chunks(2).enumerate() {
            assert_eq!((pair[0].label, pair[1].label), (1, 0));
            assert_eq!(pair[0].m.len(), 2 * dh);
            assert_eq!(&pair[0].m[..dh], q.row(n));
            assert_eq!(pair[0].m[..dh], pair[1].m[..dh]);
            assert_eq!(&pair[0].m[dh..], acts.dense_plus.get(h.into()).unwrap().row(n));
            assert_eq!(&pair[1].m[dh..], acts.dense_minus.get(h.into()).unwrap().row(n));
        }
        for (a, b) in zero.iter().zip(&edited) {
            for j in 0..dh {
                assert!((b.m[j] - a.m[j] - c[j]).abs() < 1e-12);
            }
            assert_eq!(a.m[dh..], b.m[dh..]);
        }
        let (single, skipped) = build_probe_pairs(&tuples, &dense, &pruned, h, &c).unwrap();
        assert_eq!((single, skipped), (edited, 1));
    }
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let pairs: Vec<ProbePair> = (0..400)
            .map(|_| ProbePair {
                m: (0..8).map(|_| gaussian(&mut r)).collect(),
                label: r.random_range(0..2),
            })
            .collect();
        let hyper = ProbeHyper { seed, ..Default::default() };
        let acc = train_probe(HeadSite::new(0, 0), &pairs, &hyper).unwrap().accuracy;
        assert!((0.35..=0.65).contains(&acc), "seed {seed}: {acc}");
    }
}

/// Four heads of which only (1, 0) carries label information.
fn planted_activations(r: &mut ChaCha8Rng, n: usize) -> ProbeActivations {
    let heads = [HeadSite::new(0, 0), HeadSite::new(0, 1), HeadSite::new(1, 0), HeadSite::new(1, 1)];
    let signal = HeadSite::new(1, 0);
    let mut trace = |shift: f64| -> ActivationTrace {
        let sites: BTreeMap<Site, Matrix> = heads
            .iter()
            .map(|&h| {
                let s = if h == signal { shift } else { 0.0 };
                let data = (0..n * 4).map(|i| gaussian(r) + if i % 4 == 0 { s } else { 0.0 }).collect();
                (Site::from(h), Matrix::from_vec(n, 4, data).unwrap())
            })
            .collect();
        ActivationTrace {
            position: PositionPolicy::Last,
            sample_ids: (0..n).collect(),
            sites,
        }
    };
    ProbeActivations {
        pruned_question: trace(0.0),
        dense_plus: trace(1.0),
        dense_minus: trace(-1.0),
        skipped: 0,
    }
}

#[test]
fn label_correlated_head_outranks_noise() {
    let mut wins = 0;
    for trial in 0..20 {
        let mut r = rng(100 + trial);
        let acts = planted_activations(&mut r, 200);
        let records: Vec<ProbeRecord> = [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(l, h)| {
                let site = HeadSite::new(l, h);
                let pairs = acts.pairs(site, &[0.0; 4]).unwrap();
                train_probe(site, &pairs, &ProbeHyper { seed: trial, ..Default::default() }).unwrap()
            })
            .collect();
        if rank_heads(&records, 0.25).unwrap() == vec![HeadSite::new(1, 0)] {
            wins += 1;
        }
    }
    assert!(wins >= 19, "{wins}/20");
}

#[test]
fn probe_training_is_seeded() {
    let mut r = rng(5);
    let acts = planted_activations(&mut r, 50);
    let pairs = acts.pairs(HeadSite::new(1, 0), &[0.0; 4]).unwrap();
    let h = ProbeHyper::default();
    let a = train_probe(HeadSite::new(1, 0), &pairs, &h).unwrap();
    assert_eq!(a, train_probe(HeadSite::new(1, 0), &pairs, &h).unwrap());
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn metric_selectors_match_recomputation() {
    let (dense, pruned) = models();
    let mut r = rng(8);
    let prompts: Vec<Vec<u32>> = (0..10).map(|_| random_tokens(&mut r, 12, 7)).collect();
    let sites: Vec<Site> = dense.config.heads().map(Site::from).collect();
    let (td, tp) = lcc_core::lossdiff::capture_pair(&dense, &pruned, &prompts, &sites, PositionPolicy::Last).unwrap();
    for metric in [SelectionMetric::Mse, SelectionMetric::Kl] {
        let mut oracle: Vec<(HeadSite, f64)> = dense
            .config
            .heads()
            .map(|h| {
                let (zd, zp) = (td.get(h.into()).unwrap(), tp.get(h.into()).unwrap());
                let total: f64 = (0..zd.rows())
                    .map(|n| match metric {
                        SelectionMetric::Mse => zd.row(n).iter().zip(zp.row(n)).map(|(a, b)| (a - b).powi(2)).sum(),
                        SelectionMetric::Kl => {
                            let p = softmax(&logit_lens(zd.row(n), h, &dense).unwrap());
                            let q = softmax(&logit_lens(zp.row(n), h, &pruned).unwrap());
                            p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
                        }
                    })
                    .sum();
                (h, total / zd.rows() as f64)
            })
            .collect();
        let scores = head_metric(&td, &tp, &dense, &pruned, metric).unwrap();
        for (h, v) in &oracle {
            assert!((scores[h] - v).abs() < 1e-10 * v.abs().max(1.0), "{metric:?} {h}");
        }
        oracle.sort_by(|a, b| a.1.total_cmp(&b.1));
        let picked = select_heads_by_metric(&td, &tp, &dense, &pruned, metric, 0.5).unwrap();
        assert_eq!(picked, vec![oracle[0].0, oracle[1].0], "{metric:?}");
    }
}
