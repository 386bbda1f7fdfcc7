mod common;

use common::{micro_config, micro_params, random_matrix, random_tokens, rng};
use lcc_core::linalg::Matrix;
use lcc_core::lossdiff::*;
use lcc_core::model::{forward, HeadSite, PositionPolicy, Site, WeightKind};
use lcc_core::pruning::{calibration_norms, prune_unstructured, wanda_scores};
use proptest::prelude::*;

fn loss(delta: Matrix) -> LossMatrix {
    LossMatrix {
        site: Site::Head { layer: 0, head: 0 },
        delta,
        position: PositionPolicy::Last,
    }
}

fn column_mean(m: &Matrix) -> Vec<f64> {
    (0..m.cols()).map(|j| (0..m.rows()).map(|i| m.get(i, j)).sum::<f64>() / m.rows() as f64).collect()
}

/// `Σ_n ‖δz_n − c‖²`
fn residual(m: &Matrix, c: &[f64]) -> f64 {
    (0..m.rows()).map(|i| m.row(i).iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn full_rank_component_is_the_mean_loss(seed in 0u64..10_000, rows in 1usize..30, cols in 1usize..9) {
        let m = random_matrix(&mut rng(seed), rows, cols);
        let c = estimate_lost_component(&loss(m.clone()), cols).unwrap().c;
        prop_assert!(max_diff(&c, &column_mean(&m)) < 1e-8);
    }

    #[test]
    fn residual_error_does_not_grow_with_k(seed in 0u64..10_000, rows in 2usize..30, cols in 2usize..9) {
        let m = random_matrix(&mut rng(seed), rows, cols);
        let comps = decompose(&loss(m.clone())).unwrap();
        let errs: Vec<f64> = (0..=cols).map(|k| residual(&m, &comps.top_k(k, 1.0).c)).collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9, "{errs:?}");
        }
        // the full-rank error is the spread around the mean
        prop_assert!((errs[cols] - residual(&m, &column_mean(&m))).abs() < 1e-8);
    }

    #[test]
    fn full_rank_component_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (x, y) = (random_matrix(&mut r, 12, 5), random_matrix(&mut r, 12, 5));
        let mix = Matrix::from_vec(12, 5, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let cx = estimate_lost_component(&loss(x), 5).unwrap().c;
        let cy = estimate_lost_component(&loss(y), 5).unwrap().c;
        let cm = estimate_lost_component(&loss(mix), 5).unwrap().c;
        let expect: Vec<f64> = cx.iter().zip(&cy).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(max_diff(&cm, &expect) < 1e-8);
    }

    #[test]
    fn top_k_is_the_sum_of_singles(seed in 0u64..10_000, k in 0usize..7, scale in 0.1f64..10.0) {
        let m = random_matrix(&mut rng(seed), 9, 6);
        let comps = decompose(&loss(m)).unwrap();
        let mut sum = vec![0.0; 6];
        for i in 0..k {
            for (s, v) in sum.iter_mut().zip(comps.single(i, scale).c) {
                *s += v;
            }
        }
        prop_assert!(max_diff(&comps.top_k(k, scale).c, &sum) < 1e-10);
    }

    #[test]
    fn compensation_restores_the_mean(seed in 0u64..10_000) {
        // z_p + c has the dense mean when c is the full-rank component
        let mut r = rng(seed);
        let zd = random_matrix(&mut r, 15, 4);
        let zp = random_matrix(&mut r, 15, 4);
        let delta = Matrix::from_vec(15, 4, zd.data().iter().zip(zp.data()).map(|(a, b)| a - b).collect()).unwrap();
        let c = estimate_lost_component(&loss(delta), 4).unwrap().c;
        let rows: Vec<Vec<f64>> = (0..15).map(|i| compensate_activation(zp.row(i), &c).unwrap()).collect();
        let zc = Matrix::from_rows(&rows).unwrap();
        prop_assert!(max_diff(&column_mean(&zc), &column_mean(&zd)) < 1e-10);
    }
}

#[test]
fn oracle_compensation_restores_dense_logits() {
    // with only Q, K and V pruned every later weight is shared, so putting
    // back the per-sample loss at every head reproduces the dense output
    let cfg = micro_config();
    let dense = micro_params(&cfg, 11);
    let mut r = rng(3);
    let calib: Vec<Vec<u32>> = (0..6).map(|_| random_tokens(&mut r, 12, 8)).collect();
    let norms = calibration_norms(&dense, &calib).unwrap();
    let scores = wanda_scores(&dense, &norms, &[WeightKind::Q, WeightKind::K, WeightKind::V]).unwrap();
    let (pruned, _) = prune_unstructured(&dense, 0.5, &scores).unwrap();
    for _ in 0..10 {
        let tokens = random_tokens(&mut r, 12, 9);
        let ld = forward(&dense, &tokens, None).unwrap();
        let lp = forward(&pruned, &tokens, None).unwrap();
        assert!(lp.max_abs_diff(&ld) > 1e-3, "pruning should matter");
        let mut hook = OracleCompensation::new(&dense, &tokens).unwrap();
        let lc = forward(&pruned, &tokens, Some(&mut hook)).unwrap();
        assert!(lc.max_abs_diff(&ld) < 1e-6);
    }
}

fn scan_setup() -> (lcc_core::model::ModelParams<f64>, lcc_core::model::ModelParams<f64>, Vec<Prompt>) {
    let cfg = micro_config();
    let dense = micro_params(&cfg, 7);
    let mut r = rng(9);
    let calib: Vec<Vec<u32>> = (0..6).map(|_| random_tokens(&mut r, 12, 8)).collect();
    let norms = calibration_norms(&dense, &calib).unwrap();
    let scores = wanda_scores(&dense, &norms, &WeightKind::ALL).unwrap();
    let (pruned, _) = prune_unstructured(&dense, 0.5, &scores).unwrap();
    let prompts = (0..12)
        .map(|i| Prompt {
            tokens: random_tokens(&mut r, 12, 6),
            correct: (i % 3) as u32,
            incorrect: 5,
        })
        .collect();
    (dense, pruned, prompts)
}

#[test]
fn scan_without_components_changes_nothing() {
    let (dense, pruned, prompts) = scan_setup();
    let opts = ScanOptions { k: 0, ..Default::default() };
    let rows = head_recovery_scan(&dense, &pruned, &prompts, &opts).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r.gain, 0.0);
        assert_eq!(r.lambda_recovered, r.lambda_pruned);
    }
}

#[test]
fn scan_scale_changes_gain() {
    let (dense, pruned, prompts) = scan_setup();
    let one = head_recovery_scan(&dense, &pruned, &prompts, &ScanOptions::default()).unwrap();
    let two = head_recovery_scan(&dense, &pruned, &prompts, &ScanOptions { scale: 2.0, ..Default::default() }).unwrap();
    assert!(one.iter().zip(&two).any(|(a, b)| (a.gain - b.gain).abs() > 1e-9));
    for (a, b) in one.iter().zip(&two) {
        assert_eq!(a.site, b.site);
        assert_eq!(a.lambda_dense, b.lambda_dense);
        assert_eq!(a.lambda_pruned, b.lambda_pruned);
    }
    assert!(head_recovery_scan(&dense, &pruned, &prompts, &ScanOptions { scale: 0.0, ..Default::default() }).is_err());
    assert!(head_recovery_scan(&dense, &pruned, &[], &ScanOptions::default()).is_err());
}

#[test]
fn scan_matches_a_direct_lens_computation() {
    let (dense, pruned, prompts) = scan_setup();
    let head = HeadSite::new(1, 0);
    let tokens: Vec<Vec<u32>> = prompts.iter().map(|p| p.tokens.clone()).collect();
    let (td, tp) = capture_pair(&dense, &pruned, &tokens, &[head.into()], PositionPolicy::Last).unwrap();
    let lm = assemble_loss_matrix(&td, &tp, head.into()).unwrap();
    let c = estimate_lost_component(&lm, 2).unwrap().c;
    let zp = tp.get(head.into()).unwrap();
    let mut lambda = 0.0;
    for (i, p) in prompts.iter().enumerate() {
        let z = compensate_activation(zp.row(i), &c).unwrap();
        let logits = lcc_core::model::logit_lens(&z, head, &pruned).unwrap();
        lambda += logits[p.correct as usize] - logits[p.incorrect as usize];
    }
    lambda /= prompts.len() as f64;
    let rows = head_recovery_scan(&dense, &pruned, &prompts, &ScanOptions { k: 2, ..Default::default() }).unwrap();
    let row = rows.iter().find(|r| r.site == head).unwrap();
    assert!((row.lambda_recovered - lambda).abs() < 1e-10);
}

#[test]
fn misaligned_traces_are_rejected() {
    let (dense, pruned, prompts) = scan_setup();
    let tokens: Vec<Vec<u32>> = prompts.iter().map(|p| p.tokens.clone()).collect();
    let site: Site = HeadSite::new(0, 0).into();
    let (td, _) = capture_pair(&dense, &pruned, &tokens, &[site], PositionPolicy::Last).unwrap();
    let (_, tp) = capture_pair(&dense, &pruned, &tokens, &[site], PositionPolicy::At(0)).unwrap();
    assert!(assemble_loss_matrix(&td, &tp, site).is_err());
    let other = micro_params(&lcc_core::model::ModelConfig { d_ffn: 8, ..micro_config() }, 1);
    assert!(capture_pair(&dense, &other, &tokens, &[site], PositionPolicy::Last).is_err());
}
