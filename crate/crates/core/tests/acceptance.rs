//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{random_matrix, rng, singular_values_oracle};
use lcc_core::harness::config::{ExperimentConfig, PruneScope, Selector};
use lcc_core::harness::pipeline::{Pipeline, Stage};
use lcc_core::harness::report::EvalReport;
use lcc_core::harness::task::{Split, TaskDataset};
use lcc_core::lcc::*;
use lcc_core::linalg::{frobenius_rel_error, svd_thin};
use lcc_core::lossdiff::{estimate_lost_component, LossMatrix, OracleCompensation};
use lcc_core::model::{forward, HeadSite, ModelParams, PositionPolicy, Site};
use lcc_core::probing::{rank_heads, train_probe, ProbeHyper, ProbePair};
use lcc_core::pruning::{calibration_norms, compensation_overhead, prune_unstructured, sparsity_report, wanda_scores};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail at this scale. They are still run and printed;
/// see the README for the analysis.
const KNOWN_FAILING: &[u32] = &[7];

const SEEDS: u64 = 5;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
    secs: f64,
}

fn desk_config(out: &Path) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

/// Dense and pruned models as f64, plus the dataset, from the desk run.
struct Desk {
    dense: ModelParams<f64>,
    pruned: ModelParams<f64>,
    mask: lcc_core::pruning::PruneMask,
    data: TaskDataset,
    train_secs: f64,
}

fn desk_models(out: &Path) -> Desk {
    let t = Instant::now();
    let st = Pipeline::new(desk_config(out)).unwrap().run_until(Stage::Prune).unwrap();
    Desk {
        dense: st.dense.unwrap().cast(),
        pruned: st.pruned.unwrap().cast(),
        mask: st.mask.unwrap(),
        data: st.dataset.unwrap(),
        train_secs: t.elapsed().as_secs_f64(),
    }
}

fn criterion_1() -> (bool, String) {
    let mut r = rng(2024);
    let (mut recon, mut ortho, mut sv) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (n, d) = (r.random_range(1..=64), r.random_range(1..=32));
        let a = random_matrix(&mut r, n, d);
        let f = svd_thin(&a).unwrap();
        recon = recon.max(frobenius_rel_error(&a, &f.reconstruct()).unwrap());
        ortho = ortho.max(f.u.orthonormality_error()).max(f.v.orthonormality_error());
        for (s, o) in f.sigma.iter().zip(singular_values_oracle(&a)) {
            sv = sv.max((s - o).abs() / o);
        }
    }
    (
        recon < 1e-6 && ortho < 1e-6 && sv < 1e-6,
        format!("max reconstruction {recon:.1e}, orthonormality {ortho:.1e}, singular value rel {sv:.1e}"),
    )
}

fn criterion_2(desk: &Desk) -> (bool, String) {
    // prune only Q, K and V so every module after the heads is shared
    let dense = &desk.dense;
    let train: Vec<Vec<u32>> = desk.data.split(Split::Train).iter().take(128).map(|s| s.sequence()).collect();
    let norms = calibration_norms(dense, &train).unwrap();
    let scores = wanda_scores(dense, &norms, &PruneScope::Qkv.kinds()).unwrap();
    let (pruned, _) = prune_unstructured(dense, 0.5, &scores).unwrap();
    let (mut worst, mut moved) = (0.0f64, 0.0f64);
    for s in desk.data.split(Split::HeldOut).iter().take(100) {
        let tokens = s.sequence();
        let ld = forward(dense, &tokens, None).unwrap();
        let mut hook = OracleCompensation::new(dense, &tokens).unwrap();
        let lc = forward(&pruned, &tokens, Some(&mut hook)).unwrap();
        worst = worst.max(lc.max_abs_diff(&ld));
        moved = moved.max(forward(&pruned, &tokens, None).unwrap().max_abs_diff(&ld));
    }
    (worst < 1e-6, format!("max |logit diff| {worst:.1e} over 100 samples (uncompensated {moved:.2})"))
}

fn criterion_3() -> (bool, String) {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, d) = (r.random_range(1..=64), r.random_range(1..=32));
        let delta = random_matrix(&mut r, n, d);
        let lm = LossMatrix {
            site: Site::Head { layer: 0, head: 0 },
            delta: delta.clone(),
            position: PositionPolicy::Last,
        };
        let c = estimate_lost_component(&lm, d).unwrap().c;
        for (j, cj) in c.iter().enumerate() {
            let mean = (0..n).map(|i| delta.get(i, j)).sum::<f64>() / n as f64;
            worst = worst.max((cj - mean).abs());
        }
    }
    (worst < 1e-8, format!("max |c − column mean| {worst:.1e} over 50 matrices"))
}

fn jitter(plan: &mut RecoveryPlan, r: &mut ChaCha8Rng) {
    for c in &mut plan.components {
        for x in c.beta.iter_mut().chain(c.bias.iter_mut()) {
            *x += r.random_range(-0.1..0.1);
        }
    }
}

fn criterion_4(desk: &Desk) -> (bool, String) {
    let prompts: Vec<Vec<u32>> = desk.data.split(Split::Recovery).iter().take(32).map(|s| s.question.clone()).collect();
    let batch: Vec<RecoverySample> = desk.data.split(Split::Recovery).iter().take(4).map(|s| s.recovery_sample()).collect();
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let heads: Vec<Site> = desk.dense.config.heads().map(Site::from).collect();
    let ffn: Vec<Site> = (0..desk.dense.config.n_layers).map(|layer| Site::Ffn { layer }).collect();
    for (target, sites) in [(Target::AttentionHead, heads), (Target::FfnOutput, ffn)] {
        let mut plan = build_plan(&desk.dense, &desk.pruned, &prompts, &sites, target, Default::default(), Default::default()).unwrap();
        jitter(&mut plan, &mut r);
        for response_only in [false, true] {
            let e = gradient_check(&plan, &desk.pruned, &batch, &Objective::CrossEntropy { response_only }).unwrap();
            worst = worst.max(e);
        }
    }
    (worst < 1e-4, format!("max relative gradient error {worst:.1e} (β and b, every head and FFN site)"))
}

fn criterion_5(desk: &Desk) -> (bool, String) {
    let prompts: Vec<Vec<u32>> = desk.data.split(Split::Recovery).iter().take(32).map(|s| s.question.clone()).collect();
    let cfg = &desk.dense.config;
    let heads: Vec<HeadSite> = cfg.heads().collect();
    let sites: Vec<Site> = heads.iter().map(|&h| Site::from(h)).collect();
    let mut plan = build_plan(&desk.dense, &desk.pruned, &prompts, &sites, Target::AttentionHead, Default::default(), Default::default()).unwrap();
    jitter(&mut plan, &mut rng(5));
    let folded = fold_components(&desk.pruned, &plan).unwrap();
    let mut worst = 0.0f64;
    for s in desk.data.split(Split::HeldOut).iter().take(50) {
        let tokens = s.sequence();
        let a = recovery_forward(&desk.pruned, &plan, &tokens).unwrap();
        worst = worst.max(a.max_abs_diff(&forward(&folded, &tokens, None).unwrap()));
    }
    let faithful = desk.mask.check_faithful(&folded).is_ok();
    let report = sparsity_report(&folded, &desk.mask, &heads).unwrap();
    let full = 1.0 / (2.0 * cfg.d_model as f64);
    let wide = compensation_overhead(8, 125, 1000);
    (
        worst <= 1e-12 && faithful && report.overhead == full && wide == 0.0005,
        format!(
            "max |logit diff| {worst:.1e}, mask faithful {faithful}, overhead {} (1/(2·{})), {wide} at d = 1000",
            report.overhead, cfg.d_model
        ),
    )
}

fn run_seeds(base: &ExperimentConfig, edit: impl Fn(&mut ExperimentConfig)) -> Vec<EvalReport> {
    (0..SEEDS)
        .map(|seed| {
            let mut c = base.clone();
            c.seed = seed;
            edit(&mut c);
            Pipeline::new(c).unwrap().run().unwrap()
        })
        .collect()
}

fn mean_acc(rs: &[EvalReport]) -> f64 {
    rs.iter().map(|r| r.recovered.accuracy).sum::<f64>() / rs.len() as f64
}

fn criterion_6(full: &[EvalReport], secs: f64) -> (bool, String) {
    let dense_ok = full.iter().all(|r| r.dense.accuracy >= 0.95);
    let drop_ok = full.iter().all(|r| r.dense.accuracy - r.pruned.accuracy >= 0.10);
    let good = full
        .iter()
        .filter(|r| r.gap_recovered.is_some_and(|g| g >= 0.5) && r.recovered.accuracy > r.pruned.accuracy)
        .count();
    let gaps: Vec<String> = full.iter().map(|r| format!("{:.2}", r.gap_recovered.unwrap_or(f64::NAN))).collect();
    let r0 = &full[0];
    (
        dense_ok && drop_ok && good >= 4 && secs < 600.0,
        format!(
            "dense {:.3}, pruned {:.3}, recovered {:.3} (seed 0); gap recovered [{}], {good}/5 seeds ≥ 0.5; {secs:.0} s",
            r0.dense.accuracy,
            r0.pruned.accuracy,
            r0.recovered.accuracy,
            gaps.join(" ")
        ),
    )
}

fn criterion_7(full: &[EvalReport], ablations: &BTreeMap<&str, Vec<EvalReport>>) -> (bool, String) {
    let f = mean_acc(full);
    let mut pass = true;
    let mut parts = vec![format!("full {f:.3}")];
    for (name, rs) in ablations {
        let m = mean_acc(rs);
        pass &= f >= m - 0.02;
        parts.push(format!("{name} {m:.3} ({:+.2} pts)", 100.0 * (f - m)));
    }
    parts.push("reference w/o-probing gap −1.26 pts".into());
    (pass, parts.join(", "))
}

fn criterion_8() -> (bool, String) {
    let gaussian = |r: &mut ChaCha8Rng| -> f64 {
        let (u, v): (f64, f64) = (r.random_range(1e-12..1.0), r.random());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    };
    let mut wins = 0;
    for trial in 0..20u64 {
        let mut r = rng(700 + trial);
        let mut records = Vec::new();
        for h in 0..4 {
            let shift = if h == 2 { 1.0 } else { 0.0 };
            let pairs: Vec<ProbePair> = (0..400)
                .map(|i| {
                    let label = (i % 2) as u8;
                    let mut m: Vec<f64> = (0..8).map(|_| gaussian(&mut r)).collect();
                    m[4] += if label == 1 { shift } else { -shift };
                    ProbePair { m, label }
                })
                .collect();
            let hyper = ProbeHyper { seed: trial, ..Default::default() };
            records.push(train_probe(HeadSite::new(h / 2, h % 2), &pairs, &hyper).unwrap());
        }
        if rank_heads(&records, 0.25).unwrap() == vec![HeadSite::new(1, 0)] {
            wins += 1;
        }
    }
    let (mut lo, mut hi) = (1.0f64, 0.0f64);
    for seed in 0..20u64 {
        let mut r = rng(800 + seed);
        let pairs: Vec<ProbePair> = (0..400)
            .map(|_| ProbePair {
                m: (0..8).map(|_| gaussian(&mut r)).collect(),
                label: r.random_range(0..2),
            })
            .collect();
        let acc = train_probe(HeadSite::new(0, 0), &pairs, &ProbeHyper { seed, ..Default::default() }).unwrap().accuracy;
        lo = lo.min(acc);
        hi = hi.max(acc);
    }
    (
        wins >= 19 && lo >= 0.35 && hi <= 0.65,
        format!("planted head ranked first in {wins}/20; shuffled-label accuracy in [{lo:.3}, {hi:.3}]"),
    )
}

fn criterion_9(by_k: &[(usize, f64)]) -> (bool, String) {
    let lo = by_k.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let hi = by_k.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let parts: Vec<String> = by_k.iter().map(|(k, a)| format!("K={k} {a:.3}")).collect();
    (hi - lo <= 0.02, format!("{}; spread {:.3}", parts.join(", "), hi - lo))
}

fn criterion_10(out: &Path) -> (bool, String) {
    // everything after dense training is recomputed on each run
    let cfg = desk_config(out);
    let mut reports = Vec::new();
    for _ in 0..2 {
        for stage in ["prune", "capture", "decompose", "probe", "compensate", "fold", "reports"] {
            let _ = std::fs::remove_dir_all(out.join(stage));
        }
        let pipe = Pipeline::new(cfg.clone()).unwrap();
        pipe.run().unwrap();
        reports.push(std::fs::read(pipe.report_path()).unwrap());
    }
    let same = reports[0] == reports[1];
    (same, format!("two from-scratch runs give {} reports ({} bytes)", if same { "identical" } else { "different" }, reports[0].len()))
}

fn timed(id: u32, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    Outcome {
        id,
        pass,
        detail,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn main() {
    let scratch: PathBuf = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let dir = tempfile::tempdir_in(&scratch).unwrap();
    let out = dir.path().join("runs");
    let mut outcomes = vec![timed(1, criterion_1)];

    let desk = desk_models(&out);
    outcomes.push(timed(2, || criterion_2(&desk)));
    outcomes.push(timed(3, criterion_3));
    outcomes.push(timed(4, || criterion_4(&desk)));
    outcomes.push(timed(5, || criterion_5(&desk)));

    let base = desk_config(&out);
    let t = Instant::now();
    let full = run_seeds(&base, |_| {});
    let desk_secs = desk.train_secs + t.elapsed().as_secs_f64();
    outcomes.push(timed(6, || criterion_6(&full, desk_secs)));

    let mut ablations = BTreeMap::new();
    outcomes.push(timed(7, || {
        ablations.insert("w/o probing", run_seeds(&base, |c| c.probe.selector = Selector::Random));
        ablations.insert("w/o Σβv", run_seeds(&base, |c| c.lcc.use_directions = false));
        ablations.insert("w/o b", run_seeds(&base, |c| c.lcc.use_bias = false));
        criterion_7(&full, &ablations)
    }));
    outcomes.push(timed(8, criterion_8));
    outcomes.push(timed(9, || {
        let mut by_k = vec![(1, mean_acc(&full))];
        for k in [3, 10] {
            by_k.push((k, mean_acc(&run_seeds(&base, |c| c.probe.k = k))));
        }
        criterion_9(&by_k)
    }));
    outcomes.push(timed(10, || criterion_10(&out)));

    println!();
    for o in &outcomes {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let known = if !o.pass && KNOWN_FAILING.contains(&o.id) { " [known]" } else { "" };
        println!("criterion {:>2} {tag}{known}  {}  ({:.1} s)", o.id, o.detail, o.secs);
    }
    let unexpected: Vec<u32> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_FAILING.contains(&o.id))
        .map(|o| o.id)
        .collect();
    if !unexpected.is_empty() {
        eprintln!("criteria failed: {unexpected:?}");
        std::process::exit(1);
    }
}
