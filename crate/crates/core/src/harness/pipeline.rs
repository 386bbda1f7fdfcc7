//! Train → prune → capture → decompose → probe → compensate → fold → eval.
//!
//! Every stage writes its artifacts under `out_dir/<stage>/<key>.*`, where
//! the key hashes the parent stage's key and the config fields the stage
//! reads. A stage whose artifacts already exist loads them instead of
//! recomputing.

use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, SchemeKind, Selector};
use super::eval::evaluate;
use super::report::{sweep_csv, EvalReport, SweepAxis, SweepRow, TableRefs};
use super::task::{export_jsonl, gen_synthetic_task, ingest_jsonl, Sample, Split, TaskDataset, Vocabulary};
use crate::error::{LccError, Result};
use crate::format::{self, TensorData};
use crate::lcc::{build_plan, fold_components, train_components, RecoveryPlan, RecoverySample, Target};
use crate::linalg::Matrix;
use crate::lossdiff::{
    assemble_loss_matrix, capture_pair, components_csv, estimate_lost_component, gains_csv, head_recovery_scan,
    PrincipalComponent, Prompt, ScanOptions,
};
use crate::model::{
    load_checkpoint, save_checkpoint, train_dense, ActivationTrace, HeadSite, ModelParams, PositionPolicy, Site,
};
use crate::probing::{
    build_contrastive_dataset, collect_probe_activations, rank_heads, ranking_csv, select_heads_by_metric,
    train_probe, MeanEmbeddingEncoder, ProbeRecord, SelectionMetric,
};
use crate::pruning::{
    calibration_norms, head_scores_from_weights, prune_semi_structured, prune_structured_heads, prune_unstructured,
    sparsity_report, wanda_scores, PruneMask,
};

const TRACE_FORMAT: &str = "lcc-trace";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Prune,
    Capture,
    Decompose,
    Probe,
    Compensate,
    Fold,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Train,
        Stage::Prune,
        Stage::Capture,
        Stage::Decompose,
        Stage::Probe,
        Stage::Compensate,
        Stage::Fold,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Prune => "prune",
            Stage::Capture => "capture",
            Stage::Decompose => "decompose",
            Stage::Probe => "probe",
            Stage::Compensate => "compensate",
            Stage::Fold => "fold",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything produced up to the last stage run.
#[derive(Debug, Clone, Default)]
pub struct RunState {
    pub dataset: Option<TaskDataset>,
    pub dense: Option<ModelParams<f32>>,
    pub pruned: Option<ModelParams<f32>>,
    pub mask: Option<PruneMask>,
    /// Probe-split traces of every head: dense, then pruned.
    pub traces: Option<(ActivationTrace, ActivationTrace)>,
    pub components: Option<Vec<(HeadSite, PrincipalComponent)>>,
    pub probe_records: Option<Vec<ProbeRecord>>,
    pub selected: Option<Vec<HeadSite>>,
    pub plan: Option<RecoveryPlan>,
    pub folded: Option<ModelParams<f32>>,
    pub report: Option<EvalReport>,
    /// Artifact paths written or reused, relative to `out_dir`.
    pub artifacts: Vec<PathBuf>,
}

fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(format::read_file(path)?)))
}

/// Independent seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// `count` items of `pool` in seeded order.
fn seeded_subset<T: Clone>(pool: &[T], count: usize, seed: u64) -> Vec<T> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(count);
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

/// Stage keys of a config.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Keys {
    data: String,
    dense: String,
    prune: String,
    capture: String,
    decompose: String,
    probe: String,
    compensate: String,
    eval: String,
}

impl Keys {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let seed = cfg.seed.to_string();
        let data = match &cfg.task.dataset {
            Some(p) => hash_parts(&["data-file", &file_digest(p)?, &cfg.model.vocab_size.to_string()]),
            None => hash_parts(&["data", &json(&cfg.task), &cfg.model.vocab_size.to_string()]),
        };
        let dense = match &cfg.train.checkpoint {
            Some(p) => hash_parts(&["dense-file", &file_digest(p)?, &data]),
            None => hash_parts(&["dense", &data, &json(&cfg.model), &json(&cfg.train)]),
        };
        let prune = hash_parts(&["prune", &dense, &json(&cfg.prune), &seed]);
        let capture = hash_parts(&["capture", &prune]);
        let decompose = hash_parts(&["decompose", &capture, &cfg.probe.k.to_string()]);
        let probe = hash_parts(&["probe", &decompose, &json(&cfg.probe), &seed]);
        let compensate = hash_parts(&["compensate", &probe, &json(&cfg.lcc), &seed]);
        let eval = hash_parts(&["eval", &compensate, &json(cfg)]);
        Ok(Self {
            data,
            dense,
            prune,
            capture,
            decompose,
            probe,
            compensate,
            eval,
        })
    }
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    keys: Keys,
    vocab: Vocabulary,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let keys = Keys::new(&cfg)?;
        let vocab = Vocabulary::new(cfg.model.vocab_size)?;
        Ok(Self { cfg, keys, vocab })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Identifier of the full run; names the report file.
    pub fn run_id(&self) -> &str {
        &self.keys.eval
    }

    fn rel(&self, stage: &str, key: &str, ext: &str) -> PathBuf {
        PathBuf::from(stage).join(format!("{key}.{ext}"))
    }

    fn abs(&self, rel: &Path) -> PathBuf {
        self.cfg.out_dir.join(rel)
    }

    pub fn report_path(&self) -> PathBuf {
        self.abs(&self.rel("reports", &self.keys.eval, "json"))
    }

    /// Runs the full pipeline and returns its report.
    pub fn run(&self) -> Result<EvalReport> {
        let state = self.run_until(Stage::Eval)?;
        Ok(state.report.expect("eval stage produces a report"))
    }

    /// Runs every stage up to and including `last`. Failures are wrapped
    /// with the failing stage's name; artifacts of earlier stages stay on
    /// disk.
    pub fn run_until(&self, last: Stage) -> Result<RunState> {
        let mut st = RunState::default();
        for stage in Stage::ALL {
            if stage > last {
                break;
            }
            let res = match stage {
                Stage::Train => self.train(&mut st),
                Stage::Prune => self.prune(&mut st),
                Stage::Capture => self.capture(&mut st),
                Stage::Decompose => self.decompose(&mut st),
                Stage::Probe => self.probe(&mut st),
                Stage::Compensate => self.compensate(&mut st),
                Stage::Fold => self.fold(&mut st),
                Stage::Eval => self.eval(&mut st),
            };
            res.map_err(|e| LccError::Stage {
                stage: stage.name(),
                source: Box::new(e),
            })?;
        }
        Ok(st)
    }

    fn dataset(&self) -> Result<TaskDataset> {
        match &self.cfg.task.dataset {
            Some(path) => {
                let (ds, issues) = ingest_jsonl(path, &self.vocab)?;
                if !issues.malformed_lines.is_empty() || issues.unknown_token_records > 0 {
                    log::warn!(
                        "{}: {} malformed lines, {} records with unknown tokens",
                        path.display(),
                        issues.malformed_lines.len(),
                        issues.unknown_token_records
                    );
                }
                Ok(ds)
            }
            None => gen_synthetic_task(&self.cfg.task.params(), self.cfg.model.vocab_size),
        }
    }

    fn train(&self, st: &mut RunState) -> Result<()> {
        let ds = self.dataset()?;
        let data_rel = self.rel("data", &self.keys.data, "jsonl");
        if !self.abs(&data_rel).exists() {
            export_jsonl(&ds, &self.vocab, &self.abs(&data_rel))?;
        }
        st.artifacts.push(data_rel);
        let ckpt_rel = self.rel("dense", &self.keys.dense, "ckpt");
        let ckpt = self.abs(&ckpt_rel);
        let dense = if ckpt.exists() {
            info!("train: reusing {}", ckpt.display());
            load_checkpoint(&ckpt)?
        } else if let Some(src) = &self.cfg.train.checkpoint {
            let p = load_checkpoint(src)?;
            save_checkpoint(&p, &ckpt)?;
            p
        } else {
            let train: Vec<Vec<u32>> = ds.split(Split::Train).iter().map(|s| s.sequence()).collect();
            info!("train: {} sequences, {} epochs", train.len(), self.cfg.train.epochs);
            let (p, report) = train_dense(&self.cfg.model, &train, &self.cfg.train.hyper())?;
            let report_rel = self.rel("dense", &self.keys.dense, "train.json");
            format::write_file(&self.abs(&report_rel), serde_json::to_string_pretty(&report)?.as_bytes())?;
            save_checkpoint(&p, &ckpt)?;
            p
        };
        if dense.config != self.cfg.model {
            return Err(LccError::Config("dense checkpoint does not match the model config".into()));
        }
        st.artifacts.push(ckpt_rel);
        st.dataset = Some(ds);
        st.dense = Some(dense);
        Ok(())
    }

    fn prune(&self, st: &mut RunState) -> Result<()> {
        let dense = st.dense.as_ref().expect("train ran");
        let ds = st.dataset.as_ref().expect("train ran");
        let mask_rel = self.rel("prune", &self.keys.prune, "mask");
        let mask_path = self.abs(&mask_rel);
        let mask = if mask_path.exists() {
            info!("prune: reusing {}", mask_path.display());
            PruneMask::load(&dense.config, &mask_path)?
        } else {
            let p = &self.cfg.prune;
            let train: Vec<Vec<u32>> = ds.split(Split::Train).iter().map(|s| s.sequence()).collect();
            if train.is_empty() {
                return Err(LccError::InvalidArgument("no training sequences for calibration".into()));
            }
            let calib = seeded_subset(&train, p.calibration_samples, derive_seed(self.cfg.seed, "calibration"));
            let norms = calibration_norms(dense, &calib)?;
            let scores = wanda_scores(dense, &norms, &p.scope.kinds())?;
            let (_, mask) = match p.scheme {
                SchemeKind::Unstructured => prune_unstructured(dense, p.ratio, &scores)?,
                SchemeKind::SemiStructured => prune_semi_structured(dense, p.n, p.m, &scores)?,
                SchemeKind::StructuredHeads => {
                    let hs = head_scores_from_weights(&dense.config, &scores)?;
                    prune_structured_heads(dense, p.ratio, &hs)?
                }
            };
            mask.save(&dense.config, &mask_path)?;
            mask
        };
        let mut pruned = dense.clone();
        mask.apply(&mut pruned)?;
        info!(
            "prune: {} of {} weights removed",
            mask.pruned_count(),
            mask.total_count()
        );
        st.artifacts.push(mask_rel);
        st.pruned = Some(pruned);
        st.mask = Some(mask);
        Ok(())
    }

    fn probe_samples<'a>(&self, ds: &'a TaskDataset) -> Result<Vec<&'a Sample>> {
        let s = ds.split(Split::Probe);
        if s.is_empty() {
            return Err(LccError::InvalidArgument("probe split is empty".into()));
        }
        Ok(s)
    }

    fn capture(&self, st: &mut RunState) -> Result<()> {
        let rel = self.rel("capture", &self.keys.capture, "trace");
        let path = self.abs(&rel);
        let traces = if path.exists() {
            info!("capture: reusing {}", path.display());
            read_traces(&format::read_file(&path)?)?
        } else {
            let (dense, pruned) = (st.dense.as_ref().expect("ran"), st.pruned.as_ref().expect("ran"));
            let prompts: Vec<Vec<u32>> = self
                .probe_samples(st.dataset.as_ref().expect("ran"))?
                .iter()
                .map(|s| s.question.clone())
                .collect();
            let sites: Vec<Site> = dense.config.heads().map(Site::from).collect();
            let t = capture_pair(dense, pruned, &prompts, &sites, PositionPolicy::Last)?;
            format::write_file(&path, &write_traces(&t.0, &t.1)?)?;
            t
        };
        st.artifacts.push(rel);
        st.traces = Some(traces);
        Ok(())
    }

    fn decompose(&self, st: &mut RunState) -> Result<()> {
        let json_rel = self.rel("decompose", &self.keys.decompose, "components.json");
        let csv_rel = self.rel("decompose", &self.keys.decompose, "components.csv");
        let gains_rel = self.rel("decompose", &self.keys.decompose, "gains.csv");
        let k = self.cfg.probe.k;
        let json_path = self.abs(&json_rel);
        let comps: Vec<(HeadSite, PrincipalComponent)> = if json_path.exists() && self.abs(&gains_rel).exists() {
            info!("decompose: reusing {}", json_path.display());
            serde_json::from_slice(&format::read_file(&json_path)?)?
        } else {
            let (td, tp) = st.traces.as_ref().expect("capture ran");
            let dense = st.dense.as_ref().expect("ran");
            let pruned = st.pruned.as_ref().expect("ran");
            let mut comps = Vec::new();
            for h in dense.config.heads() {
                let lm = assemble_loss_matrix(td, tp, Site::from(h))?;
                comps.push((h, estimate_lost_component(&lm, k)?));
            }
            let prompts: Vec<Prompt> = self
                .probe_samples(st.dataset.as_ref().expect("ran"))?
                .iter()
                .filter_map(|s| s.prompt())
                .collect();
            let gains = if prompts.is_empty() {
                Vec::new()
            } else {
                let opts = ScanOptions {
                    k,
                    ..ScanOptions::default()
                };
                head_recovery_scan(dense, pruned, &prompts, &opts)?
            };
            format::write_file(&self.abs(&csv_rel), components_csv(&comps).as_bytes())?;
            format::write_file(&self.abs(&gains_rel), gains_csv(&gains).as_bytes())?;
            format::write_file(&json_path, serde_json::to_string(&comps)?.as_bytes())?;
            comps
        };
        st.artifacts.extend([json_rel, csv_rel, gains_rel]);
        st.components = Some(comps);
        Ok(())
    }

    fn probe(&self, st: &mut RunState) -> Result<()> {
        let sel_rel = self.rel("probe", &self.keys.probe, "selection.json");
        let rec_rel = self.rel("probe", &self.keys.probe, "records.json");
        let csv_rel = self.rel("probe", &self.keys.probe, "ranking.csv");
        let sel_path = self.abs(&sel_rel);
        let p = &self.cfg.probe;
        if sel_path.exists() {
            info!("probe: reusing {}", sel_path.display());
            st.selected = Some(serde_json::from_slice(&format::read_file(&sel_path)?)?);
            if p.selector == Selector::Probe {
                st.probe_records = Some(serde_json::from_slice(&format::read_file(&self.abs(&rec_rel))?)?);
                st.artifacts.extend([rec_rel, csv_rel]);
            }
            st.artifacts.push(sel_rel);
            return Ok(());
        }
        let dense = st.dense.as_ref().expect("ran");
        let pruned = st.pruned.as_ref().expect("ran");
        let heads: Vec<HeadSite> = dense.config.heads().collect();
        let selected = match p.selector {
            Selector::Probe => {
                let samples = self.probe_samples(st.dataset.as_ref().expect("ran"))?;
                let pairs_in: Vec<(Vec<u32>, Vec<u32>)> =
                    samples.iter().map(|s| (s.question.clone(), s.response.clone())).collect();
                let tuples = build_contrastive_dataset(&pairs_in, &MeanEmbeddingEncoder::new(dense))?;
                let acts = collect_probe_activations(&tuples, dense, pruned, &heads)?;
                if acts.skipped > 0 {
                    log::warn!("probe: {} tuples exceed the context and were skipped", acts.skipped);
                }
                let hyper = p.hyper(derive_seed(self.cfg.seed, "probe"));
                let mut records = Vec::with_capacity(heads.len());
                for (h, comp) in st.components.as_ref().expect("decompose ran") {
                    let pairs = acts.pairs(*h, &comp.c)?;
                    records.push(train_probe(*h, &pairs, &hyper)?);
                }
                let selected = rank_heads(&records, p.fraction)?;
                format::write_file(&self.abs(&csv_rel), ranking_csv(&records, &selected).as_bytes())?;
                format::write_file(&self.abs(&rec_rel), serde_json::to_string(&records)?.as_bytes())?;
                st.artifacts.extend([rec_rel, csv_rel]);
                st.probe_records = Some(records);
                selected
            }
            Selector::Random => {
                let n = ((p.fraction * heads.len() as f64).ceil() as usize).clamp(1, heads.len());
                let mut s = seeded_subset(&heads, n, derive_seed(self.cfg.seed, "select"));
                s.sort();
                s
            }
            Selector::Mse | Selector::Kl => {
                let metric = if p.selector == Selector::Mse {
                    SelectionMetric::Mse
                } else {
                    SelectionMetric::Kl
                };
                let (td, tp) = st.traces.as_ref().expect("capture ran");
                select_heads_by_metric(td, tp, dense, pruned, metric, p.fraction)?
            }
        };
        info!("probe: selected {}", heads_list(&selected));
        format::write_file(&sel_path, serde_json::to_string(&selected)?.as_bytes())?;
        st.artifacts.push(sel_rel);
        st.selected = Some(selected);
        Ok(())
    }

    /// Compensation sites: the selected heads, or the FFN outputs of the
    /// layers holding them.
    fn sites(&self, selected: &[HeadSite]) -> Vec<Site> {
        match self.cfg.lcc.target {
            Target::AttentionHead => selected.iter().map(|&h| Site::from(h)).collect(),
            Target::FfnOutput => {
                let layers: std::collections::BTreeSet<usize> = selected.iter().map(|h| h.layer).collect();
                layers.into_iter().map(|layer| Site::Ffn { layer }).collect()
            }
        }
    }

    fn compensate(&self, st: &mut RunState) -> Result<()> {
        let rel = self.rel("compensate", &self.keys.compensate, "plan");
        let path = self.abs(&rel);
        let plan = if path.exists() {
            info!("compensate: reusing {}", path.display());
            RecoveryPlan::load(&path)?
        } else {
            let l = &self.cfg.lcc;
            let dense = st.dense.as_ref().expect("ran");
            let pruned = st.pruned.as_ref().expect("ran");
            let ds = st.dataset.as_ref().expect("ran");
            let pool = ds.split(Split::Recovery);
            if pool.len() < l.recovery_samples {
                return Err(LccError::InvalidArgument(format!(
                    "recovery split has {} samples; {} requested",
                    pool.len(),
                    l.recovery_samples
                )));
            }
            let chosen = seeded_subset(&pool, l.recovery_samples, derive_seed(self.cfg.seed, "recovery"));
            let prompts: Vec<Vec<u32>> = chosen.iter().map(|s| s.question.clone()).collect();
            let data: Vec<RecoverySample> = chosen.iter().map(|s| s.recovery_sample()).collect();
            let sites = self.sites(st.selected.as_ref().expect("probe ran"));
            let hyper = l.hyper(derive_seed(self.cfg.seed, "lcc"));
            let mut plan = build_plan(dense, pruned, &prompts, &sites, l.target, l.flags(), hyper)?;
            plan.data_ref = format!("recovery split, {} samples, seed {}", data.len(), self.cfg.seed);
            let plan = match train_components(pruned, &plan, &data) {
                Ok(p) => p,
                Err(abort) => {
                    let partial = self.abs(&self.rel("compensate", &self.keys.compensate, "partial.plan"));
                    abort.last_good.save(&partial)?;
                    return Err(abort.error);
                }
            };
            plan.save(&path)?;
            plan
        };
        st.artifacts.push(rel);
        st.plan = Some(plan);
        Ok(())
    }

    fn fold(&self, st: &mut RunState) -> Result<()> {
        let rel = self.rel("fold", &self.keys.compensate, "ckpt");
        let path = self.abs(&rel);
        let folded = if path.exists() {
            info!("fold: reusing {}", path.display());
            load_checkpoint(&path)?
        } else {
            let f = fold_components(st.pruned.as_ref().expect("ran"), st.plan.as_ref().expect("ran"))?;
            save_checkpoint(&f, &path)?;
            f
        };
        st.mask.as_ref().expect("ran").check_faithful(&folded)?;
        st.artifacts.push(rel);
        st.folded = Some(folded);
        Ok(())
    }

    fn eval(&self, st: &mut RunState) -> Result<()> {
        let rel = self.rel("reports", &self.keys.eval, "json");
        let path = self.abs(&rel);
        if path.exists() {
            info!("eval: reusing {}", path.display());
            st.report = Some(serde_json::from_slice(&format::read_file(&path)?)?);
            st.artifacts.push(rel);
            return Ok(());
        }
        let held = st.dataset.as_ref().expect("ran").split(Split::HeldOut);
        let dense = evaluate(st.dense.as_ref().expect("ran"), &held)?;
        let pruned = evaluate(st.pruned.as_ref().expect("ran"), &held)?;
        let folded = st.folded.as_ref().expect("ran");
        let recovered = evaluate(folded, &held)?;
        let selected = st.selected.clone().expect("ran");
        let heads: Vec<HeadSite> = match self.cfg.lcc.target {
            Target::AttentionHead => selected.clone(),
            Target::FfnOutput => Vec::new(),
        };
        let sparsity = sparsity_report(folded, st.mask.as_ref().expect("ran"), &heads)?;
        let gap = dense.accuracy - pruned.accuracy;
        let to_str = |p: &Path| p.to_string_lossy().into_owned();
        let tables = TableRefs {
            gains: to_str(&self.rel("decompose", &self.keys.decompose, "gains.csv")),
            components: to_str(&self.rel("decompose", &self.keys.decompose, "components.csv")),
            probe_ranking: (self.cfg.probe.selector == Selector::Probe)
                .then(|| to_str(&self.rel("probe", &self.keys.probe, "ranking.csv"))),
        };
        let report = EvalReport {
            run_id: self.keys.eval.clone(),
            dense,
            pruned,
            recovered,
            gap_recovered: (gap > 0.0).then(|| (recovered.accuracy - pruned.accuracy) / gap),
            selected_heads: selected,
            sparsity,
            loss_curve: st.plan.as_ref().expect("ran").loss_curve.clone(),
            tables,
            config: self.cfg.clone(),
        };
        format::write_file(&path, report.to_json()?.as_bytes())?;
        st.artifacts.push(rel);
        st.report = Some(report);
        Ok(())
    }
}

/// Runs the pipeline once per value of `axis` and writes the table to
/// `out_dir/sweeps/<hash>.csv`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<(Vec<SweepRow>, PathBuf)> {
    if values.is_empty() {
        return Err(LccError::InvalidArgument("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    let mut ids = Vec::new();
    for &value in values {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(LccError::InvalidArgument(format!("k = {value} is not a positive integer")));
                }
                c.probe.k = value as usize;
            }
            SweepAxis::HeadFraction => c.probe.fraction = value,
        }
        let pipe = Pipeline::new(c)?;
        let r = pipe.run()?;
        ids.push(r.run_id.clone());
        rows.push(SweepRow {
            value,
            accuracy: r.recovered.accuracy,
            gap_recovered: r.gap_recovered,
            overhead: r.sparsity.overhead,
            run_id: r.run_id,
        });
    }
    let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let name = hash_parts(&[&json(&axis), &id_refs.join(",")]);
    let path = cfg.out_dir.join("sweeps").join(format!("{name}.csv"));
    format::write_file(&path, sweep_csv(axis, &rows).as_bytes())?;
    Ok((rows, path))
}

fn heads_list(heads: &[HeadSite]) -> String {
    heads.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(" ")
}

fn write_traces(dense: &ActivationTrace, pruned: &ActivationTrace) -> Result<Vec<u8>> {
    if dense.sample_ids != pruned.sample_ids || dense.position != pruned.position {
        return Err(LccError::InvalidArgument("traces are not aligned".into()));
    }
    let sites: Vec<Site> = dense.sites.keys().copied().collect();
    let meta = serde_json::json!({
        "position": dense.position,
        "sample_ids": dense.sample_ids,
        "sites": sites,
    });
    let mut tensors = Vec::new();
    for (i, s) in sites.iter().enumerate() {
        for (tag, t) in [("dense", dense), ("pruned", pruned)] {
            let m = t.get(*s)?;
            tensors.push((format!("{tag}.{i}"), vec![m.rows(), m.cols()], TensorData::F64(m.data())));
        }
    }
    format::encode(TRACE_FORMAT, meta, &tensors)
}

fn read_traces(bytes: &[u8]) -> Result<(ActivationTrace, ActivationTrace)> {
    let d = format::decode(bytes, TRACE_FORMAT)?;
    let meta = &d.header.meta;
    let bad = |e: serde_json::Error| LccError::Format(format!("bad trace header: {e}"));
    let position: PositionPolicy = serde_json::from_value(meta["position"].clone()).map_err(bad)?;
    let sample_ids: Vec<usize> = serde_json::from_value(meta["sample_ids"].clone()).map_err(bad)?;
    let sites: Vec<Site> = serde_json::from_value(meta["sites"].clone()).map_err(bad)?;
    let mut out = Vec::new();
    for tag in ["dense", "pruned"] {
        let mut map = std::collections::BTreeMap::new();
        for (i, s) in sites.iter().enumerate() {
            let name = format!("{tag}.{i}");
            let shape = d.entry(&name)?.shape.clone();
            if shape.len() != 2 {
                return Err(LccError::Format(format!("{name} is not a matrix")));
            }
            map.insert(*s, Matrix::from_vec(shape[0], shape[1], d.f64(&name)?)?);
        }
        out.push(ActivationTrace {
            position,
            sample_ids: sample_ids.clone(),
            sites: map,
        });
    }
    let pruned = out.pop().expect("two traces");
    let dense = out.pop().expect("two traces");
    Ok((dense, pruned))
}
