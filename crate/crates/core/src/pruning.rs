//! Weight pruning: activation-aware unstructured, N:M semi-structured and
//! whole-head structured removal, with mask bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LccError, Result};
use crate::format::{self, TensorData};
use crate::linalg::Matrix;
use crate::model::{forward_cached, HeadSite, ModelConfig, ModelParams, Real, WeightId, WeightKind};

const MASK_FORMAT: &str = "lcc-mask";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PruneScheme {
    Unstructured,
    SemiStructured { n: usize, m: usize },
    StructuredHeads,
}

/// Keep-masks (`true` = kept) for every prunable matrix of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub scheme: PruneScheme,
    pub masks: BTreeMap<WeightId, Vec<bool>>,
    /// Heads removed by structured pruning, in ascending order.
    pub removed_heads: Vec<HeadSite>,
}

/// Per-matrix importance scores, laid out like the weights (`out × in`).
/// Matrices without an entry are left untouched by the prune operations.
pub type WeightScores = BTreeMap<WeightId, Vec<f64>>;

/// Per-matrix input-feature norms `‖X_j‖₂` gathered from calibration data.
pub type CalibrationNorms = BTreeMap<WeightId, Vec<f64>>;

impl PruneMask {
    /// A mask keeping every weight.
    pub fn dense<F: Real>(params: &ModelParams<F>, scheme: PruneScheme) -> Self {
        let masks = params
            .weight_ids()
            .into_iter()
            .map(|id| (id, vec![true; params.weight(id).len()]))
            .collect();
        Self {
            scheme,
            masks,
            removed_heads: Vec::new(),
        }
    }

    pub fn pruned_count(&self) -> usize {
        self.masks.values().map(|m| m.iter().filter(|&&k| !k).count()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.masks.values().map(Vec::len).sum()
    }

    /// Zeroes every masked weight of `params`.
    pub fn apply<F: Real>(&self, params: &mut ModelParams<F>) -> Result<()> {
        for (&id, mask) in &self.masks {
            if id.layer >= params.config.n_layers {
                return Err(LccError::SiteOutOfRange(format!("mask for {}", id.name())));
            }
            let w = params.weight_mut(id);
            if w.len() != mask.len() {
                return Err(LccError::shape(format!("{} entries for {}", w.len(), id.name()), mask.len()));
            }
            for (x, &keep) in w.iter_mut().zip(mask) {
                if !keep {
                    *x = F::zero();
                }
            }
        }
        Ok(())
    }

    /// Checks that every masked weight of `params` is exactly zero.
    pub fn check_faithful<F: Real>(&self, params: &ModelParams<F>) -> Result<()> {
        for (&id, mask) in &self.masks {
            let w = params.weight(id);
            if w.len() != mask.len() {
                return Err(LccError::shape(format!("{} entries for {}", w.len(), id.name()), mask.len()));
            }
            if let Some(i) = (0..w.len()).find(|&i| !mask[i] && w[i] != F::zero()) {
                return Err(LccError::InvalidArgument(format!(
                    "{} entry {i} is masked but holds {}",
                    id.name(),
                    w[i].as_f64()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self, config: &ModelConfig) -> Result<Vec<u8>> {
        let probe = ModelParams::<f32>::zeros(config);
        let meta = serde_json::json!({
            "scheme": self.scheme,
            "removed_heads": self.removed_heads,
        });
        let tensors: Vec<_> = self
            .masks
            .iter()
            .map(|(id, m)| {
                let (r, c) = probe.weight_shape(id.kind);
                (id.name(), vec![r, c], TensorData::Bits(m))
            })
            .collect();
        format::encode(MASK_FORMAT, meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<Self> {
        let decoded = format::decode(bytes, MASK_FORMAT)?;
        let meta = &decoded.header.meta;
        let scheme: PruneScheme = serde_json::from_value(meta["scheme"].clone())
            .map_err(|e| LccError::Format(format!("bad mask scheme: {e}")))?;
        let removed_heads: Vec<HeadSite> = serde_json::from_value(meta["removed_heads"].clone())
            .map_err(|e| LccError::Format(format!("bad removed head list: {e}")))?;
        let probe = ModelParams::<f32>::zeros(config);
        let mut masks = BTreeMap::new();
        for id in probe.weight_ids() {
            let (r, c) = probe.weight_shape(id.kind);
            let name = id.name();
            let entry = decoded.entry(&name)?;
            if entry.shape != [r, c] {
                return Err(LccError::Format(format!("{name} has shape {:?}", entry.shape)));
            }
            masks.insert(id, decoded.bits(&name)?);
        }
        if decoded.header.tensors.len() != masks.len() {
            return Err(LccError::Format("mask has unexpected tensors".into()));
        }
        Ok(Self {
            scheme,
            masks,
            removed_heads,
        })
    }

    pub fn save(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        format::write_file(path, &self.to_bytes(config)?)
    }

    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        Self::from_bytes(&format::read_file(path)?, config)
    }
}

/// `score[i, j] = |w[i, j]| · norm[j]`.
pub fn score_weights_wanda(w: &Matrix, norms: &[f64]) -> Result<Matrix> {
    if norms.len() != w.cols() {
        return Err(LccError::shape(format!("{} input-feature norms", w.cols()), norms.len()));
    }
    if let Some(bad) = norms.iter().find(|n| !(**n >= 0.0)) {
        return Err(LccError::InvalidArgument(format!("negative or NaN norm {bad}")));
    }
    let (r, c) = w.shape();
    let mut s = Matrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            s.set(i, j, w.get(i, j).abs() * norms[j]);
        }
    }
    Ok(s)
}

/// Column norms of every weight matrix's input over all positions of the
/// calibration sequences, computed on `params` (normally the dense model).
pub fn calibration_norms<F: Real>(params: &ModelParams<F>, samples: &[Vec<u32>]) -> Result<CalibrationNorms> {
    if samples.is_empty() {
        return Err(LccError::InvalidArgument("no calibration samples".into()));
    }
    let ids = params.weight_ids();
    let mut sq: BTreeMap<WeightId, Vec<f64>> = ids
        .iter()
        .map(|&id| (id, vec![0.0; params.weight_shape(id.kind).1]))
        .collect();
    for tokens in samples {
        let cache = forward_cached(params, tokens, None)?;
        for &id in &ids {
            let acc = sq.get_mut(&id).expect("every id present");
            let width = acc.len();
            for row in cache.weight_input(id).chunks_exact(width) {
                for (a, x) in acc.iter_mut().zip(row) {
                    let x = x.as_f64();
                    *a += x * x;
                }
            }
        }
    }
    Ok(sq
        .into_iter()
        .map(|(id, v)| (id, v.into_iter().map(f64::sqrt).collect()))
        .collect())
}

/// Wanda scores for the matrices of the requested kinds.
pub fn wanda_scores<F: Real>(
    params: &ModelParams<F>,
    norms: &CalibrationNorms,
    kinds: &[WeightKind],
) -> Result<WeightScores> {
    let mut out = BTreeMap::new();
    for id in params.weight_ids() {
        if !kinds.contains(&id.kind) {
            continue;
        }
        let (r, c) = params.weight_shape(id.kind);
        let w = Matrix::from_vec(r, c, params.weight(id).iter().map(|x| x.as_f64()).collect())?;
        let n = norms
            .get(&id)
            .ok_or_else(|| LccError::InvalidArgument(format!("no calibration norms for {}", id.name())))?;
        out.insert(id, score_weights_wanda(&w, n)?.into_data());
    }
    Ok(out)
}

fn check_scores<F: Real>(params: &ModelParams<F>, scores: &WeightScores) -> Result<()> {
    for (id, s) in scores {
        if id.layer >= params.config.n_layers {
            return Err(LccError::SiteOutOfRange(format!("scores for {}", id.name())));
        }
        let want = params.weight(*id).len();
        if s.len() != want {
            return Err(LccError::shape(format!("{want} scores for {}", id.name()), s.len()));
        }
    }
    Ok(())
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(LccError::InvalidArgument(format!("ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Zeroes the lowest-scoring `⌊ratio · count⌋` weights of each scored
/// matrix. Ties are broken towards the lower flattened index.
pub fn prune_unstructured<F: Real>(
    params: &ModelParams<F>,
    ratio: f64,
    scores: &WeightScores,
) -> Result<(ModelParams<F>, PruneMask)> {
    check_ratio(ratio)?;
    check_scores(params, scores)?;
    let mut mask = PruneMask::dense(params, PruneScheme::Unstructured);
    for (id, s) in scores {
        let k = (ratio * s.len() as f64).floor() as usize;
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        let m = mask.masks.get_mut(id).expect("dense mask covers every matrix");
        for &i in &order[..k] {
            m[i] = false;
        }
    }
    let mut pruned = params.clone();
    mask.apply(&mut pruned)?;
    Ok((pruned, mask))
}

/// Keeps the `n` highest-scoring weights of every `m` consecutive weights
/// along the input dimension. Ties favor the lower index.
pub fn prune_semi_structured<F: Real>(
    params: &ModelParams<F>,
    n: usize,
    m: usize,
    scores: &WeightScores,
) -> Result<(ModelParams<F>, PruneMask)> {
    if n == 0 || n >= m {
        return Err(LccError::InvalidArgument(format!("{n}:{m} needs 0 < N < M")));
    }
    check_scores(params, scores)?;
    let mut mask = PruneMask::dense(params, PruneScheme::SemiStructured { n, m });
    for (id, s) in scores {
        let cols = params.weight_shape(id.kind).1;
        if !cols.is_multiple_of(m) {
            let padded = cols.div_ceil(m) * m;
            return Err(LccError::InvalidArgument(format!(
                "{}: input dimension {cols} is not divisible by {m}; pad by {} to {padded}",
                id.name(),
                padded - cols
            )));
        }
        let keep = mask.masks.get_mut(id).expect("dense mask covers every matrix");
        for start in (0..s.len()).step_by(m) {
            let mut group: Vec<usize> = (start..start + m).collect();
            group.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            for &i in &group[n..] {
                keep[i] = false;
            }
        }
    }
    let mut pruned = params.clone();
    mask.apply(&mut pruned)?;
    Ok((pruned, mask))
}

/// Flattened indices of head `h`'s slices: rows of W^Q/W^K/W^V and columns
/// of W^O.
fn head_entries(cfg: &ModelConfig, kind: WeightKind, head: usize) -> Vec<usize> {
    let (d, dh) = (cfg.d_model, cfg.d_head);
    let span = head * dh..(head + 1) * dh;
    match kind {
        WeightKind::Q | WeightKind::K | WeightKind::V => span.flat_map(|r| r * d..(r + 1) * d).collect(),
        WeightKind::O => (0..d).flat_map(|r| span.clone().map(move |c| r * d + c)).collect(),
        _ => Vec::new(),
    }
}

/// Default head importance: the sum of the Wanda scores over the head's
/// W^Q/W^K/W^V rows and W^O columns.
pub fn head_scores_from_weights(cfg: &ModelConfig, scores: &WeightScores) -> Result<BTreeMap<HeadSite, f64>> {
    let mut out = BTreeMap::new();
    for site in cfg.heads() {
        let mut total = 0.0;
        for kind in [WeightKind::Q, WeightKind::K, WeightKind::V, WeightKind::O] {
            let id = WeightId {
                layer: site.layer,
                kind,
            };
            let s = scores
                .get(&id)
                .ok_or_else(|| LccError::InvalidArgument(format!("no scores for {}", id.name())))?;
            total += head_entries(cfg, kind, site.head).iter().map(|&i| s[i]).sum::<f64>();
        }
        out.insert(site, total);
    }
    Ok(out)
}

/// Removes the `⌊ratio · L · H⌋` lowest-scoring heads by zeroing their
/// query/key/value rows and output-projection columns.
pub fn prune_structured_heads<F: Real>(
    params: &ModelParams<F>,
    ratio: f64,
    head_scores: &BTreeMap<HeadSite, f64>,
) -> Result<(ModelParams<F>, PruneMask)> {
    check_ratio(ratio)?;
    let cfg = &params.config;
    let all: Vec<HeadSite> = cfg.heads().collect();
    for site in &all {
        if !head_scores.contains_key(site) {
            return Err(LccError::InvalidArgument(format!("no score for head {site}")));
        }
    }
    let k = (ratio * all.len() as f64).floor() as usize;
    let mut order = all.clone();
    order.sort_by(|a, b| head_scores[a].total_cmp(&head_scores[b]).then(a.cmp(b)));
    let removed: BTreeSet<HeadSite> = order[..k].iter().copied().collect();
    for layer in 0..cfg.n_layers {
        if removed.iter().filter(|s| s.layer == layer).count() == cfg.n_heads {
            return Err(LccError::InvalidArgument(format!(
                "ratio {ratio} would remove every head of layer {layer}"
            )));
        }
    }
    let mut mask = PruneMask::dense(params, PruneScheme::StructuredHeads);
    for site in &removed {
        for kind in [WeightKind::Q, WeightKind::K, WeightKind::V, WeightKind::O] {
            let m = mask
                .masks
                .get_mut(&WeightId {
                    layer: site.layer,
                    kind,
                })
                .expect("dense mask covers every matrix");
            for i in head_entries(cfg, kind, site.head) {
                m[i] = false;
            }
        }
    }
    mask.removed_heads = removed.into_iter().collect();
    let mut pruned = params.clone();
    mask.apply(&mut pruned)?;
    Ok((pruned, mask))
}

/// Parameters added by compensating `heads` of a layer, relative to the
/// layer's `4 · d_l²` attention parameters: `heads · d_h · 2 / (4 · d_l²)`.
pub fn compensation_overhead(heads: usize, d_head: usize, d_model: usize) -> f64 {
    (heads * d_head * 2) as f64 / (4 * d_model * d_model) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub global_sparsity: f64,
    /// Keyed by the matrix's manifest name.
    pub per_matrix: BTreeMap<String, f64>,
    /// Compensation overhead of each layer.
    pub overhead_per_layer: Vec<f64>,
    /// Largest per-layer overhead.
    pub overhead: f64,
}

pub fn sparsity_report<F: Real>(
    params: &ModelParams<F>,
    mask: &PruneMask,
    compensated_heads: &[HeadSite],
) -> Result<SparsityReport> {
    mask.check_faithful(params)?;
    let cfg = &params.config;
    let per_matrix = mask
        .masks
        .iter()
        .map(|(id, m)| {
            let pruned = m.iter().filter(|&&k| !k).count();
            (id.name(), pruned as f64 / m.len() as f64)
        })
        .collect();
    let unique: BTreeSet<HeadSite> = compensated_heads.iter().copied().collect();
    let mut overhead_per_layer = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let n = unique.iter().filter(|s| s.layer == layer).count();
        overhead_per_layer.push(compensation_overhead(n, cfg.d_head, cfg.d_model));
    }
    for s in &unique {
        crate::model::Site::from(*s).check(cfg)?;
    }
    let overhead = overhead_per_layer.iter().copied().fold(0.0, f64::max);
    Ok(SparsityReport {
        global_sparsity: mask.pruned_count() as f64 / mask.total_count() as f64,
        per_matrix,
        overhead_per_layer,
        overhead,
    })
}
