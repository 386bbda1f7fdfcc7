//! Lost component compensation: per-site learnable vectors
//! `c = V·β + b` over fixed singular directions, trained through the frozen
//! pruned model and folded into its bias slots.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LccError, Result};
use crate::format::{self, TensorData};
use crate::linalg::{complete_basis, Matrix};
use crate::lossdiff::{assemble_loss_matrix, capture_pair, decompose, SvdComponents};
use crate::model::{
    backward, cross_entropy_and_grad, forward, forward_cached, ActivationHook, Adam, BackwardSeed,
    Gradients, LossMask, ModelParams, PositionPolicy, Real, Site,
};

const PLAN_FORMAT: &str = "lcc-plan";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    AttentionHead,
    FfnOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentFlags {
    /// Include the `V·β` term.
    pub use_directions: bool,
    /// Include the free bias `b`.
    pub use_bias: bool,
    /// Start `β` at zero instead of the mean projection coefficients.
    pub zero_init: bool,
}

impl Default for ComponentFlags {
    fn default() -> Self {
        Self {
            use_directions: true,
            use_bias: true,
            zero_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedComponent {
    pub site: Site,
    /// `d × d`; column `i` is direction `v_i`.
    v: Matrix,
    pub beta: Vec<f64>,
    pub bias: Vec<f64>,
    pub flags: ComponentFlags,
}

impl LearnedComponent {
    /// Builds a component from explicit parts; `v` must be square with
    /// orthonormal columns.
    pub fn new(site: Site, v: Matrix, beta: Vec<f64>, bias: Vec<f64>, flags: ComponentFlags) -> Result<Self> {
        let d = v.rows();
        if v.cols() != d || beta.len() != d || bias.len() != d {
            return Err(LccError::shape(
                format!("{d}×{d} directions with length-{d} β and b"),
                format!("{:?}, {}, {}", v.shape(), beta.len(), bias.len()),
            ));
        }
        let err = v.orthonormality_error();
        if err > 1e-6 {
            return Err(LccError::InvalidArgument(format!(
                "directions deviate from orthonormal by {err:.3e}"
            )));
        }
        for x in beta.iter().chain(&bias) {
            if !x.is_finite() {
                return Err(LccError::InvalidArgument("non-finite component parameter".into()));
            }
        }
        Ok(Self {
            site,
            v,
            beta,
            bias,
            flags,
        })
    }

    pub fn directions(&self) -> &Matrix {
        &self.v
    }

    pub fn width(&self) -> usize {
        self.v.rows()
    }

    /// `(use_directions ? V·β : 0) + (use_bias ? b : 0)`.
    pub fn compose(&self) -> Vec<f64> {
        let d = self.width();
        let mut c = if self.flags.use_directions {
            self.v.matvec(&self.beta).expect("square directions")
        } else {
            vec![0.0; d]
        };
        if self.flags.use_bias {
            c.iter_mut().zip(&self.bias).for_each(|(a, b)| *a += b);
        }
        c
    }
}

/// Directions from the right singular vectors (completed to a full basis
/// when the loss matrix has fewer rows than columns), `β` at the mean
/// projection coefficients and `b = 0`.
pub fn init_learned_component(site: Site, comp: &SvdComponents, flags: ComponentFlags) -> Result<LearnedComponent> {
    let d = comp.width();
    let r = comp.factors.sigma.len();
    let cols: Vec<Option<Vec<f64>>> = (0..d)
        .map(|i| (i < r).then(|| comp.factors.right_vector(i)))
        .collect();
    let cols = complete_basis(d, cols);
    let mut v = Matrix::zeros(d, d);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            v.set(i, j, x);
        }
    }
    let beta = if flags.zero_init {
        vec![0.0; d]
    } else {
        (0..d).map(|i| comp.alpha_bar.get(i).copied().unwrap_or(0.0)).collect()
    };
    LearnedComponent::new(site, v, beta, vec![0.0; d], flags)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LccHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Restrict the loss to response tokens.
    pub response_only: bool,
}

impl Default for LccHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 40,
            batch_size: 8,
            seed: 0,
            response_only: false,
        }
    }
}

/// One recovery sequence; tokens from `response_start` on form the
/// response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoverySample {
    pub tokens: Vec<u32>,
    pub response_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryPlan {
    pub target: Target,
    pub components: Vec<LearnedComponent>,
    pub hyper: LccHyper,
    /// Free-form description of the training data.
    pub data_ref: String,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

impl RecoveryPlan {
    pub fn new(target: Target, components: Vec<LearnedComponent>, hyper: LccHyper) -> Result<Self> {
        let plan = Self {
            target,
            components,
            hyper,
            data_ref: String::new(),
            loss_curve: Vec::new(),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.components {
            let ok = matches!(
                (self.target, c.site),
                (Target::AttentionHead, Site::Head { .. }) | (Target::FfnOutput, Site::Ffn { .. })
            );
            if !ok {
                return Err(LccError::InvalidArgument(format!(
                    "site {} does not match target {:?}",
                    c.site, self.target
                )));
            }
            if !seen.insert(c.site) {
                return Err(LccError::InvalidArgument(format!("site {} has two components", c.site)));
            }
        }
        Ok(())
    }

    pub fn sites(&self) -> Vec<Site> {
        self.components.iter().map(|c| c.site).collect()
    }

    fn check_model<F: Real>(&self, params: &ModelParams<F>) -> Result<()> {
        for c in &self.components {
            c.site.check(&params.config)?;
            if c.site.width(&params.config) != c.width() {
                return Err(LccError::shape(c.site.width(&params.config), c.width()));
            }
        }
        Ok(())
    }

    /// Composed vectors keyed by site.
    pub fn composed(&self) -> BTreeMap<Site, Vec<f64>> {
        self.components.iter().map(|c| (c.site, c.compose())).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let sites: Vec<_> = self
            .components
            .iter()
            .map(|c| serde_json::json!({"site": c.site, "flags": c.flags}))
            .collect();
        let meta = serde_json::json!({
            "target": self.target,
            "hyper": self.hyper,
            "data_ref": self.data_ref,
            "loss_curve": self.loss_curve,
            "sites": sites,
        });
        let mut tensors = Vec::new();
        for (i, c) in self.components.iter().enumerate() {
            let d = c.width();
            tensors.push((format!("sites.{i}.v"), vec![d, d], TensorData::F64(c.v.data())));
            tensors.push((format!("sites.{i}.beta"), vec![d], TensorData::F64(&c.beta)));
            tensors.push((format!("sites.{i}.bias"), vec![d], TensorData::F64(&c.bias)));
        }
        format::encode(PLAN_FORMAT, meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = format::decode(bytes, PLAN_FORMAT)?;
        let meta = &decoded.header.meta;
        let bad = |what: &str, e: serde_json::Error| LccError::Format(format!("bad plan {what}: {e}"));
        let target: Target = serde_json::from_value(meta["target"].clone()).map_err(|e| bad("target", e))?;
        let hyper: LccHyper = serde_json::from_value(meta["hyper"].clone()).map_err(|e| bad("hyper", e))?;
        let data_ref: String = serde_json::from_value(meta["data_ref"].clone()).map_err(|e| bad("data_ref", e))?;
        let loss_curve: Vec<f64> =
            serde_json::from_value(meta["loss_curve"].clone()).map_err(|e| bad("loss_curve", e))?;
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Entry {
            site: Site,
            flags: ComponentFlags,
        }
        let entries: Vec<Entry> = serde_json::from_value(meta["sites"].clone()).map_err(|e| bad("sites", e))?;
        let mut components = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            let v = decoded.f64(&format!("sites.{i}.v"))?;
            let d = decoded.entry(&format!("sites.{i}.beta"))?.numel();
            let v = Matrix::from_vec(d, d, v)?;
            components.push(LearnedComponent::new(
                e.site,
                v,
                decoded.f64(&format!("sites.{i}.beta"))?,
                decoded.f64(&format!("sites.{i}.bias"))?,
                e.flags,
            )?);
        }
        if decoded.header.tensors.len() != 3 * components.len() {
            return Err(LccError::Format("plan has unexpected tensors".into()));
        }
        let plan = Self {
            target,
            components,
            hyper,
            data_ref,
            loss_curve,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&format::read_file(path)?)
    }
}

/// Loss matrices of `sites` between the two models over `prompts`,
/// decomposed and turned into freshly initialized components.
pub fn build_plan<F: Real>(
    dense: &ModelParams<F>,
    pruned: &ModelParams<F>,
    prompts: &[Vec<u32>],
    sites: &[Site],
    target: Target,
    flags: ComponentFlags,
    hyper: LccHyper,
) -> Result<RecoveryPlan> {
    let (td, tp) = capture_pair(dense, pruned, prompts, sites, PositionPolicy::Last)?;
    let mut components = Vec::with_capacity(sites.len());
    for &site in sites {
        let comp = decompose(&assemble_loss_matrix(&td, &tp, site)?)?;
        components.push(init_learned_component(site, &comp, flags)?);
    }
    RecoveryPlan::new(target, components, hyper)
}

/// Adds fixed vectors to site activations at every position.
struct AddComponents<F> {
    heads: BTreeMap<(usize, usize), Vec<F>>,
    ffn: BTreeMap<usize, Vec<F>>,
}

impl<F: Real> AddComponents<F> {
    fn new(plan: &RecoveryPlan) -> Self {
        let mut heads = BTreeMap::new();
        let mut ffn = BTreeMap::new();
        for (site, c) in plan.composed() {
            let c: Vec<F> = c.into_iter().map(F::of).collect();
            match site {
                Site::Head { layer, head } => {
                    heads.insert((layer, head), c);
                }
                Site::Ffn { layer } => {
                    ffn.insert(layer, c);
                }
            }
        }
        Self { heads, ffn }
    }
}

impl<F: Real> ActivationHook<F> for AddComponents<F> {
    fn on_head(&mut self, layer: usize, head: usize, _pos: usize, z: &mut [F]) {
        if let Some(c) = self.heads.get(&(layer, head)) {
            z.iter_mut().zip(c).for_each(|(a, &b)| *a += b);
        }
    }

    fn on_ffn(&mut self, layer: usize, _pos: usize, out: &mut [F]) {
        if let Some(c) = self.ffn.get(&layer) {
            out.iter_mut().zip(c).for_each(|(a, &b)| *a += b);
        }
    }
}

/// Forward pass of the pruned model with every composed component added to
/// its site's activation.
pub fn recovery_forward<F: Real>(
    pruned: &ModelParams<F>,
    plan: &RecoveryPlan,
    tokens: &[u32],
) -> Result<crate::model::Logits<F>> {
    plan.check_model(pruned)?;
    let mut hook = AddComponents::new(plan);
    forward(pruned, tokens, Some(&mut hook))
}

/// Adds each composed component to its site's bias slot. Weight matrices
/// are not touched.
pub fn fold_components<F: Real>(pruned: &ModelParams<F>, plan: &RecoveryPlan) -> Result<ModelParams<F>> {
    plan.check_model(pruned)?;
    let mut out = pruned.clone();
    for (site, c) in plan.composed() {
        let slot: Vec<F> = out
            .site_bias(site)
            .iter()
            .zip(&c)
            .map(|(&s, &x)| s + F::of(x))
            .collect();
        out.inject_site_bias(site, &slot)?;
    }
    Ok(out)
}

/// What the trainable parameters are scored against.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Mean next-token cross-entropy.
    CrossEntropy { response_only: bool },
    /// `Σ_t r · x_final[t]`: a linear readout of the final residual stream,
    /// used to check gradients on models that are linear in the components.
    ResidualReadout(Vec<f64>),
}

/// Loss of a batch plus `∂loss/∂β` and `∂loss/∂b` per component.
fn loss_and_grads<F: Real>(
    pruned: &ModelParams<F>,
    plan: &RecoveryPlan,
    batch: &[&RecoverySample],
    objective: &Objective,
) -> Result<(f64, Vec<(Vec<f64>, Vec<f64>)>)> {
    let params = fold_components(pruned, plan)?;
    let counts: Vec<usize> = batch
        .iter()
        .map(|s| match objective {
            Objective::CrossEntropy { response_only } => {
                let mask = if *response_only {
                    LossMask::FromIndex(s.response_start)
                } else {
                    LossMask::AllTokens
                };
                mask.positions(s.tokens.len()).len()
            }
            Objective::ResidualReadout(_) => 1,
        })
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(LccError::InvalidArgument("batch has no scored tokens".into()));
    }
    let scale = 1.0 / total as f64;
    let mut grads = Gradients::<F>::zeros(&params.config);
    let mut loss = 0.0;
    for s in batch {
        let cache = forward_cached(&params, &s.tokens, None)?;
        match objective {
            Objective::CrossEntropy { response_only } => {
                let mask = if *response_only {
                    LossMask::FromIndex(s.response_start)
                } else {
                    LossMask::AllTokens
                };
                let (l, _, dl) = cross_entropy_and_grad(&cache.logits, &s.tokens, mask, scale);
                loss += l * scale;
                backward(&params, &cache, BackwardSeed::Logits(&dl), &mut grads, false);
            }
            Objective::ResidualReadout(r) => {
                let d = params.config.d_model;
                if r.len() != d {
                    return Err(LccError::shape(d, r.len()));
                }
                let x = cache.final_residual();
                let mut seed = Vec::with_capacity(x.len());
                for row in x.chunks_exact(d) {
                    loss += row.iter().zip(r).map(|(a, b)| a.as_f64() * b).sum::<f64>() * scale;
                    seed.extend(r.iter().map(|&v| F::of(v * scale)));
                }
                backward(&params, &cache, BackwardSeed::FinalResidual(&seed), &mut grads, false);
            }
        }
    }
    let out = plan
        .components
        .iter()
        .map(|c| {
            let g: Vec<f64> = grads.site_bias(c.site).iter().map(|x| x.as_f64()).collect();
            let d = c.width();
            let dbeta = if c.flags.use_directions {
                (0..d)
                    .map(|i| (0..d).map(|j| c.v.get(j, i) * g[j]).sum())
                    .collect()
            } else {
                vec![0.0; d]
            };
            let dbias = if c.flags.use_bias { g } else { vec![0.0; d] };
            (dbeta, dbias)
        })
        .collect();
    Ok((loss, out))
}

/// Training stopped on a non-finite loss; `last_good` holds the plan as of
/// the last finite step.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: LccError,
    pub last_good: Box<RecoveryPlan>,
}

impl fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainAbort {}

impl From<TrainAbort> for LccError {
    fn from(a: TrainAbort) -> Self {
        a.error
    }
}

/// Trains only `β` and `b` of every component with Adam on next-token
/// cross-entropy through the frozen pruned model.
pub fn train_components<F: Real>(
    pruned: &ModelParams<F>,
    plan: &RecoveryPlan,
    data: &[RecoverySample],
) -> std::result::Result<RecoveryPlan, TrainAbort> {
    let abort = |error: LccError, plan: &RecoveryPlan| TrainAbort {
        error,
        last_good: Box::new(plan.clone()),
    };
    let mut plan = plan.clone();
    let hyper = plan.hyper.clone();
    if let Err(e) = plan.check_model(pruned) {
        return Err(abort(e, &plan));
    }
    if hyper.epochs == 0 || plan.components.is_empty() {
        return Ok(plan);
    }
    if data.is_empty() || hyper.batch_size == 0 {
        return Err(abort(
            LccError::InvalidArgument("recovery needs data and a positive batch size".into()),
            &plan,
        ));
    }
    let objective = Objective::CrossEntropy {
        response_only: hyper.response_only,
    };
    let shapes: Vec<usize> = plan.components.iter().flat_map(|c| [c.width(), c.width()]).collect();
    let mut adam = Adam::<f64>::new(hyper.lr, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&RecoverySample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = match loss_and_grads(pruned, &plan, &batch, &objective) {
                Ok(r) => r,
                Err(e) => return Err(abort(e, &plan)),
            };
            let finite = loss.is_finite() && grads.iter().all(|(a, b)| a.iter().chain(b).all(|x| x.is_finite()));
            if !finite {
                return Err(abort(LccError::Diverged { step, loss }, &plan));
            }
            let snapshot = plan.clone();
            let mut ps: Vec<&mut [f64]> = Vec::new();
            for c in plan.components.iter_mut() {
                ps.push(&mut c.beta);
                ps.push(&mut c.bias);
            }
            let gs: Vec<&[f64]> = grads.iter().flat_map(|(a, b)| [a.as_slice(), b.as_slice()]).collect();
            adam.step(&mut ps, &gs);
            if plan.components.iter().any(|c| c.beta.iter().chain(&c.bias).any(|x| !x.is_finite())) {
                return Err(abort(LccError::Diverged { step, loss }, &snapshot));
            }
            sum += loss;
            batches += 1;
            step += 1;
        }
        plan.loss_curve.push(sum / batches as f64);
    }
    Ok(plan)
}

/// Largest relative difference between the analytic gradients of every
/// trainable scalar and central finite differences with step `1e-4`.
///
/// The relative error is `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps
/// near-zero gradients from dividing by rounding noise.
pub fn gradient_check(
    plan: &RecoveryPlan,
    pruned: &ModelParams<f64>,
    batch: &[RecoverySample],
    objective: &Objective,
) -> Result<f64> {
    let refs: Vec<&RecoverySample> = batch.iter().collect();
    let (_, analytic) = loss_and_grads(pruned, plan, &refs, objective)?;
    let h = 1e-4;
    let loss_at = |p: &RecoveryPlan| -> Result<f64> { Ok(loss_and_grads(pruned, p, &refs, objective)?.0) };
    let mut worst = 0.0f64;
    for (ci, c) in plan.components.iter().enumerate() {
        for which in 0..2 {
            let active = if which == 0 { c.flags.use_directions } else { c.flags.use_bias };
            if !active {
                continue;
            }
            for j in 0..c.width() {
                let nudge = |delta: f64| {
                    let mut p = plan.clone();
                    let comp = &mut p.components[ci];
                    let v = if which == 0 { &mut comp.beta } else { &mut comp.bias };
                    v[j] += delta;
                    p
                };
                let numeric = (loss_at(&nudge(h))? - loss_at(&nudge(-h))?) / (2.0 * h);
                let a = if which == 0 { analytic[ci].0[j] } else { analytic[ci].1[j] };
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd_thin;
    use crate::lossdiff::LossMatrix;

    fn comps(rows: &[Vec<f64>]) -> SvdComponents {
        let lm = LossMatrix {
            site: Site::Head { layer: 0, head: 0 },
            delta: Matrix::from_rows(rows).unwrap(),
            position: PositionPolicy::Last,
        };
        decompose(&lm).unwrap()
    }

    #[test]
    fn zero_loss_initializes_to_zero() {
        let lc = init_learned_component(Site::Head { layer: 0, head: 0 }, &comps(&vec![vec![0.0; 3]; 4]), Default::default()).unwrap();
        assert!(lc.beta.iter().all(|&x| x == 0.0));
        assert!(lc.compose().iter().all(|&x| x == 0.0));
        assert!(lc.directions().orthonormality_error() < 1e-12);
    }

    #[test]
    fn rank_one_warm_start_composes_row() {
        let w = vec![1.0, -2.0, 0.5];
        let lc = init_learned_component(Site::Head { layer: 0, head: 0 }, &comps(&vec![w.clone(); 5]), Default::default()).unwrap();
        for (a, b) in lc.compose().iter().zip(&w) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn wide_loss_matrix_gets_completed_basis() {
        let lc = init_learned_component(
            Site::Head { layer: 0, head: 0 },
            &comps(&[vec![1.0, 2.0, 3.0, 4.0]]),
            Default::default(),
        )
        .unwrap();
        assert_eq!(lc.directions().shape(), (4, 4));
        assert!(lc.directions().orthonormality_error() < 1e-12);
    }

    #[test]
    fn compose_follows_flags() {
        let v = svd_thin(&Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap()).unwrap().v;
        let site = Site::Head { layer: 0, head: 0 };
        let mut lc = LearnedComponent::new(site, v.clone(), vec![1.0, 0.0], vec![0.0; 2], Default::default()).unwrap();
        assert_eq!(lc.compose(), v.column(0));
        lc.bias = vec![0.5, -0.5];
        lc.flags.use_directions = false;
        assert_eq!(lc.compose(), vec![0.5, -0.5]);
        lc.flags.use_bias = false;
        assert_eq!(lc.compose(), vec![0.0, 0.0]);
        assert!(LearnedComponent::new(site, Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap(), vec![0.0; 2], vec![0.0; 2], Default::default()).is_err());
    }

    #[test]
    fn plan_validation() {
        let lc = init_learned_component(Site::Head { layer: 0, head: 0 }, &comps(&[vec![1.0, 0.0]]), Default::default()).unwrap();
        assert!(RecoveryPlan::new(Target::FfnOutput, vec![lc.clone()], Default::default()).is_err());
        assert!(RecoveryPlan::new(Target::AttentionHead, vec![lc.clone(), lc], Default::default()).is_err());
    }
}
