//! Activation loss between a dense and a pruned model: loss matrices, their
//! decomposition into lost components, compensation and logit-difference
//! diagnostics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LccError, Result};
use crate::linalg::{svd_thin, Matrix, SvdFactors};
use crate::model::{
    forward, forward_batch, logit_difference, logit_lens, ActivationHook, ActivationTrace,
    CaptureRequest, HeadSite, ModelParams, PositionPolicy, Real, Site,
};

/// A prompt whose next token is judged by the logit difference between a
/// correct and an incorrect answer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub correct: u32,
    pub incorrect: u32,
}

/// `ΔZ` for one site: row `n` is `z_dense − z_pruned` for sample `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    pub site: Site,
    pub delta: Matrix,
    pub position: PositionPolicy,
}

impl LossMatrix {
    pub fn n_samples(&self) -> usize {
        self.delta.rows()
    }
}

/// SVD of a loss matrix plus the per-component mean coefficients
/// `ᾱ_i = mean_n σ_i · u_i[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdComponents {
    pub factors: SvdFactors,
    pub alpha_bar: Vec<f64>,
}

/// An estimated lost component `c = Σ_{i<k} ᾱ_i v_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalComponent {
    pub c: Vec<f64>,
    pub k: usize,
}

fn check_same_config<F: Real>(a: &ModelParams<F>, b: &ModelParams<F>) -> Result<()> {
    if a.config != b.config {
        return Err(LccError::InvalidArgument(
            "dense and pruned models have different configurations".into(),
        ));
    }
    Ok(())
}

/// Captures the same sites at the same positions from both models.
pub fn capture_pair<F: Real>(
    dense: &ModelParams<F>,
    pruned: &ModelParams<F>,
    prompts: &[Vec<u32>],
    sites: &[Site],
    position: PositionPolicy,
) -> Result<(ActivationTrace, ActivationTrace)> {
    check_same_config(dense, pruned)?;
    let req = CaptureRequest {
        sites: sites.to_vec(),
        position,
    };
    let (_, d) = forward_batch(dense, prompts, Some(&req))?;
    let (_, p) = forward_batch(pruned, prompts, Some(&req))?;
    Ok((d.expect("capture requested"), p.expect("capture requested")))
}

pub fn assemble_loss_matrix(dense: &ActivationTrace, pruned: &ActivationTrace, site: Site) -> Result<LossMatrix> {
    if dense.position != pruned.position || dense.sample_ids != pruned.sample_ids {
        return Err(LccError::InvalidArgument("traces are not aligned".into()));
    }
    let zd = dense.get(site)?;
    let zp = pruned.get(site)?;
    if zd.shape() != zp.shape() {
        return Err(LccError::shape(format!("{:?}", zd.shape()), format!("{:?}", zp.shape())));
    }
    let data = zd.data().iter().zip(zp.data()).map(|(a, b)| a - b).collect();
    let delta = Matrix::from_vec(zd.rows(), zd.cols(), data)?;
    delta.check_finite()?;
    Ok(LossMatrix {
        site,
        delta,
        position: dense.position,
    })
}

pub fn decompose(lm: &LossMatrix) -> Result<SvdComponents> {
    if lm.n_samples() == 0 {
        return Err(LccError::InvalidArgument(format!("loss matrix for {} has no samples", lm.site)));
    }
    let factors = svd_thin(&lm.delta)?;
    let means = factors.u.column_means();
    let alpha_bar = factors.sigma.iter().zip(&means).map(|(s, m)| s * m).collect();
    Ok(SvdComponents { factors, alpha_bar })
}

impl SvdComponents {
    pub fn width(&self) -> usize {
        self.factors.v.rows()
    }

    /// `scale · Σ_{i<k} ᾱ_i v_i`; components beyond the rank bound add
    /// nothing.
    pub fn top_k(&self, k: usize, scale: f64) -> PrincipalComponent {
        let mut c = vec![0.0; self.width()];
        for i in 0..k.min(self.alpha_bar.len()) {
            let a = scale * self.alpha_bar[i];
            for (j, cj) in c.iter_mut().enumerate() {
                *cj += a * self.factors.v.get(j, i);
            }
        }
        PrincipalComponent { c, k }
    }

    /// `scale · ᾱ_i v_i` for a single component (zero past the rank bound).
    pub fn single(&self, i: usize, scale: f64) -> PrincipalComponent {
        let c = if i < self.alpha_bar.len() {
            let a = scale * self.alpha_bar[i];
            (0..self.width()).map(|j| a * self.factors.v.get(j, i)).collect()
        } else {
            vec![0.0; self.width()]
        };
        PrincipalComponent { c, k: 1 }
    }
}

pub fn estimate_lost_component(lm: &LossMatrix, k: usize) -> Result<PrincipalComponent> {
    if k == 0 || k > lm.delta.cols() {
        return Err(LccError::InvalidArgument(format!(
            "k = {k} outside 1..={}",
            lm.delta.cols()
        )));
    }
    Ok(decompose(lm)?.top_k(k, 1.0))
}

/// `z_c = z_p + c`.
pub fn compensate_activation(z_p: &[f64], c: &[f64]) -> Result<Vec<f64>> {
    if z_p.len() != c.len() {
        return Err(LccError::shape(z_p.len(), c.len()));
    }
    Ok(z_p.iter().zip(c).map(|(a, b)| a + b).collect())
}

pub fn logit_gain(lambda_recovered: f64, lambda_pruned: f64) -> f64 {
    lambda_recovered - lambda_pruned
}

/// Records every head output at every position.
#[derive(Default)]
struct HeadRecorder {
    /// `[layer][head][pos]`
    z: Vec<Vec<Vec<Vec<f64>>>>,
}

impl<F: Real> ActivationHook<F> for HeadRecorder {
    fn on_head(&mut self, layer: usize, head: usize, pos: usize, z: &mut [F]) {
        if self.z.len() <= layer {
            self.z.resize_with(layer + 1, Vec::new);
        }
        let l = &mut self.z[layer];
        if l.len() <= head {
            l.resize_with(head + 1, Vec::new);
        }
        debug_assert_eq!(l[head].len(), pos);
        l[head].push(z.iter().map(|x| x.as_f64()).collect());
    }
}

/// Injects per-sample oracle components `δz = z_dense − z_pruned` at every
/// head and position, turning each pruned head output back into the dense
/// one.
pub struct OracleCompensation {
    dense: HeadRecorder,
}

impl OracleCompensation {
    /// Records the dense model's head outputs for `tokens`.
    pub fn new<F: Real>(dense: &ModelParams<F>, tokens: &[u32]) -> Result<Self> {
        let mut rec = HeadRecorder::default();
        forward(dense, tokens, Some(&mut rec))?;
        Ok(Self { dense: rec })
    }
}

impl<F: Real> ActivationHook<F> for OracleCompensation {
    fn on_head(&mut self, layer: usize, head: usize, pos: usize, z: &mut [F]) {
        let zd = &self.dense.z[layer][head][pos];
        let zp: Vec<f64> = z.iter().map(|x| x.as_f64()).collect();
        let delta: Vec<f64> = zd.iter().zip(&zp).map(|(a, b)| a - b).collect();
        let zc = compensate_activation(&zp, &delta).expect("equal widths");
        for (o, v) in z.iter_mut().zip(zc) {
            *o = F::of(v);
        }
    }
}

/// Settings of a head recovery scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanOptions {
    /// Number of leading components composing `c`.
    pub k: usize,
    /// Multiplier applied to the component coefficients.
    pub scale: f64,
    /// Use only this component (0-based) instead of the top `k`.
    pub component: Option<usize>,
    pub position: PositionPolicy,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            k: 1,
            scale: 1.0,
            component: None,
            position: PositionPolicy::Last,
        }
    }
}

impl ScanOptions {
    /// Single minor component amplified by the conventional factor of 1000.
    pub fn minor_component(index: usize) -> Self {
        Self {
            k: 1,
            scale: 1000.0,
            component: Some(index),
            position: PositionPolicy::Last,
        }
    }
}

/// Mean logit differences of one head under the logit lens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGain {
    pub site: HeadSite,
    pub lambda_dense: f64,
    pub lambda_pruned: f64,
    pub lambda_recovered: f64,
    pub gain: f64,
}

/// For every head: estimate `c` from the dense/pruned loss matrix over
/// `prompts`, add it to each pruned activation and compare logit
/// differences read through the logit lens.
pub fn head_recovery_scan<F: Real>(
    dense: &ModelParams<F>,
    pruned: &ModelParams<F>,
    prompts: &[Prompt],
    opts: &ScanOptions,
) -> Result<Vec<HeadGain>> {
    if !(opts.scale > 0.0) {
        return Err(LccError::InvalidArgument(format!("scale {} must be positive", opts.scale)));
    }
    if prompts.is_empty() {
        return Err(LccError::InvalidArgument("no prompts to scan".into()));
    }
    let cfg = &dense.config;
    let sites: Vec<Site> = cfg.heads().map(Site::from).collect();
    let tokens: Vec<Vec<u32>> = prompts.iter().map(|p| p.tokens.clone()).collect();
    let (td, tp) = capture_pair(dense, pruned, &tokens, &sites, opts.position)?;
    let n = prompts.len() as f64;
    let mut out = Vec::with_capacity(sites.len());
    for head in cfg.heads() {
        let site = Site::from(head);
        let lm = assemble_loss_matrix(&td, &tp, site)?;
        let comps = decompose(&lm)?;
        let pc = match opts.component {
            Some(i) => comps.single(i, opts.scale),
            None => comps.top_k(opts.k, opts.scale),
        };
        let (zd, zp) = (td.get(site)?, tp.get(site)?);
        let (mut ld, mut lp, mut lr) = (0.0, 0.0, 0.0);
        for (i, p) in prompts.iter().enumerate() {
            let lens = |params: &ModelParams<F>, z: &[f64]| -> Result<f64> {
                let z: Vec<F> = z.iter().map(|&x| F::of(x)).collect();
                logit_difference(&logit_lens(&z, head, params)?, p.correct, p.incorrect)
            };
            ld += lens(dense, zd.row(i))?;
            lp += lens(pruned, zp.row(i))?;
            lr += lens(pruned, &compensate_activation(zp.row(i), &pc.c)?)?;
        }
        let (ld, lp, lr) = (ld / n, lp / n, lr / n);
        out.push(HeadGain {
            site: head,
            lambda_dense: ld,
            lambda_pruned: lp,
            lambda_recovered: lr,
            gain: logit_gain(lr, lp),
        });
    }
    Ok(out)
}

/// Comma-separated table with one row per head.
pub fn gains_csv(rows: &[HeadGain]) -> String {
    let mut s = String::from("layer,head,lambda_dense,lambda_pruned,lambda_recovered,gain\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.site.layer, r.site.head, r.lambda_dense, r.lambda_pruned, r.lambda_recovered, r.gain
        );
    }
    s
}

/// Comma-separated component vectors: `layer,head,k,c0,c1,…`.
pub fn components_csv(rows: &[(HeadSite, PrincipalComponent)]) -> String {
    let width = rows.first().map_or(0, |(_, p)| p.c.len());
    let mut s = String::from("layer,head,k");
    for j in 0..width {
        let _ = write!(s, ",c{j}");
    }
    s.push('\n');
    for (site, pc) in rows {
        let _ = write!(s, "{},{},{}", site.layer, site.head, pc.k);
        for v in &pc.c {
            let _ = write!(s, ",{v:.9}");
        }
        s.push('\n');
    }
    s
}
