//! Toy decoder-only transformer.
//!
//! Pre-norm blocks with RMS normalization, learned position embeddings and a
//! language-model head tied to the token embedding table. Every attention
//! head owns an additive output bias (its "c-slot") that is added to the
//! head's output before the shared output projection, and every FFN owns an
//! additive output bias slot. Both are zero unless compensation has been
//! folded in.
//!
//! The forward and backward passes are generic over [`Real`] so the same
//! code serves the `f32` training path and the `f64` gradient-check path.

mod backward;
mod checkpoint;
mod forward;
mod train;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LccError, Result};

pub use backward::{backward, BackwardSeed, Gradients};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{
    forward, forward_batch, forward_cached, logit_difference, logit_lens, ActivationHook,
    ActivationTrace, CaptureRequest, ForwardCache, Logits, PositionPolicy,
};
pub use train::{
    cross_entropy_and_grad, sequence_loss, train_dense, Adam, LossMask, TrainHyper, TrainReport,
};

/// Floating-point element type of the model.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite conversion")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Sum
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + fmt::Debug
        + Default
        + Send
        + Sync
        + 'static
{
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_ffn: 256,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(LccError::Config(format!("{name} must be at least 1")));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(LccError::Config(format!(
                "d_model ({}) must equal n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadSite> + '_ {
        (0..self.n_layers)
            .flat_map(move |layer| (0..self.n_heads).map(move |head| HeadSite { layer, head }))
    }

    pub fn head_count(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

/// An attention head `(layer, head)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadSite {
    pub layer: usize,
    pub head: usize,
}

impl HeadSite {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// A compensation site: one attention head, or the FFN output of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Site {
    Head { layer: usize, head: usize },
    Ffn { layer: usize },
}

impl Site {
    pub fn layer(&self) -> usize {
        match *self {
            Site::Head { layer, .. } | Site::Ffn { layer } => layer,
        }
    }

    /// Width of the activation at this site.
    pub fn width(&self, cfg: &ModelConfig) -> usize {
        match self {
            Site::Head { .. } => cfg.d_head,
            Site::Ffn { .. } => cfg.d_model,
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let ok = match *self {
            Site::Head { layer, head } => layer < cfg.n_layers && head < cfg.n_heads,
            Site::Ffn { layer } => layer < cfg.n_layers,
        };
        if ok {
            Ok(())
        } else {
            Err(LccError::SiteOutOfRange(format!(
                "{self} in a {}-layer, {}-head model",
                cfg.n_layers, cfg.n_heads
            )))
        }
    }
}

impl From<HeadSite> for Site {
    fn from(h: HeadSite) -> Self {
        Site::Head {
            layer: h.layer,
            head: h.head,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Site::Head { layer, head } => write!(f, "L{layer}H{head}"),
            Site::Ffn { layer } => write!(f, "L{layer}FFN"),
        }
    }
}

/// The six prunable weight matrices of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl WeightKind {
    pub const ALL: [WeightKind; 6] = [
        WeightKind::Q,
        WeightKind::K,
        WeightKind::V,
        WeightKind::O,
        WeightKind::Up,
        WeightKind::Down,
    ];

    pub fn is_attention(self) -> bool {
        matches!(self, WeightKind::Q | WeightKind::K | WeightKind::V | WeightKind::O)
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Q => "wq",
            WeightKind::K => "wk",
            WeightKind::V => "wv",
            WeightKind::O => "wo",
            WeightKind::Up => "w1",
            WeightKind::Down => "w2",
        }
    }
}

/// Identifies one prunable weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightId {
    pub layer: usize,
    pub kind: WeightKind,
}

impl WeightId {
    pub fn name(&self) -> String {
        format!("layers.{}.{}", self.layer, self.kind.name())
    }
}

/// Per-layer parameters. Weight matrices are stored `out × in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Vec<F>,
    pub wq: Vec<F>,
    pub wk: Vec<F>,
    pub wv: Vec<F>,
    pub wo: Vec<F>,
    /// `n_heads × d_head` additive head-output biases.
    pub head_bias: Vec<F>,
    pub ffn_norm: Vec<F>,
    pub w1: Vec<F>,
    pub w2: Vec<F>,
    /// `d_model` additive FFN-output bias.
    pub ffn_bias: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    /// `vocab × d_model`; also the LM head.
    pub tok_emb: Vec<F>,
    /// `max_seq_len × d_model`
    pub pos_emb: Vec<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Vec<F>,
}

impl<F: Real> LayerParams<F> {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.d_model;
        Self {
            attn_norm: vec![F::zero(); d],
            wq: vec![F::zero(); d * d],
            wk: vec![F::zero(); d * d],
            wv: vec![F::zero(); d * d],
            wo: vec![F::zero(); d * d],
            head_bias: vec![F::zero(); c.n_heads * c.d_head],
            ffn_norm: vec![F::zero(); d],
            w1: vec![F::zero(); c.d_ffn * d],
            w2: vec![F::zero(); d * c.d_ffn],
            ffn_bias: vec![F::zero(); d],
        }
    }

    pub fn weight(&self, kind: WeightKind) -> &[F] {
        match kind {
            WeightKind::Q => &self.wq,
            WeightKind::K => &self.wk,
            WeightKind::V => &self.wv,
            WeightKind::O => &self.wo,
            WeightKind::Up => &self.w1,
            WeightKind::Down => &self.w2,
        }
    }

    pub fn weight_mut(&mut self, kind: WeightKind) -> &mut Vec<F> {
        match kind {
            WeightKind::Q => &mut self.wq,
            WeightKind::K => &mut self.wk,
            WeightKind::V => &mut self.wv,
            WeightKind::O => &mut self.wo,
            WeightKind::Up => &mut self.w1,
            WeightKind::Down => &mut self.w2,
        }
    }
}

impl<F: Real> ModelParams<F> {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Self {
            config: config.clone(),
            tok_emb: vec![F::zero(); config.vocab_size * d],
            pos_emb: vec![F::zero(); config.max_seq_len * d],
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(config)).collect(),
            final_norm: vec![F::zero(); d],
        }
    }

    /// Seeded random initialization.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = Self::zeros(config);
        let d = config.d_model as f64;
        let normal = |std: f64| Normal::new(0.0, std).expect("valid std");
        let fill = |v: &mut [F], std: f64, rng: &mut ChaCha8Rng| {
            let n = normal(std);
            v.iter_mut().for_each(|x| *x = F::of(n.sample(rng)));
        };
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        fill(&mut p.tok_emb, 0.5, &mut rng);
        fill(&mut p.pos_emb, 0.1, &mut rng);
        for layer in &mut p.layers {
            layer.attn_norm.iter_mut().for_each(|x| *x = F::one());
            layer.ffn_norm.iter_mut().for_each(|x| *x = F::one());
            fill(&mut layer.wq, 1.0 / d.sqrt(), &mut rng);
            fill(&mut layer.wk, 1.0 / d.sqrt(), &mut rng);
            fill(&mut layer.wv, 1.0 / d.sqrt(), &mut rng);
            fill(&mut layer.wo, residual_scale / d.sqrt(), &mut rng);
            fill(&mut layer.w1, 1.0 / d.sqrt(), &mut rng);
            fill(
                &mut layer.w2,
                residual_scale / (config.d_ffn as f64).sqrt(),
                &mut rng,
            );
        }
        p.final_norm.iter_mut().for_each(|x| *x = F::one());
        Ok(p)
    }

    /// Converts every tensor to another element type.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let cv = |v: &[F]| v.iter().map(|x| G::of(x.as_f64())).collect::<Vec<G>>();
        ModelParams {
            config: self.config.clone(),
            tok_emb: cv(&self.tok_emb),
            pos_emb: cv(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: cv(&l.attn_norm),
                    wq: cv(&l.wq),
                    wk: cv(&l.wk),
                    wv: cv(&l.wv),
                    wo: cv(&l.wo),
                    head_bias: cv(&l.head_bias),
                    ffn_norm: cv(&l.ffn_norm),
                    w1: cv(&l.w1),
                    w2: cv(&l.w2),
                    ffn_bias: cv(&l.ffn_bias),
                })
                .collect(),
            final_norm: cv(&self.final_norm),
        }
    }

    /// Every tensor with its canonical name and shape, in manifest order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let c = &self.config;
        let (d, f) = (c.d_model, c.d_ffn);
        let mut out: Vec<(String, Vec<usize>, &[F])> = vec![
            ("tok_emb".into(), vec![c.vocab_size, d], &self.tok_emb),
            ("pos_emb".into(), vec![c.max_seq_len, d], &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{i}.{s}");
            out.push((p("attn_norm"), vec![d], &l.attn_norm));
            out.push((p("wq"), vec![d, d], &l.wq));
            out.push((p("wk"), vec![d, d], &l.wk));
            out.push((p("wv"), vec![d, d], &l.wv));
            out.push((p("wo"), vec![d, d], &l.wo));
            out.push((p("head_bias"), vec![c.n_heads, c.d_head], &l.head_bias));
            out.push((p("ffn_norm"), vec![d], &l.ffn_norm));
            out.push((p("w1"), vec![f, d], &l.w1));
            out.push((p("w2"), vec![d, f], &l.w2));
            out.push((p("ffn_bias"), vec![d], &l.ffn_bias));
        }
        out.push(("final_norm".into(), vec![d], &self.final_norm));
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<F>> {
        let mut out: Vec<&mut Vec<F>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.head_bias);
            out.push(&mut l.ffn_norm);
            out.push(&mut l.w1);
            out.push(&mut l.w2);
            out.push(&mut l.ffn_bias);
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn weight(&self, id: WeightId) -> &[F] {
        self.layers[id.layer].weight(id.kind)
    }

    pub fn weight_mut(&mut self, id: WeightId) -> &mut Vec<F> {
        self.layers[id.layer].weight_mut(id.kind)
    }

    /// `(rows, cols)` of a prunable matrix (`out × in`).
    pub fn weight_shape(&self, kind: WeightKind) -> (usize, usize) {
        let c = &self.config;
        match kind {
            WeightKind::Up => (c.d_ffn, c.d_model),
            WeightKind::Down => (c.d_model, c.d_ffn),
            _ => (c.d_model, c.d_model),
        }
    }

    pub fn weight_ids(&self) -> Vec<WeightId> {
        (0..self.config.n_layers)
            .flat_map(|layer| WeightKind::ALL.into_iter().map(move |kind| WeightId { layer, kind }))
            .collect()
    }

    pub fn head_bias(&self, site: HeadSite) -> &[F] {
        let dh = self.config.d_head;
        &self.layers[site.layer].head_bias[site.head * dh..(site.head + 1) * dh]
    }

    /// Sets the `(layer, head)` c-slot to `c`. No weight matrix is touched.
    pub fn inject_head_bias(&mut self, site: HeadSite, c: &[F]) -> Result<()> {
        Site::from(site).check(&self.config)?;
        let dh = self.config.d_head;
        if c.len() != dh {
            return Err(LccError::shape(format!("bias of length {dh}"), c.len()));
        }
        if let Some(i) = c.iter().position(|x| !x.is_finite()) {
            return Err(LccError::NonFinite {
                row: 0,
                col: i,
                value: c[i].as_f64(),
            });
        }
        self.layers[site.layer].head_bias[site.head * dh..(site.head + 1) * dh].copy_from_slice(c);
        Ok(())
    }

    /// Sets the FFN output bias slot of `layer`.
    pub fn inject_ffn_bias(&mut self, layer: usize, c: &[F]) -> Result<()> {
        Site::Ffn { layer }.check(&self.config)?;
        let d = self.config.d_model;
        if c.len() != d {
            return Err(LccError::shape(format!("bias of length {d}"), c.len()));
        }
        if let Some(i) = c.iter().position(|x| !x.is_finite()) {
            return Err(LccError::NonFinite {
                row: 0,
                col: i,
                value: c[i].as_f64(),
            });
        }
        self.layers[layer].ffn_bias.copy_from_slice(c);
        Ok(())
    }

    /// Writes `c` into the bias slot of any site.
    pub fn inject_site_bias(&mut self, site: Site, c: &[F]) -> Result<()> {
        match site {
            Site::Head { layer, head } => self.inject_head_bias(HeadSite { layer, head }, c),
            Site::Ffn { layer } => self.inject_ffn_bias(layer, c),
        }
    }

    pub fn site_bias(&self, site: Site) -> &[F] {
        match site {
            Site::Head { layer, head } => self.head_bias(HeadSite { layer, head }),
            Site::Ffn { layer } => &self.layers[layer].ffn_bias,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Number of entries across the prunable weight matrices.
    pub fn prunable_count(&self) -> usize {
        self.weight_ids().iter().map(|&id| self.weight(id).len()).sum()
    }

    /// Bitwise equality of every tensor (NaN-safe, sign-of-zero aware).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self
                .tensors()
                .iter()
                .zip(other.tensors().iter())
                .all(|((_, _, a), (_, _, b))| {
                    a.len() == b.len()
                        && a.iter().zip(b.iter()).all(|(x, y)| {
                            x.as_f64().to_bits() == y.as_f64().to_bits()
                        })
                })
    }
}

// Small kernels shared by forward and backward.

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
pub(crate) fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            d_head: 15,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::default();
        let a = ModelParams::<f32>::init(&c).unwrap();
        let b = ModelParams::<f32>::init(&c).unwrap();
        assert!(a.bitwise_eq(&b));
        let other = ModelParams::<f32>::init(&ModelConfig { seed: 1, ..c }).unwrap();
        assert!(!a.bitwise_eq(&other));
        assert!(a.layers.iter().all(|l| l.head_bias.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn inject_validates() {
        let c = ModelConfig::default();
        let mut p = ModelParams::<f32>::init(&c).unwrap();
        assert!(p.inject_head_bias(HeadSite::new(0, 0), &[0.0; 3]).is_err());
        assert!(p.inject_head_bias(HeadSite::new(9, 0), &[0.0; 16]).is_err());
        assert!(p
            .inject_head_bias(HeadSite::new(0, 0), &[f32::NAN; 16])
            .is_err());
        let before = p.clone();
        p.inject_head_bias(HeadSite::new(1, 2), &[0.5; 16]).unwrap();
        assert_eq!(p.head_bias(HeadSite::new(1, 2)), &[0.5; 16]);
        for id in p.weight_ids() {
            assert_eq!(p.weight(id), before.weight(id));
        }
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.25 - 2.0).collect();
        let b: Vec<f64> = (0..19).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
