use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{axpy, dot, HeadSite, ModelParams, Real, Site, WeightId, WeightKind, NORM_EPS};
use crate::error::{LccError, Result};
use crate::linalg::Matrix;

/// Which token position an activation is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// The last (non-padding) token of the sequence.
    #[default]
    Last,
    /// An explicit 0-based position.
    At(usize),
}

impl PositionPolicy {
    pub fn resolve(&self, len: usize) -> Result<usize> {
        match *self {
            PositionPolicy::Last if len > 0 => Ok(len - 1),
            PositionPolicy::Last => Err(LccError::InvalidArgument("empty sequence".into())),
            PositionPolicy::At(p) if p < len => Ok(p),
            PositionPolicy::At(p) => Err(LccError::InvalidArgument(format!(
                "position {p} outside a sequence of length {len}"
            ))),
        }
    }
}

/// Observes (and may edit) activations during a forward pass.
///
/// `on_head` sees a head's output after its bias slot was added and before
/// the output projection; `on_ffn` sees the FFN output after its bias slot.
pub trait ActivationHook<F> {
    fn on_head(&mut self, _layer: usize, _head: usize, _pos: usize, _z: &mut [F]) {}
    fn on_ffn(&mut self, _layer: usize, _pos: usize, _out: &mut [F]) {}
}

/// Logits for every position of one sequence, `seq_len × vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub seq_len: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F: Real> Logits<F> {
    pub fn row(&self, t: usize) -> &[F] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn last(&self) -> &[F] {
        self.row(self.seq_len - 1)
    }

    pub fn max_abs_diff(&self, other: &Logits<F>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Activations to record during a batched forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRequest {
    pub sites: Vec<Site>,
    pub position: PositionPolicy,
}

impl CaptureRequest {
    pub fn all_heads(cfg: &super::ModelConfig, position: PositionPolicy) -> Self {
        Self {
            sites: cfg.heads().map(Site::from).collect(),
            position,
        }
    }

    pub fn heads(heads: impl IntoIterator<Item = HeadSite>, position: PositionPolicy) -> Self {
        Self {
            sites: heads.into_iter().map(Site::from).collect(),
            position,
        }
    }
}

/// Captured site activations: one `N × width` matrix per site, row `n`
/// belonging to sample `sample_ids[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub position: PositionPolicy,
    pub sample_ids: Vec<usize>,
    pub sites: BTreeMap<Site, Matrix>,
}

impl ActivationTrace {
    pub fn get(&self, site: Site) -> Result<&Matrix> {
        self.sites
            .get(&site)
            .ok_or_else(|| LccError::SiteOutOfRange(format!("{site} not present in trace")))
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }
}

pub(crate) struct LayerCache<F> {
    pub x_in: Vec<F>,
    pub inv_rms1: Vec<F>,
    pub a: Vec<F>,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// `n_heads × T × T`, row `t` valid for `s <= t`.
    pub probs: Vec<F>,
    pub z: Vec<F>,
    pub x_mid: Vec<F>,
    pub inv_rms2: Vec<F>,
    pub m: Vec<F>,
    pub hpre: Vec<F>,
    pub hact: Vec<F>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub struct ForwardCache<F> {
    pub(crate) tokens: Vec<u32>,
    pub(crate) layers: Vec<LayerCache<F>>,
    pub(crate) x_final: Vec<F>,
    pub(crate) inv_rms_f: Vec<F>,
    pub(crate) hf: Vec<F>,
    pub logits: Logits<F>,
}

impl<F: Real> ForwardCache<F> {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Residual stream entering the final normalization, `T × d_model`.
    pub fn final_residual(&self) -> &[F] {
        &self.x_final
    }

    /// The `T × in` features a weight matrix was applied to.
    pub fn weight_input(&self, id: WeightId) -> &[F] {
        let l = &self.layers[id.layer];
        match id.kind {
            WeightKind::Q | WeightKind::K | WeightKind::V => &l.a,
            WeightKind::O => &l.z,
            WeightKind::Up => &l.m,
            WeightKind::Down => &l.hact,
        }
    }
}

/// `y[t] = W · x[t]` with `W` stored `out × in`.
pub(crate) fn linear<F: Real>(x: &[F], t_len: usize, w: &[F], d_in: usize, d_out: usize) -> Vec<F> {
    let mut y = vec![F::zero(); t_len * d_out];
    for t in 0..t_len {
        let xt = &x[t * d_in..(t + 1) * d_in];
        let yt = &mut y[t * d_out..(t + 1) * d_out];
        for (o, yo) in yt.iter_mut().enumerate() {
            *yo = dot(&w[o * d_in..(o + 1) * d_in], xt);
        }
    }
    y
}

/// RMS normalization of each row; returns `(normalized, inverse rms)`.
pub(crate) fn rms_norm<F: Real>(x: &[F], t_len: usize, d: usize, gain: &[F]) -> (Vec<F>, Vec<F>) {
    let mut y = vec![F::zero(); t_len * d];
    let mut inv = vec![F::zero(); t_len];
    let eps = F::of(NORM_EPS);
    let df = F::of(d as f64);
    for t in 0..t_len {
        let xt = &x[t * d..(t + 1) * d];
        let ms = dot(xt, xt) / df;
        let r = F::one() / (ms + eps).sqrt();
        inv[t] = r;
        for ((yo, &xi), &g) in y[t * d..(t + 1) * d].iter_mut().zip(xt).zip(gain) {
            *yo = g * xi * r;
        }
    }
    (y, inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + th)
        + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0) * a * x * x)
}

fn check_tokens<F: Real>(params: &ModelParams<F>, tokens: &[u32]) -> Result<()> {
    let c = &params.config;
    if tokens.is_empty() {
        return Err(LccError::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > c.max_seq_len {
        return Err(LccError::SequenceTooLong {
            len: tokens.len(),
            max: c.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(LccError::TokenOutOfRange {
            token: bad,
            vocab_size: c.vocab_size,
        });
    }
    Ok(())
}

/// Causal forward pass of one sequence, keeping every intermediate.
pub fn forward_cached<F: Real>(
    params: &ModelParams<F>,
    tokens: &[u32],
    mut hook: Option<&mut dyn ActivationHook<F>>,
) -> Result<ForwardCache<F>> {
    check_tokens(params, tokens)?;
    let c = &params.config;
    let (t_len, d, dh, nh, dff) = (tokens.len(), c.d_model, c.d_head, c.n_heads, c.d_ffn);
    let scale = F::of(1.0 / (dh as f64).sqrt());

    let mut x = vec![F::zero(); t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &params.tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let p = &params.pos_emb[t * d..(t + 1) * d];
        for ((xo, &ei), &pi) in x[t * d..(t + 1) * d].iter_mut().zip(e).zip(p) {
            *xo = ei + pi;
        }
    }

    let mut layers = Vec::with_capacity(c.n_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let (a, inv_rms1) = rms_norm(&x, t_len, d, &lp.attn_norm);
        let q = linear(&a, t_len, &lp.wq, d, d);
        let k = linear(&a, t_len, &lp.wk, d, d);
        let v = linear(&a, t_len, &lp.wv, d, d);

        let mut probs = vec![F::zero(); nh * t_len * t_len];
        let mut z = vec![F::zero(); t_len * d];
        for h in 0..nh {
            let off = h * dh;
            for t in 0..t_len {
                let qt = &q[t * d + off..t * d + off + dh];
                let row = &mut probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let mut maxv = F::neg_infinity();
                for s in 0..=t {
                    let sc = dot(qt, &k[s * d + off..s * d + off + dh]) * scale;
                    row[s] = sc;
                    if sc > maxv {
                        maxv = sc;
                    }
                }
                let mut sum = F::zero();
                for p in row.iter_mut().take(t + 1) {
                    *p = (*p - maxv).exp();
                    sum += *p;
                }
                let zt = &mut z[t * d + off..t * d + off + dh];
                for s in 0..=t {
                    row[s] /= sum;
                    axpy(row[s], &v[s * d + off..s * d + off + dh], zt);
                }
            }
        }
        for t in 0..t_len {
            for h in 0..nh {
                let zt = &mut z[t * d + h * dh..t * d + (h + 1) * dh];
                for (zi, &bi) in zt.iter_mut().zip(&lp.head_bias[h * dh..(h + 1) * dh]) {
                    *zi += bi;
                }
                if let Some(hk) = hook.as_deref_mut() {
                    hk.on_head(li, h, t, zt);
                }
            }
        }

        let attn = linear(&z, t_len, &lp.wo, d, d);
        let x_mid: Vec<F> = x.iter().zip(&attn).map(|(&a, &b)| a + b).collect();
        let (m, inv_rms2) = rms_norm(&x_mid, t_len, d, &lp.ffn_norm);
        let hpre = linear(&m, t_len, &lp.w1, d, dff);
        let hact: Vec<F> = hpre.iter().map(|&u| gelu(u)).collect();
        let mut f = linear(&hact, t_len, &lp.w2, dff, d);
        for t in 0..t_len {
            let ft = &mut f[t * d..(t + 1) * d];
            for (fi, &bi) in ft.iter_mut().zip(&lp.ffn_bias) {
                *fi += bi;
            }
            if let Some(hk) = hook.as_deref_mut() {
                hk.on_ffn(li, t, ft);
            }
        }
        let x_out: Vec<F> = x_mid.iter().zip(&f).map(|(&a, &b)| a + b).collect();

        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            inv_rms1,
            a,
            q,
            k,
            v,
            probs,
            z,
            x_mid,
            inv_rms2,
            m,
            hpre,
            hact,
        });
    }

    let (hf, inv_rms_f) = rms_norm(&x, t_len, d, &params.final_norm);
    let vocab = c.vocab_size;
    let logits = linear(&hf, t_len, &params.tok_emb, d, vocab);
    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        layers,
        x_final: x,
        inv_rms_f,
        hf,
        logits: Logits {
            seq_len: t_len,
            vocab,
            data: logits,
        },
    })
}

/// Logits for every position of one sequence.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    tokens: &[u32],
    hook: Option<&mut dyn ActivationHook<F>>,
) -> Result<Logits<F>> {
    Ok(forward_cached(params, tokens, hook)?.logits)
}

struct Capture<'a> {
    sites: &'a [Site],
    pos: usize,
    out: BTreeMap<Site, Vec<f64>>,
}

impl<F: Real> ActivationHook<F> for Capture<'_> {
    fn on_head(&mut self, layer: usize, head: usize, pos: usize, z: &mut [F]) {
        let site = Site::Head { layer, head };
        if pos == self.pos && self.sites.contains(&site) {
            self.out.insert(site, z.iter().map(|x| x.as_f64()).collect());
        }
    }

    fn on_ffn(&mut self, layer: usize, pos: usize, out: &mut [F]) {
        let site = Site::Ffn { layer };
        if pos == self.pos && self.sites.contains(&site) {
            self.out.insert(site, out.iter().map(|x| x.as_f64()).collect());
        }
    }
}

/// Forward pass over a batch of sequences, optionally recording site
/// activations. Sample ids in the trace are batch indices.
pub fn forward_batch<F: Real>(
    params: &ModelParams<F>,
    batch: &[Vec<u32>],
    capture: Option<&CaptureRequest>,
) -> Result<(Vec<Logits<F>>, Option<ActivationTrace>)> {
    let cfg = &params.config;
    if let Some(req) = capture {
        for s in &req.sites {
            s.check(cfg)?;
        }
    }
    let mut logits = Vec::with_capacity(batch.len());
    let mut rows: BTreeMap<Site, Vec<Vec<f64>>> = BTreeMap::new();
    for tokens in batch {
        match capture {
            None => logits.push(forward(params, tokens, None)?),
            Some(req) => {
                let mut cap = Capture {
                    sites: &req.sites,
                    pos: req.position.resolve(tokens.len())?,
                    out: BTreeMap::new(),
                };
                logits.push(forward(params, tokens, Some(&mut cap))?);
                for (site, v) in cap.out {
                    rows.entry(site).or_default().push(v);
                }
            }
        }
    }
    let trace = match capture {
        None => None,
        Some(req) => {
            let mut sites = BTreeMap::new();
            for &site in &req.sites {
                let r = rows.remove(&site).unwrap_or_default();
                let m = if r.is_empty() {
                    Matrix::zeros(0, site.width(cfg))
                } else {
                    Matrix::from_rows(&r)?
                };
                sites.insert(site, m);
            }
            Some(ActivationTrace {
                position: req.position,
                sample_ids: (0..batch.len()).collect(),
                sites,
            })
        }
    };
    Ok((logits, trace))
}

/// Projects a head activation into vocabulary space:
/// `LM_Head[φ(z · W^{O,h})]` with φ the final normalization.
pub fn logit_lens<F: Real>(z: &[F], site: HeadSite, params: &ModelParams<F>) -> Result<Vec<F>> {
    let c = &params.config;
    Site::from(site).check(c)?;
    if z.len() != c.d_head {
        return Err(LccError::shape(format!("head activation of length {}", c.d_head), z.len()));
    }
    let (d, dh) = (c.d_model, c.d_head);
    let wo = &params.layers[site.layer].wo;
    let y: Vec<F> = (0..d)
        .map(|o| dot(&wo[o * d + site.head * dh..o * d + (site.head + 1) * dh], z))
        .collect();
    let (hf, _) = rms_norm(&y, 1, d, &params.final_norm);
    Ok(linear(&hf, 1, &params.tok_emb, d, c.vocab_size))
}

/// `logits[correct] − logits[incorrect]`.
pub fn logit_difference<F: Real>(logits: &[F], correct: u32, incorrect: u32) -> Result<f64> {
    if correct == incorrect {
        return Err(LccError::InvalidArgument(
            "correct and incorrect tokens must differ".into(),
        ));
    }
    let (ci, ii) = (correct as usize, incorrect as usize);
    if ci >= logits.len() || ii >= logits.len() {
        return Err(LccError::TokenOutOfRange {
            token: correct.max(incorrect),
            vocab_size: logits.len(),
        });
    }
    Ok(logits[ci].as_f64() - logits[ii].as_f64())
}
