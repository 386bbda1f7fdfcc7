use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backward::{backward, BackwardSeed};
use super::forward::{forward_cached, Logits};
use super::{ModelConfig, ModelParams, Real};
use crate::error::{LccError, Result};

/// Which next-token predictions contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Every position predicts its successor.
    #[default]
    AllTokens,
    /// Only tokens at index `>= start` are predicted (e.g. response tokens).
    FromIndex(usize),
}

impl LossMask {
    /// Positions `t` whose logits are scored against `tokens[t + 1]`.
    pub fn positions(&self, len: usize) -> std::ops::Range<usize> {
        let last = len.saturating_sub(1);
        match *self {
            LossMask::AllTokens => 0..last,
            LossMask::FromIndex(start) => start.saturating_sub(1).min(last)..last,
        }
    }
}

/// Summed cross-entropy of the masked positions and `scale · ∂/∂logits`.
pub fn cross_entropy_and_grad<F: Real>(
    logits: &Logits<F>,
    tokens: &[u32],
    mask: LossMask,
    scale: f64,
) -> (f64, usize, Vec<F>) {
    let v = logits.vocab;
    let mut grad = vec![F::zero(); logits.data.len()];
    let mut total = 0.0;
    let mut count = 0;
    for t in mask.positions(tokens.len()) {
        let row = logits.row(t);
        let target = tokens[t + 1] as usize;
        let maxv = row.iter().fold(F::neg_infinity(), |m, &x| if x > m { x } else { m });
        let mut sum = F::zero();
        let g = &mut grad[t * v..(t + 1) * v];
        for (gi, &x) in g.iter_mut().zip(row) {
            *gi = (x - maxv).exp();
            sum += *gi;
        }
        total += (sum.ln() + maxv - row[target]).as_f64();
        count += 1;
        let s = F::of(scale);
        for gi in g.iter_mut() {
            *gi = *gi / sum * s;
        }
        g[target] -= s;
    }
    (total, count, grad)
}

/// Mean next-token cross-entropy of one sequence.
pub fn sequence_loss<F: Real>(params: &ModelParams<F>, tokens: &[u32], mask: LossMask) -> Result<f64> {
    let cache = forward_cached(params, tokens, None)?;
    let (loss, count, _) = cross_entropy_and_grad(&cache.logits, tokens, mask, 1.0);
    Ok(if count == 0 { 0.0 } else { loss / count as f64 })
}

/// Adam over a list of flat parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update with learning rate `lr`; `params[i]` pairs with `grads[i]`.
    pub fn step_with_lr(&mut self, lr: f64, params: &mut [&mut [F]], grads: &[&[F]]) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let (o1, o2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let step_size = F::of(lr / c1);
        let c2s = F::of(c2.sqrt());
        let eps = F::of(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1f * m[j] + o1 * gj;
                v[j] = b2f * v[j] + o2 * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() / c2s + eps);
            }
        }
    }

    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]]) {
        let lr = self.lr;
        self.step_with_lr(lr, params, grads);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 12,
            batch_size: 16,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Linear warmup then cosine decay to a tenth of the peak rate.
pub(crate) fn scheduled_lr(peak: f64, step: usize, total: usize) -> f64 {
    let warmup = (total / 20).max(1);
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
    peak * (0.1 + 0.9 * cosine)
}

fn is_bias_slot(name: &str) -> bool {
    name.ends_with("head_bias") || name.ends_with("ffn_bias")
}

/// Trains a dense model from scratch with next-token cross-entropy over
/// every position of every sequence. Bias slots stay zero.
pub fn train_dense(
    config: &ModelConfig,
    sequences: &[Vec<u32>],
    hyper: &TrainHyper,
) -> Result<(ModelParams<f32>, TrainReport)> {
    if sequences.is_empty() {
        return Err(LccError::InvalidArgument("training set is empty".into()));
    }
    if hyper.batch_size == 0 {
        return Err(LccError::InvalidArgument("batch_size must be positive".into()));
    }
    let mut params = ModelParams::<f32>::init(config)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
    let trainable: Vec<bool> = names.iter().map(|n| !is_bias_slot(n)).collect();
    let sizes: Vec<usize> = params.tensors().iter().map(|(_, _, t)| t.len()).collect();
    let mut adam = Adam::<f32>::new(hyper.lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let steps_per_epoch = sequences.len().div_ceil(hyper.batch_size);
    let total_steps = steps_per_epoch * hyper.epochs;
    let mut step = 0usize;
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(hyper.epochs),
    };

    for _epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(hyper.batch_size) {
            let n_targets: usize = batch
                .iter()
                .map(|&i| LossMask::AllTokens.positions(sequences[i].len()).len())
                .sum();
            let scale = 1.0 / n_targets.max(1) as f64;
            let mut grads = ModelParams::<f32>::zeros(config);
            let mut batch_loss = 0.0;
            for &i in batch {
                let tokens = &sequences[i];
                let cache = forward_cached(&params, tokens, None)?;
                let (loss, count, dlogits) =
                    cross_entropy_and_grad(&cache.logits, tokens, LossMask::AllTokens, scale);
                batch_loss += loss;
                epoch_count += count;
                backward(&params, &cache, BackwardSeed::Logits(&dlogits), &mut grads, true);
            }
            if !batch_loss.is_finite() {
                return Err(LccError::Diverged {
                    step,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;

            let mut gviews: Vec<&mut Vec<f32>> = grads.tensors_mut();
            for (g, &train) in gviews.iter_mut().zip(&trainable) {
                if !train {
                    g.iter_mut().for_each(|x| *x = 0.0);
                }
            }
            if hyper.grad_clip > 0.0 {
                let norm: f64 = gviews
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > hyper.grad_clip {
                    let s = (hyper.grad_clip / norm) as f32;
                    gviews.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
                }
            }
            let gslices: Vec<&[f32]> = gviews.iter().map(|g| g.as_slice()).collect();
            let mut pviews: Vec<&mut [f32]> =
                params.tensors_mut().into_iter().map(|p| p.as_mut_slice()).collect();
            let lr = scheduled_lr(hyper.lr, step, total_steps);
            adam.step_with_lr(lr, &mut pviews, &gslices);
            step += 1;
        }
        let mean = epoch_loss / epoch_count.max(1) as f64;
        log::debug!("dense epoch loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    if !params.all_finite() {
        return Err(LccError::Diverged {
            step,
            loss: f64::NAN,
        });
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_mask_positions() {
        assert_eq!(LossMask::AllTokens.positions(5), 0..4);
        assert_eq!(LossMask::FromIndex(3).positions(5), 2..4);
        assert_eq!(LossMask::AllTokens.positions(1), 0..0);
    }

    #[test]
    fn uniform_logits_cost_log_vocab() {
        let logits = Logits {
            seq_len: 3,
            vocab: 8,
            data: vec![0.25f64; 24],
        };
        let (loss, count, grad) = cross_entropy_and_grad(&logits, &[1, 2, 3], LossMask::AllTokens, 1.0);
        assert_eq!(count, 2);
        assert!((loss / 2.0 - (8f64).ln()).abs() < 1e-12);
        let row_sum: f64 = grad[..8].iter().sum();
        assert!(row_sum.abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        assert!(scheduled_lr(1.0, 0, 100) < 1.0);
        assert!((scheduled_lr(1.0, 4, 100) - 1.0).abs() < 1e-12);
        assert!((scheduled_lr(1.0, 99, 100) - 0.1).abs() < 1e-3);
    }

    #[test]
    fn single_sample_memorization_and_determinism() {
        let cfg = ModelConfig {
            vocab_size: 12,
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_ffn: 32,
            max_seq_len: 8,
            seed: 3,
        };
        let data = vec![vec![0u32, 5, 7, 1, 9, 2]];
        let hyper = TrainHyper {
            lr: 1e-2,
            epochs: 300,
            batch_size: 1,
            grad_clip: 0.0,
            seed: 1,
        };
        let (a, report) = train_dense(&cfg, &data, &hyper).unwrap();
        assert!(report.final_loss() < 0.01, "loss {}", report.final_loss());
        let (b, _) = train_dense(&cfg, &data, &hyper).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(train_dense(&cfg, &[], &hyper).is_err());
    }
}
