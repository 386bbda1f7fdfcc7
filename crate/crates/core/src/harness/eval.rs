//! Accuracy and perplexity on task samples.

use serde::{Deserialize, Serialize};

use super::task::Sample;
use crate::error::{LccError, Result};
use crate::model::{cross_entropy_and_grad, forward, LossMask, Logits, ModelParams, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Fraction of samples whose answer logit beats the alternative at the
    /// last question token.
    pub accuracy: f64,
    /// `exp` of the mean next-token cross-entropy over response tokens.
    pub perplexity: f64,
    pub n_samples: usize,
}

/// Evaluates any logits function over `samples`.
pub fn evaluate_with<F: Real>(
    samples: &[&Sample],
    mut logits_of: impl FnMut(&[u32]) -> Result<Logits<F>>,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(LccError::InvalidArgument("cannot evaluate an empty split".into()));
    }
    let (mut correct, mut scored) = (0usize, 0usize);
    let (mut ce, mut count) = (0.0, 0usize);
    for s in samples {
        let tokens = s.sequence();
        let logits = logits_of(&tokens)?;
        if let Some(p) = s.prompt() {
            let row = logits.row(s.question.len() - 1);
            scored += 1;
            if row[p.correct as usize] > row[p.incorrect as usize] {
                correct += 1;
            }
        }
        let (l, n, _) = cross_entropy_and_grad(&logits, &tokens, LossMask::FromIndex(s.question.len()), 1.0);
        ce += l;
        count += n;
    }
    Ok(EvalMetrics {
        accuracy: if scored == 0 { 0.0 } else { correct as f64 / scored as f64 },
        perplexity: if count == 0 { 1.0 } else { (ce / count as f64).exp() },
        n_samples: samples.len(),
    })
}

pub fn evaluate<F: Real>(params: &ModelParams<F>, samples: &[&Sample]) -> Result<EvalMetrics> {
    evaluate_with(samples, |t| forward(params, t, None))
}
