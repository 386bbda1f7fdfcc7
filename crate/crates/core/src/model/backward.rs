use super::forward::{gelu_grad, ForwardCache};
use super::{axpy, dot, ModelParams, Real};

/// Gradients share the layout of the parameters they belong to.
pub type Gradients<F> = ModelParams<F>;

/// Where backpropagation starts.
pub enum BackwardSeed<'a, F> {
    /// `∂L/∂logits`, `T × vocab`.
    Logits(&'a [F]),
    /// `∂L/∂x` for the residual stream entering the final norm, `T × d_model`.
    FinalResidual(&'a [F]),
}

fn rms_norm_backward<F: Real>(
    x: &[F],
    inv: &[F],
    gain: &[F],
    dy: &[F],
    d: usize,
    mut dgain: Option<&mut [F]>,
) -> Vec<F> {
    let t_len = inv.len();
    let mut dx = vec![F::zero(); t_len * d];
    let df = F::of(d as f64);
    let mut gdy = vec![F::zero(); d];
    for t in 0..t_len {
        let (xt, dyt) = (&x[t * d..(t + 1) * d], &dy[t * d..(t + 1) * d]);
        let r = inv[t];
        for i in 0..d {
            gdy[i] = gain[i] * dyt[i];
        }
        let s = dot(&gdy, xt);
        let coef = r * r * r * s / df;
        for (i, dxi) in dx[t * d..(t + 1) * d].iter_mut().enumerate() {
            *dxi = r * gdy[i] - coef * xt[i];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for i in 0..d {
                dg[i] += dyt[i] * xt[i] * r;
            }
        }
    }
    dx
}

/// `dW += Σ_t dy[t] ⊗ x[t]` for `W` stored `out × in`.
fn accumulate_outer<F: Real>(dw: &mut [F], dy: &[F], x: &[F], t_len: usize, d_out: usize, d_in: usize) {
    for t in 0..t_len {
        let xt = &x[t * d_in..(t + 1) * d_in];
        for o in 0..d_out {
            let g = dy[t * d_out + o];
            if g != F::zero() {
                axpy(g, xt, &mut dw[o * d_in..(o + 1) * d_in]);
            }
        }
    }
}

/// `dx[t] = Wᵀ dy[t]`, added into `dx`.
fn linear_backward_input<F: Real>(
    dx: &mut [F],
    dy: &[F],
    w: &[F],
    t_len: usize,
    d_out: usize,
    d_in: usize,
) {
    for t in 0..t_len {
        let dxt = &mut dx[t * d_in..(t + 1) * d_in];
        for o in 0..d_out {
            let g = dy[t * d_out + o];
            if g != F::zero() {
                axpy(g, &w[o * d_in..(o + 1) * d_in], dxt);
            }
        }
    }
}

/// Backpropagates through one cached forward pass, accumulating into
/// `grads`.
///
/// Bias-slot gradients (`head_bias`, `ffn_bias`) are always accumulated.
/// When `weights` is false every other gradient is skipped, which is all
/// that component training needs.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    cache: &ForwardCache<F>,
    seed: BackwardSeed<'_, F>,
    grads: &mut Gradients<F>,
    weights: bool,
) {
    let c = &params.config;
    let (t_len, d, dh, nh, dff, vocab) = (
        cache.seq_len(),
        c.d_model,
        c.d_head,
        c.n_heads,
        c.d_ffn,
        c.vocab_size,
    );
    let scale = F::of(1.0 / (dh as f64).sqrt());

    let mut dx = match seed {
        BackwardSeed::FinalResidual(g) => g.to_vec(),
        BackwardSeed::Logits(dlogits) => {
            let mut dhf = vec![F::zero(); t_len * d];
            linear_backward_input(&mut dhf, dlogits, &params.tok_emb, t_len, vocab, d);
            if weights {
                accumulate_outer(&mut grads.tok_emb, dlogits, &cache.hf, t_len, vocab, d);
            }
            rms_norm_backward(
                &cache.x_final,
                &cache.inv_rms_f,
                &params.final_norm,
                &dhf,
                d,
                weights.then_some(grads.final_norm.as_mut_slice()),
            )
        }
    };

    for li in (0..c.n_layers).rev() {
        let lp = &params.layers[li];
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // FFN block: x_out = x_mid + W2·gelu(W1·norm(x_mid)) + ffn_bias
        for t in 0..t_len {
            for (g, &v) in lg.ffn_bias.iter_mut().zip(&dx[t * d..(t + 1) * d]) {
                *g += v;
            }
        }
        if weights {
            accumulate_outer(&mut lg.w2, &dx, &lc.hact, t_len, d, dff);
        }
        let mut dh_act = vec![F::zero(); t_len * dff];
        linear_backward_input(&mut dh_act, &dx, &lp.w2, t_len, d, dff);
        for (g, &u) in dh_act.iter_mut().zip(&lc.hpre) {
            *g *= gelu_grad(u);
        }
        if weights {
            accumulate_outer(&mut lg.w1, &dh_act, &lc.m, t_len, dff, d);
        }
        let mut dm = vec![F::zero(); t_len * d];
        linear_backward_input(&mut dm, &dh_act, &lp.w1, t_len, dff, d);
        let dnorm2 = rms_norm_backward(
            &lc.x_mid,
            &lc.inv_rms2,
            &lp.ffn_norm,
            &dm,
            d,
            weights.then_some(lg.ffn_norm.as_mut_slice()),
        );
        let dx_mid: Vec<F> = dx.iter().zip(&dnorm2).map(|(&a, &b)| a + b).collect();

        // Attention block: x_mid = x_in + Wo·(heads + head_bias)
        if weights {
            accumulate_outer(&mut lg.wo, &dx_mid, &lc.z, t_len, d, d);
        }
        let mut dz = vec![F::zero(); t_len * d];
        linear_backward_input(&mut dz, &dx_mid, &lp.wo, t_len, d, d);
        for t in 0..t_len {
            for (g, &v) in lg.head_bias.iter_mut().zip(&dz[t * d..(t + 1) * d]) {
                *g += v;
            }
        }

        let mut dq = vec![F::zero(); t_len * d];
        let mut dk = vec![F::zero(); t_len * d];
        let mut dv = vec![F::zero(); t_len * d];
        let mut dp = vec![F::zero(); t_len];
        for h in 0..nh {
            let off = h * dh;
            for t in 0..t_len {
                let dzt = &dz[t * d + off..t * d + off + dh];
                let row = &lc.probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                let mut weighted = F::zero();
                for s in 0..=t {
                    dp[s] = dot(dzt, &lc.v[s * d + off..s * d + off + dh]);
                    weighted += row[s] * dp[s];
                    axpy(row[s], dzt, &mut dv[s * d + off..s * d + off + dh]);
                }
                for s in 0..=t {
                    let ds = row[s] * (dp[s] - weighted) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    axpy(
                        ds,
                        &lc.k[s * d + off..s * d + off + dh],
                        &mut dq[t * d + off..t * d + off + dh],
                    );
                    axpy(
                        ds,
                        &lc.q[t * d + off..t * d + off + dh],
                        &mut dk[s * d + off..s * d + off + dh],
                    );
                }
            }
        }
        if weights {
            accumulate_outer(&mut lg.wq, &dq, &lc.a, t_len, d, d);
            accumulate_outer(&mut lg.wk, &dk, &lc.a, t_len, d, d);
            accumulate_outer(&mut lg.wv, &dv, &lc.a, t_len, d, d);
        }
        let mut da = vec![F::zero(); t_len * d];
        linear_backward_input(&mut da, &dq, &lp.wq, t_len, d, d);
        linear_backward_input(&mut da, &dk, &lp.wk, t_len, d, d);
        linear_backward_input(&mut da, &dv, &lp.wv, t_len, d, d);
        let dnorm1 = rms_norm_backward(
            &lc.x_in,
            &lc.inv_rms1,
            &lp.attn_norm,
            &da,
            d,
            weights.then_some(lg.attn_norm.as_mut_slice()),
        );
        dx = dx_mid.iter().zip(&dnorm1).map(|(&a, &b)| a + b).collect();
    }

    if weights {
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let g = &dx[t * d..(t + 1) * d];
            let tok = tok as usize;
            for (e, &v) in grads.tok_emb[tok * d..(tok + 1) * d].iter_mut().zip(g) {
                *e += v;
            }
            for (e, &v) in grads.pos_emb[t * d..(t + 1) * d].iter_mut().zip(g) {
                *e += v;
            }
        }
    }
}
