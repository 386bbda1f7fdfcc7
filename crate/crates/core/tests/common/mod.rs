#![allow(dead_code)]

use lcc_core::linalg::Matrix;
use lcc_core::model::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations,
/// sorted descending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Singular values via the eigenvalues of the smaller Gram matrix.
pub fn singular_values_oracle(a: &Matrix) -> Vec<f64> {
    let g = if a.rows() >= a.cols() {
        a.transpose().matmul(a).unwrap()
    } else {
        a.matmul(&a.transpose()).unwrap()
    };
    symmetric_eigenvalues(&g).into_iter().map(|e| e.max(0.0).sqrt()).collect()
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_ffn: 16,
        max_seq_len: 10,
        seed: 5,
    }
}

/// Freshly initialized params with perturbed norm gains so every path
/// carries signal.
pub fn micro_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::<f32>::init(&ModelConfig { seed, ..cfg.clone() })
        .unwrap()
        .cast::<f64>();
    let mut r = rng(seed + 1000);
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x += r.random_range(-0.2..0.2);
        }
    }
    for s in p.config.heads().collect::<Vec<_>>() {
        p.inject_head_bias(s, &vec![0.0; p.config.d_head]).unwrap();
    }
    for l in 0..p.config.n_layers {
        p.inject_ffn_bias(l, &vec![0.0; p.config.d_model]).unwrap();
    }
    p
}

pub fn random_tokens(r: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| r.random_range(0..vocab as u32)).collect()
}
