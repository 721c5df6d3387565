//! Independent oracles and random builders shared by the integration tests.
#![allow(dead_code)]

use grail_core::model::{Activation, AttentionBlock, ConvBlock, ConvGeometry, DenseBlock, FfnBlock};
use grail_core::rng::{gaussian_matrix, seeded};
use grail_core::selectors::{SelectionDecision, Unit};
use grail_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn rand_mat(rows: usize, cols: usize, seed: u64) -> Tensor {
    gaussian_matrix(rows, cols, seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    gaussian_matrix(1, n, seed).reshape(shape.to_vec()).unwrap()
}

/// Textbook triple loop.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows());
    Tensor::from_fn2(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.at(i, k) * b.at(k, j)).sum())
}

pub fn naive_transpose(a: &Tensor) -> Tensor {
    Tensor::from_fn2(a.cols(), a.rows(), |i, j| a.at(j, i))
}

/// Gauss–Jordan inverse with partial pivoting.
pub fn inverse(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular matrix in oracle");
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    Tensor::from_fn2(n, n, |i, j| m[i][n + j])
}

/// `argmin_B ‖X − X·M·Bᵀ‖² + λ‖B‖²` from the explicit normal equations.
pub fn ridge_oracle(x: &Tensor, m: &Tensor, lambda: f64) -> Tensor {
    let z = naive_matmul(x, m);
    let zt = naive_transpose(&z);
    let mut a = naive_matmul(&zt, &z);
    for i in 0..a.rows() {
        let v = a.at(i, i) + lambda;
        a.set(i, i, v);
    }
    let bt = naive_matmul(&inverse(&a), &naive_matmul(&zt, x));
    naive_transpose(&bt)
}

/// `N × H` with orthonormal columns (modified Gram–Schmidt, two passes).
pub fn orthonormal_columns(n: usize, h: usize, seed: u64) -> Tensor {
    let mut q = rand_mat(n, h, seed);
    for _ in 0..2 {
        for j in 0..h {
            for p in 0..j {
                let dot: f64 = (0..n).map(|i| q.at(i, j) * q.at(i, p)).sum();
                for i in 0..n {
                    let v = q.at(i, j) - dot * q.at(i, p);
                    q.set(i, j, v);
                }
            }
            let norm = (0..n).map(|i| q.at(i, j).powi(2)).sum::<f64>().sqrt();
            for i in 0..n {
                let v = q.at(i, j) / norm;
                q.set(i, j, v);
            }
        }
    }
    q
}

pub fn rel(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).unwrap().frobenius() / b.frobenius()
}

pub fn random_prune(h: usize, k: usize, seed: u64) -> SelectionDecision {
    let mut rng = seeded(seed);
    let mut idx: Vec<usize> = (0..h).collect();
    idx.shuffle(&mut rng);
    let mut kept = idx[..k].to_vec();
    kept.sort_unstable();
    SelectionDecision::prune(h, kept, Unit::Channel, vec![]).unwrap()
}

/// A random partition of `0..h` into `k` non-empty clusters ordered by
/// their smallest member.
pub fn random_fold(h: usize, k: usize, seed: u64) -> SelectionDecision {
    let mut rng = seeded(seed);
    let mut idx: Vec<usize> = (0..h).collect();
    idx.shuffle(&mut rng);
    let mut clusters: Vec<Vec<usize>> = idx[..k].iter().map(|&i| vec![i]).collect();
    for &i in &idx[k..] {
        let c = rng.random_range(0..k);
        clusters[c].push(i);
    }
    for c in clusters.iter_mut() {
        c.sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    SelectionDecision::fold(h, clusters, Unit::Channel, vec![]).unwrap()
}

pub fn dense_block(c: usize, h: usize, o: usize, activation: Activation, seed: u64) -> DenseBlock {
    DenseBlock {
        w_producer: rand_mat(h, c, seed).scale(1.0 / (c as f64).sqrt()),
        b_producer: rand_tensor(&[h], seed + 1).scale(0.1),
        activation,
        w_consumer: rand_mat(o, h, seed + 2).scale(1.0 / (h as f64).sqrt()),
        b_consumer: rand_tensor(&[o], seed + 3).scale(0.1),
    }
}

pub fn ffn_block(d: usize, h: usize, seed: u64) -> FfnBlock {
    FfnBlock {
        w_fc: rand_mat(h, d, seed).scale(1.0 / (d as f64).sqrt()),
        b_fc: rand_tensor(&[h], seed + 1).scale(0.1),
        activation: Activation::Gelu,
        w_proj: rand_mat(d, h, seed + 2).scale(1.0 / (h as f64).sqrt()),
        b_proj: rand_tensor(&[d], seed + 3).scale(0.1),
    }
}

pub fn conv_block(c: usize, h: usize, o: usize, k: usize, seed: u64) -> ConvBlock {
    let g = ConvGeometry {
        stride: 1,
        padding: k / 2,
    };
    ConvBlock {
        w_producer: rand_tensor(&[h, c, k, k], seed).scale(1.0 / ((c * k * k) as f64).sqrt()),
        b_producer: rand_tensor(&[h], seed + 1).scale(0.1),
        activation: Activation::Relu,
        w_consumer: rand_tensor(&[o, h, k, k], seed + 2).scale(1.0 / ((h * k * k) as f64).sqrt()),
        b_consumer: rand_tensor(&[o], seed + 3).scale(0.1),
        producer_geometry: g,
        consumer_geometry: g,
    }
}

pub fn attention_block(d: usize, n_heads: usize, head_dim: usize, groups: usize, causal: bool, seed: u64) -> AttentionBlock {
    let kv = n_heads / groups;
    let s = 1.0 / (d as f64).sqrt();
    AttentionBlock {
        w_q: rand_mat(n_heads * head_dim, d, seed).scale(s),
        w_k: rand_mat(kv * head_dim, d, seed + 1).scale(s),
        w_v: rand_mat(kv * head_dim, d, seed + 2).scale(s),
        w_o: rand_mat(d, n_heads * head_dim, seed + 3).scale(1.0 / ((n_heads * head_dim) as f64).sqrt()),
        n_heads,
        head_dim,
        gqa_groups: groups,
        causal,
    }
}
