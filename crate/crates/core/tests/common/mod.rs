//! Shared fixtures and naive reference implementations for integration tests.
#![allow(dead_code)]

use bofa::bridge::TrainConfig;
use bofa::harness::{Method, RunConfig, SynthConfig};
use bofa::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Schoolbook product over `get`, independent of the library kernels.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out[i * b.cols() + j] = s;
        }
    }
    Matrix::from_vec(a.rows(), b.cols(), out).unwrap()
}

pub fn naive_transpose(a: &Matrix) -> Matrix {
    let mut out = vec![0.0; a.rows() * a.cols()];
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out[j * a.rows() + i] = a.get(i, j);
        }
    }
    Matrix::from_vec(a.cols(), a.rows(), out).unwrap()
}

pub fn naive_frobenius(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `trace(Pᵀ S P)`, the projected energy of a scatter matrix.
pub fn projected_energy(s: &Matrix, p: &Matrix) -> f64 {
    let sp = naive_matmul(s, p);
    let mut t = 0.0;
    for j in 0..p.cols() {
        for i in 0..p.rows() {
            t += p.get(i, j) * sp.get(i, j);
        }
    }
    t
}

/// Classical Gram-Schmidt with re-orthogonalization on a Gaussian draw.
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = gaussian(rows, cols, rng);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v: Vec<f64> = (0..rows).map(|i| g.get(i, j)).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= d * ui;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    let mut data = vec![0.0; rows * cols];
    for (j, col) in q.iter().enumerate() {
        for i in 0..rows {
            data[i * cols + j] = col[i];
        }
    }
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Synthetic stream used for the forgetting comparison: per-task feature
/// subspaces, a shared offset in every feature, and per-task text drift.
pub fn forgetting_synth() -> SynthConfig {
    SynthConfig {
        seed: 1993,
        tasks: 5,
        classes_per_task: 10,
        train_per_class: 100,
        test_per_class: 50,
        d_o: 64,
        d: 32,
        text_noise: 0.5,
        spread: 0.5,
        shared: 2.0,
        w0_noise: 0.0,
        task_dim: 10,
        task_shift: 1.0,
        noise_floor: 0.05,
    }
}

pub fn forgetting_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        k: Some(8),
        inc_n: 10,
        train: TrainConfig {
            lr0: 1.0,
            epochs: 5,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

/// A small stream for fast protocol tests.
pub fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        tasks: 4,
        classes_per_task: 3,
        train_per_class: 15,
        test_per_class: 8,
        d_o: 16,
        d: 8,
        text_noise: 0.5,
        spread: 0.5,
        shared: 1.0,
        w0_noise: 0.0,
        task_dim: 4,
        task_shift: 0.5,
        noise_floor: 0.05,
    }
}

pub fn small_config(method: Method) -> RunConfig {
    RunConfig {
        method,
        k: Some(3),
        inc_n: 3,
        train: TrainConfig {
            lr0: 0.5,
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}
