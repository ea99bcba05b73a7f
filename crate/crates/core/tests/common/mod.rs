#![allow(dead_code)]

use ntks_core::encoding::EncodedDataset;
use ntks_core::linalg::{gaussian_matrix, Rng, SymMatrix};
use ntks_core::models::{Normalization, TwoLayerModel};

pub fn random_data(rng: &mut Rng, n: usize, d: usize) -> EncodedDataset {
    let x = gaussian_matrix(rng, n, d, 1.0).unwrap();
    let y = (0..n).map(|_| rng.uniform()).collect();
    EncodedDataset::new(vec![[0.0; 2]; n], x, y).unwrap()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn matrix_rel_err(a: &SymMatrix, b: &SymMatrix) -> f64 {
    let a: Vec<f64> = a.as_array().iter().copied().collect();
    let b: Vec<f64> = b.as_array().iter().copied().collect();
    rel_err(&a, &b)
}

/// Normalized Hadamard model of the given flavour.
pub fn hadamard(rng: &mut Rng, m: usize, d: usize, topk: bool, modulated: bool) -> TwoLayerModel {
    let norm = if topk {
        Normalization::TopK((m / 3).max(2).min(m))
    } else {
        Normalization::Sp
    };
    TwoLayerModel::hadamard(rng, m, d, 1.0, 1.0, norm, modulated).unwrap()
}
