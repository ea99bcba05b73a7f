//! Analytic kernels against Jacobian Gram matrices, and the exact moment
//! identities.

mod common;

use common::{hadamard, matrix_rel_err, random_data};
use ntks_core::encoding::EncodedDataset;
use ntks_core::linalg::{sym_eigendecompose, Rng, SymMatrix};
use ntks_core::models::{MultiLayerModel, Normalization, TwoLayerModel};
use ntks_core::ntk::{
    assemble_baseline_ntk, assemble_hadamard_ntk, jacobian_gram, similarity_bundle, spectral_stats,
    variance_proxy_baseline, variance_proxy_hadamard, verify_mean_identity, verify_second_moment_identity,
    ParamScope,
};
use ndarray::Array2;
use proptest::prelude::*;

#[test]
fn analytic_kernels_match_jacobian_gram() {
    let mut rng = Rng::new(11);
    for inst in 0..50 {
        let n = 2 + rng.below(10);
        let m = 2 + rng.below(40);
        let d = 1 + rng.below(6);
        let data = random_data(&mut rng, n, d);
        let model = match inst % 4 {
            0 => TwoLayerModel::baseline(&mut rng, m, d, 1.5, 1.0).unwrap(),
            1 => hadamard(&mut rng, m, d, false, true),
            2 => hadamard(&mut rng, m, d, true, true),
            _ => TwoLayerModel::hadamard(&mut rng, m, d, 1.0, 1.0, Normalization::None, true).unwrap(),
        };
        let analytic = match inst % 4 {
            0 => assemble_baseline_ntk(&model, &data),
            _ => assemble_hadamard_ntk(&model, &data),
        };
        let Ok(analytic) = analytic else { continue };
        let ml = MultiLayerModel::from_two_layer(&model).unwrap();
        let jac = jacobian_gram(&ml, &data, ParamScope::FirstLayer).unwrap();
        let err = matrix_rel_err(&analytic.matrix, &jac.matrix);
        assert!(err <= 1e-10, "instance {inst}: {err:e}");
    }
}

#[test]
fn jacobian_gram_is_psd() {
    let mut rng = Rng::new(12);
    let model = MultiLayerModel::random(&mut rng, 3, &[16, 8], Normalization::Sp, true, 1.0, 1.0).unwrap();
    let data = random_data(&mut rng, 20, 3);
    let h = jacobian_gram(&model, &data, ParamScope::All).unwrap();
    let lmin = sym_eigendecompose(&h.matrix).unwrap().lambda_min();
    assert!(lmin >= -1e-9 * h.matrix.max_abs());
}

#[test]
fn single_parameter_gram_is_rank_one() {
    let model = TwoLayerModel::baseline(&mut Rng::new(13), 1, 1, 1.0, 1.0).unwrap();
    let ml = MultiLayerModel::from_two_layer(&model).unwrap();
    let data = EncodedDataset::new(
        vec![[0.0; 2]; 3],
        Array2::from_shape_vec((3, 1), vec![0.5, 1.0, 2.0]).unwrap(),
        vec![0.0; 3],
    )
    .unwrap();
    let h = jacobian_gram(&ml, &data, ParamScope::FirstLayer).unwrap();
    let eig = sym_eigendecompose(&h.matrix).unwrap().eigenvalues;
    assert!(eig[1].abs() <= 1e-12 * eig[0].abs().max(1e-300));
    assert!(eig[2].abs() <= 1e-12 * eig[0].abs().max(1e-300));
}

#[test]
fn exact_identities_across_sizes() {
    let mut rng = Rng::new(14);
    let mut count = 0;
    for &n in &[2usize, 8, 32, 64] {
        for &m in &[4usize, 64, 512] {
            for topk in [false, true] {
                for modulated in [false, true] {
                    let d = 1 + rng.below(8);
                    let data = random_data(&mut rng, n, d);
                    let model = hadamard(&mut rng, m, d, topk, modulated);
                    let (Ok(mean), Ok(second)) = (
                        verify_mean_identity(&model, &data),
                        verify_second_moment_identity(&model, &data),
                    ) else {
                        continue;
                    };
                    assert!(mean.rel_err <= 1e-10, "n={n} m={m}: mean {:e}", mean.rel_err);
                    assert!(second.rel_err <= 1e-10, "n={n} m={m}: second {:e}", second.rel_err);
                    count += 1;
                }
            }
        }
    }
    assert!(count >= 40);
}

#[test]
fn baseline_identities_hold_with_gates() {
    let mut rng = Rng::new(15);
    let data = random_data(&mut rng, 16, 4);
    let model = TwoLayerModel::baseline(&mut rng, 64, 4, 1.0, 1.0).unwrap();
    assert!(verify_mean_identity(&model, &data).unwrap().rel_err <= 1e-10);
    assert!(verify_second_moment_identity(&model, &data).unwrap().rel_err <= 1e-10);
}

#[test]
fn zero_offdiagonal_rho_leaves_diagonal_sum() {
    let mut rng = Rng::new(16);
    let model = hadamard(&mut rng, 32, 4, false, true);
    let mut x = Array2::zeros((4, 4));
    for i in 0..4 {
        x[[i, i]] = 1.0 + i as f64;
    }
    let data = EncodedDataset::new(vec![[0.0; 2]; 4], x, vec![0.0; 4]).unwrap();
    let h = assemble_hadamard_ntk(&model, &data);
    let Ok(h) = h else { return };
    let second = verify_second_moment_identity(&model, &data).unwrap();
    let lead = ntks_core::ntk::assemble_leading_order_ntk(&model, &data).unwrap();
    let diag: f64 = (0..4).map(|i| lead.matrix.get(i, i).powi(2)).sum::<f64>() / 4.0;
    assert!((second.lhs - diag).abs() <= 1e-12 * diag);
    assert_eq!(h.matrix.get(0, 1), 0.0);
}

#[test]
fn base_energy_is_half_width() {
    let mut rng = Rng::new(17);
    let data = random_data(&mut rng, 64, 2);
    let model = TwoLayerModel::baseline(&mut rng, 512, 2, 1.0, 1.0).unwrap();
    let b = similarity_bundle(&model, &data).unwrap();
    assert!((b.s_bar / 256.0 - 1.0).abs() <= 0.1, "S̄ = {}", b.s_bar);
    let sum_cos2_p: f64 = b.cos2_p.as_array().sum();
    assert_eq!(sum_cos2_p, (64 * 64) as f64);
}

#[test]
fn orthogonal_inputs_zero_baseline_proxy() {
    let mut rng = Rng::new(18);
    let model = TwoLayerModel::baseline(&mut rng, 32, 3, 1.0, 1.0).unwrap();
    let data = EncodedDataset::new(vec![[0.0; 2]; 3], Array2::eye(3), vec![0.0; 3]).unwrap();
    let b = similarity_bundle(&model, &data).unwrap();
    assert_eq!(variance_proxy_baseline(&b), 0.0);
}

#[test]
fn spectral_stats_second_moment_matches_eigenvalues() {
    let mut rng = Rng::new(19);
    let data = random_data(&mut rng, 24, 3);
    let model = hadamard(&mut rng, 128, 3, false, true);
    let h = assemble_hadamard_ntk(&model, &data).unwrap();
    let s = spectral_stats(&h).unwrap();
    let n = s.eigenvalues.len() as f64;
    let from_eig: f64 = s.eigenvalues.iter().map(|l| l * l).sum::<f64>() / n;
    assert!((from_eig - s.second_moment).abs() <= 1e-9 * s.second_moment);
    let mean_eig: f64 = s.eigenvalues.iter().sum::<f64>() / n;
    assert!((mean_eig - s.mu_lambda).abs() <= 1e-9 * s.mu_lambda);
    assert!(s.v_lambda >= -1e-9 * s.second_moment);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bundle_invariants(seed in 0u64..100_000, n in 1usize..12, m in 2usize..48, topk in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let data = random_data(&mut rng, n, 3);
        let model = hadamard(&mut rng, m, 3, topk, true);
        if let Ok(b) = similarity_bundle(&model, &data) {
            for i in 0..n {
                prop_assert!((b.tau_x.get(i, i) - 1.0).abs() <= 1e-12);
                if b.s_norm_sq[i] > 0.0 {
                    prop_assert!((b.cos2_s.get(i, i) - 1.0).abs() <= 1e-12);
                }
                prop_assert!((b.cos2_p.get(i, i) - 1.0).abs() <= 1e-12);
                for j in 0..n {
                    for t in [&b.tau_x, &b.tau_s, &b.tau_p, &b.tau_q, &b.cos2_s, &b.cos2_p] {
                        let v = t.get(i, j);
                        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
                    }
                    let k = b.kappa_align.get(i, j);
                    prop_assert!((-1.0..=1.0).contains(&k));
                    prop_assert!((b.tau_q.get(i, j) - k * k).abs() <= 1e-15);
                }
            }
            prop_assert!(variance_proxy_hadamard(&b) >= 0.0);
        }
    }

    #[test]
    fn duplicate_samples_have_unit_similarity(seed in 0u64..100_000) {
        let mut rng = Rng::new(seed);
        let mut x = ntks_core::linalg::gaussian_matrix(&mut rng, 3, 2, 1.0).unwrap();
        let row = x.row(0).to_owned();
        x.row_mut(2).assign(&row);
        let data = EncodedDataset::new(vec![[0.0; 2]; 3], x, vec![0.0; 3]).unwrap();
        let model = TwoLayerModel::baseline(&mut rng, 16, 2, 1.0, 1.0).unwrap();
        let b = similarity_bundle(&model, &data).unwrap();
        prop_assert!((b.tau_x.get(0, 2) - 1.0).abs() <= 1e-12);
        for j in 0..3 {
            prop_assert!((b.tau_x.get(0, j) - b.tau_x.get(2, j)).abs() <= 1e-12);
        }
    }

    #[test]
    fn kernel_is_symmetric_psd(seed in 0u64..100_000, n in 1usize..10) {
        let mut rng = Rng::new(seed);
        let data = random_data(&mut rng, n, 3);
        let model = hadamard(&mut rng, 24, 3, false, true);
        if let Ok(h) = assemble_hadamard_ntk(&model, &data) {
            let lmin = sym_eigendecompose(&h.matrix).unwrap().lambda_min();
            prop_assert!(lmin >= -1e-9 * h.matrix.max_abs().max(1e-300));
            let t = SymMatrix::new(h.matrix.as_array().t().to_owned()).unwrap();
            prop_assert_eq!(t.as_array(), h.matrix.as_array());
        }
    }
}
