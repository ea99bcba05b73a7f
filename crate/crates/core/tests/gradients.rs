//! Analytic gradients against central finite differences.

mod common;

use common::rel_err;
use ntks_core::linalg::Rng;
use ntks_core::models::{MultiLayerModel, Normalization, TwoLayerModel};
use proptest::prelude::*;

const STEP: f64 = 1e-6;
const MARGIN: f64 = 1e-3;
/// Rounding noise of a central difference with `STEP` on O(1) outputs.
const FD_FLOOR: f64 = 1e-8;

fn assert_close(analytic: &[f64], numeric: &[f64], rel: f64, label: &str) {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(
        diff <= rel * scale + FD_FLOOR,
        "{label}: |diff| {diff:e} vs |g| {scale:e}"
    );
}

/// True when no preactivation sits within `MARGIN` of the ReLU kink and no
/// TopK selection is within `MARGIN` of a tie.
fn well_separated(model: &TwoLayerModel, x: &[f64]) -> bool {
    let h = model.hidden_state(x).unwrap();
    if h.preacts.iter().any(|g| g.abs() < MARGIN) {
        return false;
    }
    if let Normalization::TopK(k) = model.normalization() {
        let mut a: Vec<f64> = h.activations.clone();
        a.sort_by(|p, q| q.total_cmp(p));
        if k < a.len() && a[k - 1] - a[k] < MARGIN {
            return false;
        }
    }
    true
}

fn fd_two_layer(model: &TwoLayerModel, x: &[f64]) -> Vec<f64> {
    let w = model.weights().clone();
    let mut out = Vec::with_capacity(w.len());
    for idx in 0..w.len() {
        let (r, c) = (idx / w.ncols(), idx % w.ncols());
        let mut plus = model.clone();
        let mut wp = w.clone();
        wp[[r, c]] += STEP;
        plus.set_weights(wp).unwrap();
        let mut minus = model.clone();
        let mut wm = w.clone();
        wm[[r, c]] -= STEP;
        minus.set_weights(wm).unwrap();
        out.push((plus.forward(x).unwrap() - minus.forward(x).unwrap()) / (2.0 * STEP));
    }
    out
}

fn fd_multilayer(model: &MultiLayerModel, x: &[f64]) -> Vec<f64> {
    let p = model.params();
    (0..p.len())
        .map(|i| {
            let mut m = model.clone();
            let mut q = p.clone();
            q[i] += STEP;
            m.set_params(&q).unwrap();
            let up = m.forward(x).unwrap();
            q[i] -= 2.0 * STEP;
            m.set_params(&q).unwrap();
            (up - m.forward(x).unwrap()) / (2.0 * STEP)
        })
        .collect()
}

fn multilayer_separated(model: &MultiLayerModel, x: &[f64]) -> bool {
    let cache = model.forward_cache(x).unwrap();
    cache.layers.iter().zip(model.layers()).all(|(l, layer)| {
        if l.preacts.iter().any(|g| g.abs() < MARGIN) {
            return false;
        }
        if let Normalization::TopK(k) = layer.normalization {
            let mut a = l.activations.clone();
            a.sort_by(|p, q| q.total_cmp(p));
            if k < a.len() && a[k - 1] - a[k] < MARGIN {
                return false;
            }
        }
        true
    })
}

#[test]
fn two_layer_gradients_match_finite_differences() {
    let mut rng = Rng::new(101);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 200 {
        attempts += 1;
        assert!(attempts < 2000, "too few well-separated instances");
        let m = 2 + rng.below(12);
        let d = 1 + rng.below(5);
        let a = 1.0 + rng.uniform();
        let model = match checked % 4 {
            0 => TwoLayerModel::baseline(&mut rng, m, d, a, 1.0).unwrap(),
            1 => TwoLayerModel::hadamard(&mut rng, m, d, 1.0, 1.0, Normalization::Sp, true).unwrap(),
            2 => TwoLayerModel::hadamard(&mut rng, m, d, 1.0, 1.0, Normalization::TopK(1 + m / 2), true)
                .unwrap(),
            _ => TwoLayerModel::hadamard(&mut rng, m, d, 1.0, 1.0, Normalization::None, true).unwrap(),
        };
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if model.hidden_state(&x).is_err() || !well_separated(&model, &x) {
            continue;
        }
        let analytic: Vec<f64> = model.gradient(&x).unwrap().iter().copied().collect();
        let numeric = fd_two_layer(&model, &x);
        assert_close(&analytic, &numeric, 1e-5, &format!("instance {checked}"));
        checked += 1;
    }
}

#[test]
fn multilayer_backprop_matches_finite_differences() {
    let mut rng = Rng::new(202);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 200 {
        attempts += 1;
        assert!(attempts < 4000, "too few well-separated instances");
        let d = 1 + rng.below(4);
        let depth = 1 + rng.below(3);
        let widths: Vec<usize> = (0..depth).map(|_| 3 + rng.below(6)).collect();
        let norm = match checked % 3 {
            0 => Normalization::Sp,
            1 => Normalization::TopK(2),
            _ => Normalization::None,
        };
        let modulated = checked % 2 == 0;
        let model = MultiLayerModel::random(&mut rng, d, &widths, norm, modulated, 1.0, 1.0).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if model.forward_cache(&x).is_err() || !multilayer_separated(&model, &x) {
            continue;
        }
        let analytic = model.gradient(&x, 1.0).unwrap().flatten();
        let numeric = fd_multilayer(&model, &x);
        assert_close(&analytic, &numeric, 1e-4, &format!("instance {checked}"));
        checked += 1;
    }
}

#[test]
fn leading_order_gradient_differs_only_by_energy_coupling() {
    let mut rng = Rng::new(303);
    let model = TwoLayerModel::hadamard(&mut rng, 64, 3, 1.0, 1.0, Normalization::Sp, true).unwrap();
    let x = [0.3, -1.2, 0.8];
    let exact: Vec<f64> = model.gradient(&x).unwrap().iter().copied().collect();
    let lead: Vec<f64> = model.leading_order_gradient(&x).unwrap().iter().copied().collect();
    // The dropped term is a rank-one correction along ŝ; it is nonzero but
    // small relative to the full gradient at this width.
    let err = rel_err(&exact, &lead);
    assert!(err > 0.0 && err < 1.0, "relative gap {err}");
}

#[test]
fn unnormalized_hadamard_gradient_is_leading_order() {
    let mut rng = Rng::new(404);
    let model = TwoLayerModel::hadamard(&mut rng, 16, 4, 1.0, 1.0, Normalization::None, true).unwrap();
    let x = [0.1, 0.2, -0.5, 1.0];
    assert_eq!(model.gradient(&x).unwrap(), model.leading_order_gradient(&x).unwrap());
}

#[test]
fn gradient_flattens_to_param_count() {
    let mut rng = Rng::new(505);
    let model = MultiLayerModel::random(&mut rng, 2, &[4, 3], Normalization::Sp, false, 1.0, 1.0).unwrap();
    let g = model.gradient(&[0.5, -0.25], 1.0).unwrap();
    assert_eq!(g.flatten().len(), model.param_count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn readout_scale_is_linear(seed in 0u64..10_000, a in 0.1f64..4.0) {
        let mut rng = Rng::new(seed);
        let model = TwoLayerModel::hadamard(&mut rng, 12, 3, 1.0, 1.0, Normalization::Sp, true).unwrap();
        let scaled = model.clone().with_a_scale(a).unwrap();
        let x = [rng.normal(), rng.normal(), rng.normal()];
        if let (Ok(u1), Ok(ua)) = (model.forward(&x), scaled.forward(&x)) {
            prop_assert!((ua - a * u1).abs() <= 1e-12 * (1.0 + ua.abs()));
        }
    }

    #[test]
    fn sp_output_is_scale_invariant_in_weights(seed in 0u64..10_000, c in 0.1f64..10.0) {
        // σ(c·g)/√S(c·g) = σ(g)/√S(g) for c > 0.
        let mut rng = Rng::new(seed);
        let model = TwoLayerModel::hadamard(&mut rng, 10, 2, 1.0, 1.0, Normalization::Sp, true).unwrap();
        let mut scaled = model.clone();
        scaled.set_weights(model.weights() * c).unwrap();
        let x = [rng.normal(), rng.normal()];
        if let (Ok(u1), Ok(uc)) = (model.forward(&x), scaled.forward(&x)) {
            prop_assert!((u1 - uc).abs() <= 1e-12 * (1.0 + u1.abs()));
        }
    }
}
