//! Random Fourier feature moments against Monte Carlo estimates.

use ntks_core::encoding::{
    avg_offdiag_tau, kappa, mc_avg_offdiag_tau, mc_avg_offdiag_tau_pairs, mc_kappa, mc_second_moment, raw_offdiag_tau_avg,
    second_moment, RffEncoder,
};
use ntks_core::linalg::{norm_sq, Rng};
use ntks_core::signals::Grid2D;
use proptest::prelude::*;

const SWEEP: [(usize, f64, f64); 12] = [
    (8, 0.5, 0.1),
    (8, 1.0, 0.3),
    (16, 2.0, 0.05),
    (16, 5.0, 0.02),
    (32, 1.0, 0.2),
    (32, 10.0, 0.01),
    (64, 0.5, 0.5),
    (64, 3.0, 0.07),
    (128, 10.0, 0.03),
    (128, 1.0, 0.1),
    (256, 10.0, 0.02),
    (256, 20.0, 0.005),
];

#[test]
fn closed_forms_match_monte_carlo() {
    let rng = Rng::new(31);
    for (idx, &(d, bw, delta)) in SWEEP.iter().enumerate() {
        let k = mc_kappa(&rng.child(idx as u64), bw, delta, 40_000).unwrap();
        let z = k.z_score(kappa(bw, delta));
        assert!(z.abs() <= 4.0, "kappa d={d} ς={bw} Δ={delta}: z={z}");
        let s = mc_second_moment(&rng.child(100 + idx as u64), d, bw, delta, 10_000).unwrap();
        let z = s.z_score(second_moment(d, bw, delta));
        assert!(z.abs() <= 4.0, "second moment d={d} ς={bw} Δ={delta}: z={z}");
    }
}

#[test]
fn grid_average_matches_monte_carlo() {
    let grid = Grid2D::new(6).unwrap();
    let rng = Rng::new(32);
    for (idx, &(d, bw)) in [(8, 1.0), (32, 2.0), (64, 5.0)].iter().enumerate() {
        let mc = mc_avg_offdiag_tau(&rng.child(idx as u64), &grid, d, bw, 2_000).unwrap();
        let z = mc.z_score(avg_offdiag_tau(&grid, d, bw).unwrap());
        assert!(z.abs() <= 4.0, "d={d} ς={bw}: z={z}");
    }
}

#[test]
fn pair_sampled_grid_average_matches_closed_form() {
    let grid = Grid2D::new(16).unwrap();
    let rng = Rng::new(34);
    for (idx, &(d, bw)) in [(16, 1.0), (64, 10.0), (256, 20.0)].iter().enumerate() {
        let mc = mc_avg_offdiag_tau_pairs(&rng.child(idx as u64), &grid, d, bw, 20_000).unwrap();
        let z = mc.z_score(avg_offdiag_tau(&grid, d, bw).unwrap());
        assert!(z.abs() <= 4.0, "d={d} ς={bw}: z={z}");
    }
}

#[test]
fn encoded_points_have_unit_norm() {
    let mut rng = Rng::new(33);
    let enc = RffEncoder::new(&mut rng, 2, 64, 10.0).unwrap();
    for _ in 0..10_000 {
        let x = [rng.normal() * 3.0, rng.normal() * 3.0];
        assert!((norm_sq(&enc.encode(&x)) - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn large_bandwidth_average_near_inverse_dim() {
    let grid = Grid2D::new(16).unwrap();
    for d in [16usize, 64, 256] {
        let avg = avg_offdiag_tau(&grid, d, 200.0).unwrap();
        let ratio = avg * d as f64;
        assert!((0.5..=2.0).contains(&ratio), "d={d}: d·avg = {ratio}");
    }
}

#[test]
fn encoding_lowers_grid_similarity() {
    let grid = Grid2D::new(16).unwrap();
    let raw = raw_offdiag_tau_avg(&grid).unwrap();
    assert!(avg_offdiag_tau(&grid, 256, 10.0).unwrap() < raw);
    let sweep: Vec<f64> = [1.0, 2.0, 5.0, 10.0, 20.0]
        .iter()
        .map(|&bw| avg_offdiag_tau(&grid, 256, bw).unwrap())
        .collect();
    assert!(sweep.windows(2).all(|w| w[1] < w[0]), "{sweep:?}");
}

proptest! {
    #[test]
    fn moments_are_bounded(d in 1usize..200, bw in 0.01f64..50.0, delta in 0.0f64..2.0) {
        let d = 2 * d;
        let k = kappa(bw, delta);
        prop_assert!((0.0..=1.0).contains(&k));
        let s = second_moment(d, bw, delta);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        prop_assert!(s >= 1.0 / d as f64 - 1e-12 || k > 0.0);
    }

    #[test]
    fn zero_offset_second_moment_is_one(d in 1usize..200, bw in 0.01f64..50.0) {
        prop_assert!((second_moment(2 * d, bw, 0.0) - 1.0).abs() <= 1e-12);
    }
}
