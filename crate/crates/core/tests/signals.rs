//! Image IO and reconstruction metrics.

use ntks_core::linalg::Rng;
use ntks_core::signals::{encode_pgm, load_pgm, parse_pgm, psnr, synth_target, write_pgm, Grid2D, TargetKind};
use proptest::prelude::*;

#[test]
fn pgm_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.pgm");
    let grid = Grid2D::new(8).unwrap();
    let target = synth_target(&grid, TargetKind::FreqMix, &mut Rng::new(3));
    write_pgm(&path, 8, &target.values).unwrap();
    let (g, t) = load_pgm(&path).unwrap();
    assert_eq!(g.side(), 8);
    for (a, b) in t.values.iter().zip(&target.values) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn synthetic_targets_are_in_unit_range() {
    let grid = Grid2D::new(32).unwrap();
    for kind in [TargetKind::FreqMix, TargetKind::Step, TargetKind::Ramp] {
        let t = synth_target(&grid, kind, &mut Rng::new(4));
        assert_eq!(t.len(), 1024);
        assert!(t.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn psnr_of_constant_offset() {
    let truth = vec![0.5; 16];
    let pred = vec![0.6; 16];
    let p = psnr(&pred, &truth).unwrap();
    assert!((p - 20.0).abs() <= 1e-9);
    assert_eq!(psnr(&truth, &truth).unwrap(), f64::INFINITY);
}

proptest! {
    #[test]
    fn eight_bit_roundtrip(side in 1usize..12, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let values: Vec<f64> = (0..side * side).map(|_| (rng.below(256) as f64) / 255.0).collect();
        let bytes = encode_pgm(side, &values).unwrap();
        let (grid, t) = parse_pgm(&bytes).unwrap();
        prop_assert_eq!(grid.side(), side);
        for (a, b) in t.values.iter().zip(&values) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn truncated_images_are_rejected(side in 2usize..8, cut in 1usize..4) {
        let bytes = encode_pgm(side, &vec![0.25; side * side]).unwrap();
        prop_assert!(parse_pgm(&bytes[..bytes.len() - cut]).is_err());
    }
}
