//! Spherical and TopK-spherical normalization of hidden vectors.

use crate::error::{NtkError, Result};
use crate::linalg::{norm_sq, Rng};

/// Hidden energies below this are treated as "all gates closed".
pub const MIN_ENERGY: f64 = 1e-24;

/// `v / ‖v‖₂`.
pub fn sp_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let e = norm_sq(v);
    if !(e >= MIN_ENERGY) {
        return Err(NtkError::energy(e));
    }
    let len = e.sqrt();
    Ok(v.iter().map(|x| x / len).collect())
}

fn check_k(m: usize, k: usize) -> Result<()> {
    if k == 0 || k > m {
        return Err(NtkError::invalid(format!("k = {k} outside 1..={m}")));
    }
    Ok(())
}

/// Selection mask of the `k` entries with largest magnitude. Ties go to the
/// lowest index.
pub fn topk_mask(v: &[f64], k: usize) -> Result<Vec<bool>> {
    check_k(v.len(), k)?;
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[j].abs().total_cmp(&v[i].abs()).then(i.cmp(&j)));
    let mut mask = vec![false; v.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Zeroes all but the top-`k` magnitudes, then normalizes to unit length.
pub fn topk_sp_normalize(v: &[f64], k: usize) -> Result<Vec<f64>> {
    let mask = topk_mask(v, k)?;
    let masked: Vec<f64> = v
        .iter()
        .zip(&mask)
        .map(|(&x, &keep)| if keep { x } else { 0.0 })
        .collect();
    sp_normalize(&masked)
}

/// Uniformly random `k`-subset of `0..m`, sorted ascending.
pub fn uniform_k_mask(rng: &mut Rng, m: usize, k: usize) -> Result<Vec<usize>> {
    check_k(m, k)?;
    let mut idx = rng.sample_indices(m, k);
    idx.sort_unstable();
    Ok(idx)
}

/// `max(⌊ηm⌋, ⌈c·ln m⌉)` clamped to `[1, m]`.
pub fn choose_k(m: usize, eta: f64, c: f64) -> Result<usize> {
    if m == 0 {
        return Err(NtkError::invalid("width must be at least 1"));
    }
    if !(1.0 / 6.0 - 1e-12..1.0).contains(&eta) {
        return Err(NtkError::invalid(format!("eta = {eta} outside [1/6, 1)")));
    }
    if !(2.0..=4.0).contains(&c) {
        return Err(NtkError::invalid(format!("c = {c} outside [2, 4]")));
    }
    let mf = m as f64;
    let by_fraction = (eta * mf).floor() as usize;
    let by_log = (c * mf.ln()).ceil() as usize;
    Ok(by_fraction.max(by_log).clamp(1, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sp_examples() {
        assert_eq!(sp_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(sp_normalize(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            sp_normalize(&[0.0, 0.0]),
            Err(NtkError::DegenerateEnergy { .. })
        ));
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_sp_normalize(&[1.0, -5.0, 2.0], 1).unwrap(), vec![0.0, -1.0, 0.0]);
        let v = [0.3, -1.2, 2.0, 0.7];
        assert_eq!(topk_sp_normalize(&v, 4).unwrap(), sp_normalize(&v).unwrap());
        assert!(topk_mask(&v, 0).is_err());
        assert!(topk_mask(&v, 5).is_err());
        assert!(matches!(
            topk_sp_normalize(&[0.0, 0.0, 0.0], 2),
            Err(NtkError::DegenerateEnergy { .. })
        ));
    }

    #[test]
    fn topk_tie_goes_to_lowest_index() {
        // Oracle: enumerate all 2-subsets, keep those with maximal retained
        // magnitude, and take the lexicographically smallest.
        let v = [1.0f64, 1.0, 2.0];
        let mut best: Option<(f64, [usize; 2])> = None;
        for a in 0..3 {
            for b in (a + 1)..3 {
                let score = v[a].abs() + v[b].abs();
                if best.is_none_or(|(s, _)| score > s) {
                    best = Some((score, [a, b]));
                }
            }
        }
        let [a, b] = best.unwrap().1;
        let mask = topk_mask(&v, 2).unwrap();
        assert!(mask[a] && mask[b]);
        let out = topk_sp_normalize(&v, 2).unwrap();
        let r5 = 5.0f64.sqrt();
        assert!((out[0] - 1.0 / r5).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert!((out[2] - 2.0 / r5).abs() < 1e-15);
    }

    #[test]
    fn choose_k_examples() {
        assert_eq!(choose_k(600, 1.0 / 6.0, 3.0).unwrap(), 100);
        assert_eq!(choose_k(8, 1.0 / 6.0, 3.0).unwrap(), 7);
        assert_eq!(choose_k(1, 1.0 / 6.0, 3.0).unwrap(), 1);
        assert!(choose_k(100, 0.1, 3.0).is_err());
        assert!(choose_k(100, 0.5, 5.0).is_err());
        assert!(choose_k(0, 0.5, 3.0).is_err());
    }

    #[test]
    fn uniform_k_full_set() {
        let mut rng = Rng::new(1);
        assert_eq!(uniform_k_mask(&mut rng, 5, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(uniform_k_mask(&mut rng, 5, 6).is_err());
    }

    #[test]
    fn uniform_k_frequencies() {
        let mut rng = Rng::new(2);
        let (m, k, draws) = (10usize, 3usize, 100_000usize);
        let mut counts = vec![0usize; m];
        for _ in 0..draws {
            for i in uniform_k_mask(&mut rng, m, k).unwrap() {
                counts[i] += 1;
            }
        }
        let p = k as f64 / m as f64;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sd, "count {c}");
        }

        let mut ones = 0usize;
        for _ in 0..draws {
            if uniform_k_mask(&mut rng, 2, 1).unwrap()[0] == 0 {
                ones += 1;
            }
        }
        let sd = (draws as f64 * 0.25).sqrt();
        assert!((ones as f64 - 0.5 * draws as f64).abs() <= 3.0 * sd);
    }
}
