//! Random Fourier feature encoding and its similarity moments.
//!
//! For a frequency matrix `B` with i.i.d. `N(0, ς²)` rows `b_k`, the encoding
//! `γ(x) = √(2/d) [cos(2π b_kᵀx), sin(2π b_kᵀx)]_k` has unit norm for every
//! `x`, and the inner product of two encodings depends on the pair only
//! through `Δ = x_i − x_j`. The closed forms below are expectations over `B`.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{NtkError, Result};
use crate::linalg::{dot, gaussian_matrix, norm_sq, Matrix, Rng, SymMatrix};
use crate::signals::Grid2D;

#[derive(Debug, Clone)]
pub struct RffEncoder {
    freq: Matrix,
    bandwidth: f64,
}

impl RffEncoder {
    /// Draws a `(d/2) × d0` frequency matrix with entries `N(0, ς²)`.
    pub fn new(rng: &mut Rng, input_dim: usize, dim: usize, bandwidth: f64) -> Result<Self> {
        if dim < 2 || !dim.is_multiple_of(2) {
            return Err(NtkError::invalid(format!("encoding dimension must be even and >= 2, got {dim}")));
        }
        if input_dim == 0 {
            return Err(NtkError::invalid("input dimension must be at least 1"));
        }
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(NtkError::invalid(format!("bandwidth must be > 0, got {bandwidth}")));
        }
        let freq = gaussian_matrix(rng, dim / 2, input_dim, bandwidth)?;
        Ok(RffEncoder { freq, bandwidth })
    }

    /// Uses a given frequency matrix (one row per frequency).
    pub fn from_frequencies(freq: Matrix, bandwidth: f64) -> Result<Self> {
        if freq.nrows() == 0 || freq.ncols() == 0 {
            return Err(NtkError::invalid("frequency matrix must be non-empty"));
        }
        Ok(RffEncoder { freq, bandwidth })
    }

    pub fn dim(&self) -> usize {
        2 * self.freq.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.freq.ncols()
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn frequencies(&self) -> &Matrix {
        &self.freq
    }

    /// Cosine and sine of each frequency row, interleaved.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let scale = (2.0 / self.dim() as f64).sqrt();
        let mut out = Vec::with_capacity(self.dim());
        for b in self.freq.rows() {
            let phase = 2.0 * PI * b.iter().zip(x).map(|(bi, xi)| bi * xi).sum::<f64>();
            out.push(scale * phase.cos());
            out.push(scale * phase.sin());
        }
        out
    }

    pub fn encode_all(&self, points: &[[f64; 2]]) -> Matrix {
        let mut out = Matrix::zeros((points.len(), self.dim()));
        for (i, p) in points.iter().enumerate() {
            for (k, v) in self.encode(p).into_iter().enumerate() {
                out[[i, k]] = v;
            }
        }
        out
    }
}

/// Squared cosine between two raw coordinates.
pub fn raw_tau_x(xi: &[f64], xj: &[f64]) -> Result<f64> {
    let (ni, nj) = (norm_sq(xi), norm_sq(xj));
    if ni == 0.0 || nj == 0.0 {
        return Err(NtkError::DegenerateInput(
            "raw similarity is undefined for a zero-norm coordinate".into(),
        ));
    }
    let ip = dot(xi, xj);
    Ok((ip * ip / (ni * nj)).min(1.0))
}

/// Squared inner product of two unit-norm encodings.
pub fn encoded_tau_x(ei: &[f64], ej: &[f64]) -> f64 {
    let ip = dot(ei, ej);
    ip * ip
}

/// `E_B[cos(2π bᵀΔ)] = exp(−2π²ς²‖Δ‖²)`.
pub fn kappa(bandwidth: f64, delta_norm: f64) -> f64 {
    (-2.0 * PI * PI * bandwidth * bandwidth * delta_norm * delta_norm).exp()
}

/// `E_B[(γ(x_i)ᵀγ(x_j))²]` for encoding dimension `d`.
pub fn second_moment(dim: usize, bandwidth: f64, delta_norm: f64) -> f64 {
    let d = dim as f64;
    let k = kappa(bandwidth, delta_norm);
    let k2 = kappa(2.0 * bandwidth, delta_norm);
    (1.0 + k2) / d + (1.0 - 2.0 / d) * k * k
}

/// Closed-form `E_B` of the mean encoded similarity over ordered pairs `i ≠ j`.
pub fn avg_offdiag_tau(grid: &Grid2D, dim: usize, bandwidth: f64) -> Result<f64> {
    if grid.len() < 2 {
        return Err(NtkError::invalid("need at least two grid points"));
    }
    let pts = grid.points();
    let total: f64 = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = pts[i][0] - pts[j][0];
                    let dy = pts[i][1] - pts[j][1];
                    second_moment(dim, bandwidth, (dx * dx + dy * dy).sqrt())
                })
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    let n = pts.len() as f64;
    Ok(total / (n * (n - 1.0)))
}

/// Mean raw similarity over ordered pairs `i ≠ j`, skipping zero-norm points
/// (the grid origin).
pub fn raw_offdiag_tau_avg(grid: &Grid2D) -> Result<f64> {
    let pts: Vec<[f64; 2]> = grid
        .points()
        .iter()
        .copied()
        .filter(|p| norm_sq(p) > 0.0)
        .collect();
    if pts.len() < 2 {
        return Err(NtkError::invalid("need at least two nonzero grid points"));
    }
    let mut total = 0.0;
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            if i != j {
                total += raw_tau_x(&pts[i], &pts[j])?;
            }
        }
    }
    let n = pts.len() as f64;
    Ok(total / (n * (n - 1.0)))
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub draws: usize,
}

impl McEstimate {
    /// `(mean − expected) / stderr`; zero when both the error and the
    /// standard error vanish.
    pub fn z_score(&self, expected: f64) -> f64 {
        let diff = self.mean - expected;
        if self.stderr == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY.copysign(diff)
            }
        } else {
            diff / self.stderr
        }
    }
}

const MC_CHUNKS: u64 = 64;

/// Averages `draw` over `draws` samples using `MC_CHUNKS` child streams, so the
/// result does not depend on the thread count.
pub fn monte_carlo<F>(rng: &Rng, draws: usize, draw: F) -> Result<McEstimate>
where
    F: Fn(&mut Rng) -> f64 + Sync,
{
    if draws < 2 {
        return Err(NtkError::invalid("Monte Carlo needs at least two draws"));
    }
    let chunks = MC_CHUNKS.min(draws as u64);
    let per = draws as u64 / chunks;
    let extra = draws as u64 % chunks;
    let partial: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut child = rng.child(c);
            let count = per + u64::from(c < extra);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for _ in 0..count {
                let v = draw(&mut child);
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = partial
        .into_iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let n = draws as f64;
    let mean = s / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(McEstimate {
        mean,
        stderr: (var / n).sqrt(),
        draws,
    })
}

/// Monte Carlo estimate of [`kappa`] with `b ~ N(0, ς² I₂)`.
pub fn mc_kappa(rng: &Rng, bandwidth: f64, delta_norm: f64, draws: usize) -> Result<McEstimate> {
    monte_carlo(rng, draws, |r| {
        let b0 = bandwidth * r.normal();
        (2.0 * PI * b0 * delta_norm).cos()
    })
}

/// Monte Carlo estimate of [`second_moment`]; each draw uses a fresh encoder.
pub fn mc_second_moment(
    rng: &Rng,
    dim: usize,
    bandwidth: f64,
    delta_norm: f64,
    draws: usize,
) -> Result<McEstimate> {
    RffEncoder::new(&mut rng.clone(), 2, dim, bandwidth)?;
    monte_carlo(rng, draws, |r| {
        let enc = RffEncoder::new(r, 2, dim, bandwidth).expect("validated above");
        let a = enc.encode(&[0.0, 0.0]);
        let b = enc.encode(&[delta_norm, 0.0]);
        encoded_tau_x(&a, &b)
    })
}

/// Monte Carlo estimate of [`avg_offdiag_tau`]; each draw uses a fresh encoder
/// and averages the encoded similarity over all ordered pairs of the grid.
pub fn mc_avg_offdiag_tau(
    rng: &Rng,
    grid: &Grid2D,
    dim: usize,
    bandwidth: f64,
    draws: usize,
) -> Result<McEstimate> {
    if grid.len() < 2 {
        return Err(NtkError::invalid("need at least two grid points"));
    }
    RffEncoder::new(&mut rng.clone(), 2, dim, bandwidth)?;
    let n = grid.len() as f64;
    monte_carlo(rng, draws, |r| {
        let enc = RffEncoder::new(r, 2, dim, bandwidth).expect("validated above");
        let e = enc.encode_all(grid.points());
        let g = e.dot(&e.t());
        let total: f64 = g.iter().map(|v| v * v).sum();
        let diag: f64 = g.diag().iter().map(|v| v * v).sum();
        (total - diag) / (n * (n - 1.0))
    })
}

/// Monte Carlo estimate of [`avg_offdiag_tau`] drawing one uniformly random
/// ordered pair `i ≠ j` and one fresh frequency matrix per sample.
pub fn mc_avg_offdiag_tau_pairs(
    rng: &Rng,
    grid: &Grid2D,
    dim: usize,
    bandwidth: f64,
    draws: usize,
) -> Result<McEstimate> {
    let n = grid.len();
    if n < 2 {
        return Err(NtkError::invalid("need at least two grid points"));
    }
    RffEncoder::new(&mut rng.clone(), 2, dim, bandwidth)?;
    monte_carlo(rng, draws, |r| {
        let i = r.below(n);
        let mut j = r.below(n - 1);
        if j >= i {
            j += 1;
        }
        let enc = RffEncoder::new(r, 2, dim, bandwidth).expect("validated above");
        encoded_tau_x(&enc.encode(&grid.point(i)), &enc.encode(&grid.point(j)))
    })
}

/// Training inputs with their pairwise inner products `ρ_ij = x̃_iᵀx̃_j`.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub raw: Vec<[f64; 2]>,
    pub inputs: Matrix,
    pub targets: Vec<f64>,
    pub rho: SymMatrix,
}

impl EncodedDataset {
    /// Generic constructor; row `i` of `inputs` is the network input for sample `i`.
    pub fn new(raw: Vec<[f64; 2]>, inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 || inputs.ncols() == 0 {
            return Err(NtkError::invalid("dataset must have at least one sample and one feature"));
        }
        if raw.len() != n || targets.len() != n {
            return Err(NtkError::invalid(format!(
                "{} inputs, {} raw points, {} targets",
                n,
                raw.len(),
                targets.len()
            )));
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(NtkError::invalid("dataset has non-finite values"));
        }
        let inputs = inputs.as_standard_layout().into_owned();
        let rho = SymMatrix::new(inputs.dot(&inputs.t()))?;
        Ok(EncodedDataset {
            raw,
            inputs,
            targets,
            rho,
        })
    }

    /// Raw coordinates used directly as network inputs.
    pub fn from_raw(points: &[[f64; 2]], targets: Vec<f64>) -> Result<Self> {
        let inputs = Matrix::from_shape_fn((points.len(), 2), |(i, k)| points[i][k]);
        Self::new(points.to_vec(), inputs, targets)
    }

    pub fn from_rff(enc: &RffEncoder, points: &[[f64; 2]], targets: Vec<f64>) -> Result<Self> {
        Self::new(points.to_vec(), enc.encode_all(points), targets)
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs
            .row(i)
            .to_slice()
            .expect("inputs are stored in standard layout")
    }
}
