//! Dense symmetric linear algebra and seeded sampling.
//!
//! Matrices are `ndarray::Array2<f64>`. [`SymMatrix`] is a thin wrapper that
//! guarantees exact symmetry of the stored entries; every kernel matrix in the
//! crate goes through it. Eigendecomposition uses cyclic Jacobi rotations,
//! which are slow for large `n` but accurate to the last few ulps at the sizes
//! used here (n ≤ 512).

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NtkError, Result};

pub type Matrix = Array2<f64>;

/// Symmetric real matrix. Entries are symmetrized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    data: Matrix,
}

impl SymMatrix {
    /// Wraps a square matrix, replacing it by `(A + Aᵀ)/2`.
    pub fn new(a: Matrix) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c {
            return Err(NtkError::invalid(format!("matrix is {r}x{c}, not square")));
        }
        if r == 0 {
            return Err(NtkError::invalid("matrix dimension must be at least 1"));
        }
        let mut data = a;
        for i in 0..r {
            for j in (i + 1)..r {
                let v = 0.5 * (data[[i, j]] + data[[j, i]]);
                data[[i, j]] = v;
                data[[j, i]] = v;
            }
        }
        Ok(SymMatrix { data })
    }

    /// Builds the matrix from the upper triangle of `f(i, j)`, `i <= j`.
    pub fn from_upper_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if n == 0 {
            return Err(NtkError::invalid("matrix dimension must be at least 1"));
        }
        let mut data = Matrix::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                data[[i, j]] = v;
                data[[j, i]] = v;
            }
        }
        Ok(SymMatrix { data })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_upper_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        Self::from_upper_fn(values.len(), |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    pub fn as_array(&self) -> &Matrix {
        &self.data
    }

    pub fn into_array(self) -> Matrix {
        self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.diag().sum()
    }

    /// `Σ_ij A_ij²`, i.e. `Tr(A²)` for symmetric `A`.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<SymMatrix> {
        if self.n() != other.n() {
            return Err(NtkError::invalid(format!(
                "dimension mismatch: {} vs {}",
                self.n(),
                other.n()
            )));
        }
        Ok(SymMatrix {
            data: &self.data - &other.data,
        })
    }

    /// `A + shift·I`.
    pub fn shifted(&self, shift: f64) -> SymMatrix {
        let mut data = self.data.clone();
        data.diag_mut().mapv_inplace(|v| v + shift);
        SymMatrix { data }
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix {
            data: &self.data * factor,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data.dot(&ArrayView1::from(x)).to_vec()
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted in descending order.
/// Column `k` of `eigenvectors` belongs to `eigenvalues[k]`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl SpectralDecomposition {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[self.eigenvalues.len() - 1]
    }

    pub fn eigenvector(&self, k: usize) -> ArrayView1<'_, f64> {
        self.eigenvectors.column(k)
    }

    /// Coordinates `V^T x` of a vector in the eigenbasis.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.eigenvectors.t().dot(&ArrayView1::from(x)).to_vec()
    }

    /// `Σ_k f(λ_k) (v_kᵀ x) v_k`.
    pub fn apply_fn(&self, x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
        let coeffs: Array1<f64> = self
            .project(x)
            .into_iter()
            .zip(&self.eigenvalues)
            .map(|(c, &l)| c * f(l))
            .collect();
        self.eigenvectors.dot(&coeffs).to_vec()
    }

    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let lam = Array1::from(self.eigenvalues.clone());
        let scaled = &self.eigenvectors * &lam;
        scaled.dot(&self.eigenvectors.t())
    }
}

const MAX_SWEEPS: usize = 100;
const OFFDIAG_REL_TOL: f64 = 1e-12;

/// Cyclic Jacobi eigendecomposition.
///
/// Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
/// drops below `1e-12·‖A‖_F`.
pub fn sym_eigendecompose(a: &SymMatrix) -> Result<SpectralDecomposition> {
    if !a.is_finite() {
        return Err(NtkError::invalid("matrix has non-finite entries"));
    }
    let n = a.n();
    let mut m: Vec<f64> = a.as_array().iter().copied().collect();
    // Rows of `vt` are the eigenvectors, kept transposed so rotations touch
    // contiguous memory.
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }

    let fro = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = OFFDIAG_REL_TOL * fro;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m, n) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_finite() {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    0.0
                };
                if t == 0.0 {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, n, p, q, c, s, t, apq);
                for k in 0..n {
                    let vp = vt[p * n + k];
                    let vq = vt[q * n + k];
                    vt[p * n + k] = c * vp - s * vq;
                    vt[q * n + k] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let eigenvalues = order.iter().map(|&i| m[i * n + i]).collect();
    let mut eigenvectors = Matrix::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors[[k, col]] = vt[i * n + k];
        }
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn off_diagonal_norm(m: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += m[i * n + j] * m[i * n + j];
            }
        }
    }
    acc.sqrt()
}

/// Applies `A ← JᵀAJ` for the plane rotation annihilating `A[p,q]`.
#[allow(clippy::too_many_arguments)]
fn rotate(m: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64, t: f64, apq: f64) {
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[p * n + k];
        let akq = m[q * n + k];
        let new_p = c * akp - s * akq;
        let new_q = s * akp + c * akq;
        m[p * n + k] = new_p;
        m[k * n + p] = new_p;
        m[q * n + k] = new_q;
        m[k * n + q] = new_q;
    }
    m[p * n + p] -= t * apq;
    m[q * n + q] += t * apq;
    m[p * n + q] = 0.0;
    m[q * n + p] = 0.0;
}

/// Spectral norm `max |λ|` of a symmetric matrix.
pub fn operator_norm(a: &SymMatrix) -> Result<f64> {
    let dec = sym_eigendecompose(a)?;
    Ok(dec.lambda_max().abs().max(dec.lambda_min().abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// Deterministic random source.
///
/// Backed by ChaCha8 (a counter-based stream cipher generator) seeded from a
/// 64-bit seed; normal variates come from the Box–Muller transform. Child
/// generators for parallel work are derived by stream splitting, so the same
/// `(seed, path)` always yields the same draws.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for sub-task `index`. Does not advance `self`.
    pub fn child(&self, index: u64) -> Rng {
        let stream = splitmix64(self.stream ^ splitmix64(index.wrapping_add(1)));
        Rng::with_stream(self.seed, stream)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer on `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping the logarithm finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn sign(&mut self) -> f64 {
        if self.uniform() < 0.5 {
            1.0
        } else {
            -1.0
        }
    }

    /// Uniform `k`-subset of `0..n` (partial Fisher–Yates), in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `rows × cols` matrix of i.i.d. `N(0, std²)` entries, filled row-major.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(NtkError::invalid(format!("standard deviation must be > 0, got {std}")));
    }
    Ok(Matrix::from_shape_fn((rows, cols), |_| std * rng.normal()))
}
