use std::fmt;
use std::str::FromStr;

use crate::encoding::EncodedDataset;
use crate::error::{NtkError, Result};
use crate::linalg::{Matrix, Rng, SymMatrix};
use crate::models::{sp_normalize, topk_mask, uniform_k_mask, HiddenState, TwoLayerModel};

/// Pairwise similarity factors of a kernel `H_ij = (a²/m) ρ_ij ⟨s_i⊙p_i, s_j⊙p_j⟩`.
///
/// `tau_s` and `tau_p` are the energy-overlap similarities
/// `‖u_i⊙u_j‖² / (‖u_i‖²‖u_j‖²)`; these are the factors of the exact moment
/// identities but their diagonal is `Σu⁴/(Σu²)²`, not 1. `cos2_s` and `cos2_p`
/// are the squared cosines `⟨u_i,u_j⟩² / (‖u_i‖²‖u_j‖²)`, which have unit
/// diagonal and are what the reported similarity masses sum.
/// `kappa_align_ij = cos∠(s_i⊙s_j, p_i⊙p_j)` and `tau_q = kappa_align²`.
/// Every ratio is defined as 0 when its denominator vanishes.
#[derive(Debug, Clone)]
pub struct SimilarityBundle {
    pub tau_x: SymMatrix,
    pub tau_s: SymMatrix,
    pub tau_p: SymMatrix,
    pub kappa_align: SymMatrix,
    pub tau_q: SymMatrix,
    pub cos2_s: SymMatrix,
    pub cos2_p: SymMatrix,
    /// `ρ_ii`.
    pub rho_diag: Vec<f64>,
    /// `‖s_i‖²`.
    pub s_norm_sq: Vec<f64>,
    /// `‖p_i‖²`.
    pub p_norm_sq: Vec<f64>,
    /// Mean of `ρ_ii`.
    pub r_x_sq: f64,
    /// Mean of `‖s_i‖²`.
    pub s_bar: f64,
    /// Mean of `‖p_i‖²`.
    pub p_bar: f64,
    /// `(1/m) Σ_r σ(g_{r,i})² M_{r,i}`: masked hidden energy per sample.
    pub masked_energy: Vec<f64>,
    /// Mean of `masked_energy`.
    pub masked_energy_bar: f64,
    pub a_scale: f64,
    pub width: usize,
}

impl SimilarityBundle {
    pub fn n(&self) -> usize {
        self.rho_diag.len()
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn sym_from_fn(n: usize, f: impl FnMut(usize, usize) -> f64) -> Result<SymMatrix> {
    SymMatrix::from_upper_fn(n, f)
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Matrix {
    let m = rows.first().map_or(0, Vec::len);
    Matrix::from_shape_fn((rows.len(), m), |(i, r)| rows[i][r])
}

fn squared(rows: &[Vec<f64>]) -> Matrix {
    rows_to_matrix(rows).mapv(|v| v * v)
}

pub fn similarity_bundle(model: &TwoLayerModel, data: &EncodedDataset) -> Result<SimilarityBundle> {
    let states = model.hidden_states(&data.inputs)?;
    similarity_bundle_from_states(&states, &data.rho, model.a_scale())
}

pub fn similarity_bundle_from_states(
    states: &[HiddenState],
    rho: &SymMatrix,
    a_scale: f64,
) -> Result<SimilarityBundle> {
    let n = states.len();
    if n == 0 || rho.n() != n {
        return Err(NtkError::invalid("need one hidden state per kernel row"));
    }
    let width = states[0].s.len();
    let s: Vec<Vec<f64>> = states.iter().map(|h| h.s.clone()).collect();
    let p: Vec<Vec<f64>> = states.iter().map(|h| h.p.clone()).collect();
    let t: Vec<Vec<f64>> = states.iter().map(|h| h.t.clone()).collect();

    let s_mat = rows_to_matrix(&s);
    let p_mat = rows_to_matrix(&p);
    let s2 = squared(&s);
    let p2 = squared(&p);
    let t_mat = rows_to_matrix(&t);
    let ss = s_mat.dot(&s_mat.t());
    let pp = p_mat.dot(&p_mat.t());
    let zz = s2.dot(&s2.t());
    let vv = p2.dot(&p2.t());
    let tt = t_mat.dot(&t_mat.t());

    let rho_diag: Vec<f64> = (0..n).map(|i| rho.get(i, i)).collect();
    let s_norm_sq: Vec<f64> = (0..n).map(|i| ss[[i, i]]).collect();
    let p_norm_sq: Vec<f64> = (0..n).map(|i| pp[[i, i]]).collect();

    let tau_x = sym_from_fn(n, |i, j| {
        let r = rho.get(i, j);
        ratio(r * r, rho_diag[i] * rho_diag[j]).min(1.0)
    })?;
    let tau_s = sym_from_fn(n, |i, j| ratio(zz[[i, j]], s_norm_sq[i] * s_norm_sq[j]).min(1.0))?;
    let tau_p = sym_from_fn(n, |i, j| ratio(vv[[i, j]], p_norm_sq[i] * p_norm_sq[j]).min(1.0))?;
    let kappa_align = sym_from_fn(n, |i, j| {
        ratio(tt[[i, j]], (zz[[i, j]] * vv[[i, j]]).sqrt()).clamp(-1.0, 1.0)
    })?;
    let tau_q = sym_from_fn(n, |i, j| {
        let k = kappa_align.get(i, j);
        k * k
    })?;
    let cos2_s = sym_from_fn(n, |i, j| {
        let v = ss[[i, j]];
        ratio(v * v, s_norm_sq[i] * s_norm_sq[j]).min(1.0)
    })?;
    let cos2_p = sym_from_fn(n, |i, j| {
        let v = pp[[i, j]];
        ratio(v * v, p_norm_sq[i] * p_norm_sq[j]).min(1.0)
    })?;

    let masked_energy: Vec<f64> = states
        .iter()
        .map(|h| {
            h.activations
                .iter()
                .zip(&h.mask)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| v * v)
                .sum::<f64>()
                / width as f64
        })
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    Ok(SimilarityBundle {
        r_x_sq: mean(&rho_diag),
        s_bar: mean(&s_norm_sq),
        p_bar: mean(&p_norm_sq),
        masked_energy_bar: mean(&masked_energy),
        tau_x,
        tau_s,
        tau_p,
        kappa_align,
        tau_q,
        cos2_s,
        cos2_p,
        rho_diag,
        s_norm_sq,
        p_norm_sq,
        masked_energy,
        a_scale,
        width,
    })
}

fn offdiag_sum(n: usize, f: impl Fn(usize, usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += f(i, j);
            }
        }
    }
    acc
}

/// `(a⁴ R_x⁴ S̄² / (n m²)) Σ_{i≠j} τ_x τ_s`.
pub fn variance_proxy_baseline(bundle: &SimilarityBundle) -> f64 {
    let n = bundle.n();
    let a = bundle.a_scale;
    let m = bundle.width as f64;
    let scale = a.powi(4) * bundle.r_x_sq.powi(2) * bundle.s_bar.powi(2) / (n as f64 * m * m);
    scale * offdiag_sum(n, |i, j| bundle.tau_x.get(i, j) * bundle.tau_s.get(i, j))
}

/// `(a⁴ R_x⁴ S̄² P̄² / (n m²)) Σ_{i≠j} τ_x τ_s τ_p τ_q`.
pub fn variance_proxy_hadamard(bundle: &SimilarityBundle) -> f64 {
    let n = bundle.n();
    let a = bundle.a_scale;
    let m = bundle.width as f64;
    let scale = a.powi(4)
        * bundle.r_x_sq.powi(2)
        * bundle.s_bar.powi(2)
        * bundle.p_bar.powi(2)
        / (n as f64 * m * m);
    scale
        * offdiag_sum(n, |i, j| {
            bundle.tau_x.get(i, j)
                * bundle.tau_s.get(i, j)
                * bundle.tau_p.get(i, j)
                * bundle.tau_q.get(i, j)
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauFamily {
    X,
    S,
    P,
    Q,
}

impl FromStr for TauFamily {
    type Err = NtkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(TauFamily::X),
            "s" => Ok(TauFamily::S),
            "p" => Ok(TauFamily::P),
            "q" => Ok(TauFamily::Q),
            other => Err(NtkError::invalid(format!("unknown similarity family {other:?}"))),
        }
    }
}

impl fmt::Display for TauFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauFamily::X => "x",
            TauFamily::S => "s",
            TauFamily::P => "p",
            TauFamily::Q => "q",
        })
    }
}

/// Four-factor proxy before and after multiplying the off-diagonal entries of
/// one similarity family by `scale ∈ [0, 1]`.
pub fn monotonicity_probe(bundle: &SimilarityBundle, family: TauFamily, scale: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&scale) {
        return Err(NtkError::invalid(format!("scale {scale} outside [0, 1]")));
    }
    let before = variance_proxy_hadamard(bundle);
    let mut probed = bundle.clone();
    let target = match family {
        TauFamily::X => &mut probed.tau_x,
        TauFamily::S => &mut probed.tau_s,
        TauFamily::P => &mut probed.tau_p,
        TauFamily::Q => &mut probed.tau_q,
    };
    let n = target.n();
    *target = SymMatrix::from_upper_fn(n, |i, j| {
        let v = target.get(i, j);
        if i == j {
            v
        } else {
            v * scale
        }
    })?;
    Ok((before, variance_proxy_hadamard(&probed)))
}

/// `M_ij = τ_s,ij · S̄²` with `S̄` the mean masked hidden energy.
pub fn energy_weighted_similarity(bundle: &SimilarityBundle) -> SymMatrix {
    bundle.tau_s.scaled(bundle.masked_energy_bar * bundle.masked_energy_bar)
}

/// Masking rule applied to raw hidden vectors before normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskScheme {
    Sp,
    TopK(usize),
    /// A uniformly random `k`-subset per sample, independent of the values.
    UniformK(usize),
}

#[derive(Debug, Clone)]
pub struct EnergyWeighted {
    /// `Σ_r ŝ_{i,r}² ŝ_{j,r}²` for the masked, normalized vectors.
    pub tau_s: SymMatrix,
    /// `S_i = (1/m) Σ_r y_{i,r}² M_{i,r}`.
    pub energy: Vec<f64>,
    pub s_bar: f64,
    /// `τ_s S̄²`.
    pub weighted: SymMatrix,
}

impl EnergyWeighted {
    pub fn mean_offdiag_tau(&self) -> f64 {
        mean_offdiag(&self.tau_s)
    }

    pub fn mean_offdiag_weighted(&self) -> f64 {
        mean_offdiag(&self.weighted)
    }
}

fn mean_offdiag(a: &SymMatrix) -> f64 {
    let n = a.n();
    if n < 2 {
        return 0.0;
    }
    offdiag_sum(n, |i, j| a.get(i, j)) / (n * (n - 1)) as f64
}

/// Hidden similarity and masked energy of raw hidden vectors `y_i` under a
/// masking scheme. `rng` is only drawn from for [`MaskScheme::UniformK`].
pub fn energy_weighted_from_hidden(
    ys: &[Vec<f64>],
    scheme: MaskScheme,
    rng: &mut Rng,
) -> Result<EnergyWeighted> {
    let n = ys.len();
    if n == 0 {
        return Err(NtkError::invalid("need at least one hidden vector"));
    }
    let m = ys[0].len();
    if m == 0 || ys.iter().any(|y| y.len() != m) {
        return Err(NtkError::invalid("hidden vectors must share a nonzero length"));
    }
    let mut normalized = Vec::with_capacity(n);
    let mut energy = Vec::with_capacity(n);
    for (i, y) in ys.iter().enumerate() {
        let mask = match scheme {
            MaskScheme::Sp => vec![true; m],
            MaskScheme::TopK(k) => topk_mask(y, k)?,
            MaskScheme::UniformK(k) => {
                let mut mask = vec![false; m];
                for r in uniform_k_mask(rng, m, k)? {
                    mask[r] = true;
                }
                mask
            }
        };
        let masked: Vec<f64> = y
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v } else { 0.0 })
            .collect();
        energy.push(masked.iter().map(|v| v * v).sum::<f64>() / m as f64);
        normalized.push(sp_normalize(&masked).map_err(|e| e.at_sample(i))?);
    }
    let sq = squared(&normalized);
    let zz = sq.dot(&sq.t());
    let tau_s = SymMatrix::new(zz)?;
    let s_bar = energy.iter().sum::<f64>() / n as f64;
    let weighted = tau_s.scaled(s_bar * s_bar);
    Ok(EnergyWeighted {
        tau_s,
        energy,
        s_bar,
        weighted,
    })
}
