use super::similarity::{similarity_bundle_from_states, SimilarityBundle};
use super::{assemble_leading_order_ntk, NtkGram};
use crate::encoding::EncodedDataset;
use crate::error::Result;
use crate::linalg::{sym_eigendecompose, SpectralDecomposition, SymMatrix};
use crate::models::TwoLayerModel;

#[derive(Debug, Clone)]
pub struct SpectralStats {
    /// `Tr(H)/n`.
    pub mu_lambda: f64,
    /// `Tr(H²)/n = Σ_ij H_ij² / n`.
    pub second_moment: f64,
    /// `second_moment − mu_lambda²`.
    pub v_lambda: f64,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Variance of the diagonal entries `H_ii` across samples.
    pub diag_var: f64,
}

pub fn spectral_stats(h: &NtkGram) -> Result<SpectralStats> {
    let decomposition = sym_eigendecompose(&h.matrix)?;
    Ok(spectral_stats_from_decomposition(&h.matrix, &decomposition))
}

pub fn spectral_stats_from_decomposition(h: &SymMatrix, decomposition: &SpectralDecomposition) -> SpectralStats {
    let n = h.n() as f64;
    let mu_lambda = h.trace() / n;
    let second_moment = h.frobenius_sq() / n;
    let diag: Vec<f64> = (0..h.n()).map(|i| h.get(i, i)).collect();
    let diag_var = diag.iter().map(|v| (v - mu_lambda).powi(2)).sum::<f64>() / n;
    SpectralStats {
        mu_lambda,
        second_moment,
        v_lambda: second_moment - mu_lambda * mu_lambda,
        eigenvalues: decomposition.eigenvalues.clone(),
        diag_var,
    }
}

/// Factorized expression (`lhs`) against the direct kernel moment (`rhs`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
}

impl IdentityReport {
    fn new(lhs: f64, rhs: f64) -> Self {
        let scale = lhs.abs().max(rhs.abs());
        let rel_err = if scale > 0.0 { (lhs - rhs).abs() / scale } else { 0.0 };
        IdentityReport { lhs, rhs, rel_err }
    }
}

fn bundle_and_kernel(model: &TwoLayerModel, data: &EncodedDataset) -> Result<(SimilarityBundle, NtkGram)> {
    let h = assemble_leading_order_ntk(model, data)?;
    let states = model.hidden_states(&data.inputs)?;
    let bundle = similarity_bundle_from_states(&states, &data.rho, model.a_scale())?;
    Ok((bundle, h))
}

/// `(a²/(nm)) Σ_i ρ_ii ‖s_i‖² ‖p_i‖² √(τ_s,ii τ_p,ii) κ_ii`.
pub fn mean_identity_value(b: &SimilarityBundle) -> f64 {
    let n = b.n();
    let sum: f64 = (0..n)
        .map(|i| {
            b.rho_diag[i]
                * b.s_norm_sq[i]
                * b.p_norm_sq[i]
                * (b.tau_s.get(i, i) * b.tau_p.get(i, i)).sqrt()
                * b.kappa_align.get(i, i)
        })
        .sum();
    b.a_scale * b.a_scale * sum / (n as f64 * b.width as f64)
}

/// `(a⁴/(nm²)) Σ_ij (ρ_ii ρ_jj τ_x)(‖s_i‖²‖s_j‖² τ_s)(‖p_i‖²‖p_j‖² τ_p) τ_q`.
pub fn second_moment_identity_value(b: &SimilarityBundle) -> f64 {
    let n = b.n();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            sum += b.rho_diag[i] * b.rho_diag[j] * b.tau_x.get(i, j)
                * b.s_norm_sq[i] * b.s_norm_sq[j] * b.tau_s.get(i, j)
                * b.p_norm_sq[i] * b.p_norm_sq[j] * b.tau_p.get(i, j)
                * b.tau_q.get(i, j);
        }
    }
    let m = b.width as f64;
    b.a_scale.powi(4) * sum / (n as f64 * m * m)
}

/// Checks the factorized mean eigenvalue against `Tr(H)/n` of the kernel
/// `(a²/m) ρ ⊙ ⟨t_i, t_j⟩`.
pub fn verify_mean_identity(model: &TwoLayerModel, data: &EncodedDataset) -> Result<IdentityReport> {
    let (bundle, h) = bundle_and_kernel(model, data)?;
    let rhs = h.matrix.trace() / h.n() as f64;
    Ok(IdentityReport::new(mean_identity_value(&bundle), rhs))
}

/// Checks the four-factor second moment against `Σ H_ij² / n` of the kernel
/// `(a²/m) ρ ⊙ ⟨t_i, t_j⟩`.
pub fn verify_second_moment_identity(model: &TwoLayerModel, data: &EncodedDataset) -> Result<IdentityReport> {
    let (bundle, h) = bundle_and_kernel(model, data)?;
    let rhs = h.matrix.frobenius_sq() / h.n() as f64;
    Ok(IdentityReport::new(second_moment_identity_value(&bundle), rhs))
}
