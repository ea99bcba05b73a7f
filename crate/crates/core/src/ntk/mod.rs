//! Tangent-kernel Gram matrices and their eigenvalue statistics.
//!
//! For a two-layer model only the first-layer weights are trainable, so every
//! kernel here has the form `H_ij = ρ_ij Σ_r q_r(x̃_i) q_r(x̃_j)` with `q_r` the
//! derivative of the output with respect to the preactivation of neuron `r`.

mod similarity;
mod stats;

use rayon::prelude::*;

use crate::encoding::EncodedDataset;
use crate::error::{NtkError, Result};
use crate::linalg::{Matrix, SymMatrix};
use crate::models::{HiddenState, Mode, MultiLayerGradient, MultiLayerModel, TwoLayerModel};

pub use crate::models::ParamScope;
pub use similarity::{
    energy_weighted_from_hidden, energy_weighted_similarity, monotonicity_probe, similarity_bundle,
    similarity_bundle_from_states, variance_proxy_baseline, variance_proxy_hadamard, EnergyWeighted,
    MaskScheme, SimilarityBundle, TauFamily,
};
pub use stats::{
    mean_identity_value, second_moment_identity_value, spectral_stats,
    spectral_stats_from_decomposition, verify_mean_identity,
    verify_second_moment_identity, IdentityReport, SpectralStats,
};

/// Largest sample count accepted by [`jacobian_gram`].
pub const MAX_JACOBIAN_SAMPLES: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    AnalyticBaseline,
    AnalyticHadamard,
    /// `(a²/m) ρ_ij ⟨t_i, t_j⟩`: the normalized kernel without the cross-neuron
    /// coupling through the hidden energy.
    LeadingOrderHadamard,
    JacobianGram,
}

#[derive(Debug, Clone)]
pub struct NtkGram {
    pub matrix: SymMatrix,
    pub provenance: Provenance,
}

impl NtkGram {
    pub fn n(&self) -> usize {
        self.matrix.n()
    }
}

fn check_dims(model: &TwoLayerModel, data: &EncodedDataset) -> Result<()> {
    if model.input_dim() != data.dim() {
        return Err(NtkError::invalid(format!(
            "model expects inputs of dimension {}, data has {}",
            model.input_dim(),
            data.dim()
        )));
    }
    Ok(())
}

/// `ρ ⊙ (F Fᵀ)` for per-sample feature rows `F`, scaled by `scale`.
fn masked_gram(rho: &SymMatrix, features: &Matrix, scale: f64) -> Result<SymMatrix> {
    let g = features.dot(&features.t());
    let h = &g * rho.as_array() * scale;
    SymMatrix::new(h)
}

fn rows_to_matrix(rows: Vec<Vec<f64>>) -> Matrix {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    Matrix::from_shape_fn((n, m), |(i, r)| rows[i][r])
}

/// `H_ij = (a²/m) ρ_ij ⟨s_i, s_j⟩` with `s` the gate vectors.
pub fn assemble_baseline_ntk(model: &TwoLayerModel, data: &EncodedDataset) -> Result<NtkGram> {
    if model.mode() != Mode::Baseline {
        return Err(NtkError::invalid("baseline kernel needs a baseline-mode model"));
    }
    check_dims(model, data)?;
    let states = model.hidden_states(&data.inputs)?;
    let gates = rows_to_matrix(states.into_iter().map(|h| h.s).collect());
    let a = model.a_scale();
    let matrix = masked_gram(&data.rho, &gates, a * a / model.width() as f64)?;
    Ok(NtkGram {
        matrix,
        provenance: Provenance::AnalyticBaseline,
    })
}

/// Exact first-layer kernel of a Hadamard model, `H_ij = ρ_ij ⟨q_i, q_j⟩`.
pub fn assemble_hadamard_ntk(model: &TwoLayerModel, data: &EncodedDataset) -> Result<NtkGram> {
    if model.mode() != Mode::Hadamard {
        return Err(NtkError::invalid("hadamard kernel needs a hadamard-mode model"));
    }
    check_dims(model, data)?;
    let states = model.hidden_states(&data.inputs)?;
    let matrix = kernel_from_states(model, &states, &data.rho)?;
    Ok(NtkGram {
        matrix,
        provenance: Provenance::AnalyticHadamard,
    })
}

/// `H_ij = (a²/m) ρ_ij ⟨t_i, t_j⟩` for any mode. Equals the exact kernel for
/// baseline and unnormalized models.
pub fn assemble_leading_order_ntk(model: &TwoLayerModel, data: &EncodedDataset) -> Result<NtkGram> {
    check_dims(model, data)?;
    let states = model.hidden_states(&data.inputs)?;
    let t = rows_to_matrix(states.into_iter().map(|h| h.t).collect());
    let a = model.a_scale();
    let matrix = masked_gram(&data.rho, &t, a * a / model.width() as f64)?;
    Ok(NtkGram {
        matrix,
        provenance: Provenance::LeadingOrderHadamard,
    })
}

/// Exact first-layer kernel for either mode.
pub fn assemble_ntk(model: &TwoLayerModel, data: &EncodedDataset) -> Result<NtkGram> {
    match model.mode() {
        Mode::Baseline => assemble_baseline_ntk(model, data),
        Mode::Hadamard => assemble_hadamard_ntk(model, data),
    }
}

/// Exact kernel from precomputed hidden states.
pub(crate) fn kernel_from_states(
    model: &TwoLayerModel,
    states: &[HiddenState],
    rho: &SymMatrix,
) -> Result<SymMatrix> {
    let q = rows_to_matrix(
        states
            .par_iter()
            .map(|h| model.sensitivities_from_state(h))
            .collect(),
    );
    masked_gram(rho, &q, 1.0)
}

/// Gram matrix of per-sample parameter gradients obtained by backpropagation.
pub fn jacobian_gram(model: &MultiLayerModel, data: &EncodedDataset, scope: ParamScope) -> Result<NtkGram> {
    let n = data.n();
    if n > MAX_JACOBIAN_SAMPLES {
        return Err(NtkError::invalid(format!(
            "{n} samples exceed the Jacobian Gram limit of {MAX_JACOBIAN_SAMPLES}"
        )));
    }
    if model.input_dim() != data.dim() {
        return Err(NtkError::invalid("model and data dimensions differ"));
    }
    let grads: Vec<MultiLayerGradient> = (0..n)
        .into_par_iter()
        .map(|i| model.gradient(data.input(i), 1.0).map_err(|e| e.at_sample(i)))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| grads[i].inner(&grads[j], scope)).collect())
        .collect();
    let matrix = SymMatrix::new(rows_to_matrix(rows))?;
    Ok(NtkGram {
        matrix,
        provenance: Provenance::JacobianGram,
    })
}
