//! Training dynamics: the frozen-kernel linear system and full-batch gradient
//! descent on finite-width networks.
//!
//! With loss `Φ = ½‖y − u‖²` and kernel `H`, the frozen-kernel error
//! `e = u − y` evolves as `ė = −H e` under gradient flow and as
//! `e(k+1) = (I − ηH) e(k)` under gradient descent.

use rayon::prelude::*;

use crate::encoding::EncodedDataset;
use crate::error::{NtkError, Result};
use crate::linalg::{norm_sq, operator_norm, sym_eigendecompose, Matrix, SpectralDecomposition, SymMatrix};
use crate::models::{HiddenState, MultiLayerModel, ParamScope, TwoLayerModel};
use crate::ntk::{assemble_ntk, jacobian_gram, NtkGram};
use crate::signals::psnr;

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

/// Relative slack allowed when checking `η ≤ 1/‖H‖₂`.
const ETA_SLACK: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct FrozenKernelSystem {
    h0: NtkGram,
    decomposition: SpectralDecomposition,
    u0: Vec<f64>,
    y: Vec<f64>,
    eta: f64,
}

impl FrozenKernelSystem {
    /// Requires `0 < η ≤ 1/‖H₀‖₂`.
    pub fn new(h0: NtkGram, u0: Vec<f64>, y: Vec<f64>, eta: f64) -> Result<Self> {
        let sys = Self::unchecked(h0, u0, y, eta)?;
        let lmax = sys.decomposition.lambda_max().abs().max(sys.decomposition.lambda_min().abs());
        if !(eta > 0.0) || eta * lmax > 1.0 + ETA_SLACK {
            return Err(NtkError::invalid(format!(
                "step size {eta} outside (0, 1/‖H‖₂] with ‖H‖₂ = {lmax}"
            )));
        }
        Ok(sys)
    }

    /// Accepts any `η ≥ 0`.
    pub fn unchecked(h0: NtkGram, u0: Vec<f64>, y: Vec<f64>, eta: f64) -> Result<Self> {
        let n = h0.n();
        if u0.len() != n || y.len() != n {
            return Err(NtkError::invalid(format!(
                "kernel is {n}×{n} but u(0) has {} entries and y has {}",
                u0.len(),
                y.len()
            )));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(NtkError::invalid(format!("step size {eta} must be finite and nonnegative")));
        }
        let decomposition = sym_eigendecompose(&h0.matrix)?;
        Ok(FrozenKernelSystem {
            h0,
            decomposition,
            u0,
            y,
            eta,
        })
    }

    pub fn h0(&self) -> &NtkGram {
        &self.h0
    }

    pub fn decomposition(&self) -> &SpectralDecomposition {
        &self.decomposition
    }

    pub fn u0(&self) -> &[f64] {
        &self.u0
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `e(0) = u(0) − y`.
    pub fn initial_error(&self) -> Vec<f64> {
        self.u0.iter().zip(&self.y).map(|(u, y)| u - y).collect()
    }

    /// One gradient-descent step of the frozen system, `u ← u − ηH(u − y)`.
    pub fn step(&self, u: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = u.iter().zip(&self.y).map(|(u, y)| u - y).collect();
        let he = self.h0.matrix.matvec(&e);
        u.iter().zip(&he).map(|(u, d)| u - self.eta * d).collect()
    }
}

/// `u(t) − y = Σ_i e^{−λ_i t} (v_iᵀ e(0)) v_i`.
pub fn flow_error(system: &FrozenKernelSystem, t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(NtkError::invalid(format!("time {t} must be nonnegative")));
    }
    if t == 0.0 {
        return Ok(system.initial_error());
    }
    Ok(system
        .decomposition
        .apply_fn(&system.initial_error(), |lambda| (-lambda * t).exp()))
}

/// `e(k) = Σ_i (1 − ηλ_i)^k (v_iᵀ e(0)) v_i`.
pub fn gd_spectral_error(system: &FrozenKernelSystem, k: u32) -> Vec<f64> {
    if k == 0 {
        return system.initial_error();
    }
    let eta = system.eta;
    system
        .decomposition
        .apply_fn(&system.initial_error(), |lambda| (1.0 - eta * lambda).powi(k as i32))
}

/// `e(k)` by running `e ← (I − ηH₀) e` for `k` steps.
pub fn gd_recursion_error(system: &FrozenKernelSystem, k: u32) -> Vec<f64> {
    let mut e = system.initial_error();
    for _ in 0..k {
        let he = system.h0.matrix.matvec(&e);
        e.iter_mut().zip(&he).for_each(|(v, d)| *v -= system.eta * d);
    }
    e
}

/// `(1 − η λ_min(H₀))^k ‖e(0)‖²`.
pub fn gd_linear_rate_bound(system: &FrozenKernelSystem, k: u32) -> Result<f64> {
    let lmin = system.decomposition.lambda_min();
    if !(lmin > 0.0) {
        return Err(NtkError::DegenerateKernel(format!("λ_min(H₀) = {lmin:e} is not positive")));
    }
    let rate = (1.0 - system.eta * lmin).max(0.0);
    let e0 = norm_sq(&system.initial_error());
    Ok(if k == 0 { e0 } else { rate.powi(k as i32) * e0 })
}

/// A network trained by [`train_finite_width`]: two-layer models update their
/// first-layer weights, multi-layer models every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainableModel {
    TwoLayer(TwoLayerModel),
    MultiLayer(MultiLayerModel),
}

impl TrainableModel {
    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        match self {
            TrainableModel::TwoLayer(model) => {
                let states = model.hidden_states(inputs)?;
                Ok(states.iter().map(|h| model.output_from_state(h)).collect())
            }
            TrainableModel::MultiLayer(model) => (0..inputs.nrows())
                .into_par_iter()
                .map(|i| model.forward(&inputs.row(i).to_vec()).map_err(|e| e.at_sample(i)))
                .collect(),
        }
    }

    /// Tangent kernel over the trained parameters.
    pub fn kernel(&self, data: &EncodedDataset) -> Result<NtkGram> {
        match self {
            TrainableModel::TwoLayer(model) => assemble_ntk(model, data),
            TrainableModel::MultiLayer(model) => jacobian_gram(model, data, ParamScope::All),
        }
    }

    pub fn first_layer_weights(&self) -> &Matrix {
        match self {
            TrainableModel::TwoLayer(model) => model.weights(),
            TrainableModel::MultiLayer(model) => model.first_layer_weights(),
        }
    }

    /// Predictions together with the two-layer hidden states they came from.
    fn evaluate(&self, inputs: &Matrix) -> Result<(Vec<f64>, Option<Vec<HiddenState>>)> {
        match self {
            TrainableModel::TwoLayer(model) => {
                let states = model.hidden_states(inputs)?;
                let u = states.iter().map(|h| model.output_from_state(h)).collect();
                Ok((u, Some(states)))
            }
            TrainableModel::MultiLayer(_) => Ok((self.predict(inputs)?, None)),
        }
    }

    /// One full-batch gradient step on `½‖u − y‖²` given residuals `u − y`.
    /// `states` are the two-layer hidden states at the current weights.
    fn descend(
        &mut self,
        data: &EncodedDataset,
        residual: &[f64],
        eta: f64,
        states: Option<Vec<HiddenState>>,
    ) -> Result<()> {
        match self {
            TrainableModel::TwoLayer(model) => {
                let states = match states {
                    Some(s) => s,
                    None => model.hidden_states(&data.inputs)?,
                };
                let m = model.width();
                let n = data.n();
                let mut weighted = Matrix::zeros((n, m));
                for (i, h) in states.iter().enumerate() {
                    let q = model.sensitivities_from_state(h);
                    for (r, qr) in q.into_iter().enumerate() {
                        weighted[[i, r]] = qr * residual[i];
                    }
                }
                let grad = weighted.t().dot(&data.inputs);
                let w = model.weights() - &(grad * eta);
                model.set_weights(w)
            }
            TrainableModel::MultiLayer(model) => {
                let grads: Vec<Vec<f64>> = (0..data.n())
                    .into_par_iter()
                    .map(|i| {
                        model
                            .gradient(data.input(i), residual[i])
                            .map(|g| g.flatten())
                            .map_err(|e| e.at_sample(i))
                    })
                    .collect::<Result<_>>()?;
                let mut total = vec![0.0; model.param_count()];
                for g in &grads {
                    total.iter_mut().zip(g).for_each(|(t, v)| *t += v);
                }
                model.apply_step(&total, eta)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    /// `½‖y − u‖²`.
    pub loss: f64,
    pub psnr: f64,
    /// `‖u_net(k) − u_ker(k)‖₂` against the frozen-kernel run from the same `u(0)`.
    pub eps_k: f64,
    /// Same residual against the frozen-kernel run started from `u(0) = 0`.
    pub eps_zero_init: f64,
    /// `‖H(k) − H₀‖₂`, only on recorded steps.
    pub h_drift: Option<f64>,
    /// `max_r ‖w_r(k) − w_r(0)‖₂` over first-layer rows, only on recorded steps.
    pub max_w_drift: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainTrace {
    pub records: Vec<TrainRecord>,
    /// Stability diagnostics: step sizes above `1/‖H(k)‖₂` and loss increases
    /// between recorded steps.
    pub warnings: Vec<String>,
    pub h0: NtkGram,
    pub final_predictions: Vec<f64>,
    pub model: TrainableModel,
}

impl TrainTrace {
    pub fn final_record(&self) -> &TrainRecord {
        self.records.last().expect("trace has at least the initial record")
    }

    pub fn sup_eps(&self) -> f64 {
        self.records.iter().map(|r| r.eps_k).fold(0.0, f64::max)
    }

    pub fn sup_h_drift(&self) -> f64 {
        self.records.iter().filter_map(|r| r.h_drift).fold(0.0, f64::max)
    }
}

fn max_row_drift(w: &Matrix, w0: &Matrix) -> f64 {
    w.rows()
        .into_iter()
        .zip(w0.rows())
        .map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Full-batch gradient descent for `steps` steps with step size `eta`.
///
/// Loss, PSNR and both residuals are recorded every step; the kernel drift,
/// weight drift and step-size check run at step 0, every `record_every` steps
/// and at the last step.
pub fn train_finite_width(
    model: &TrainableModel,
    data: &EncodedDataset,
    eta: f64,
    steps: usize,
    record_every: usize,
) -> Result<TrainTrace> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(NtkError::invalid(format!("step size {eta} must be finite and nonnegative")));
    }
    if record_every == 0 {
        return Err(NtkError::invalid("record_every must be at least 1"));
    }
    let mut model = model.clone();
    let y = data.targets.clone();
    let w0 = model.first_layer_weights().clone();
    let h0 = model.kernel(data)?;
    let (u0, mut states) = model.evaluate(&data.inputs)?;
    let frozen = FrozenKernelSystem::unchecked(h0.clone(), u0.clone(), y.clone(), eta)?;
    let frozen_zero = FrozenKernelSystem::unchecked(h0.clone(), vec![0.0; y.len()], y.clone(), eta)?;

    let mut u = u0.clone();
    let mut u_ker = u0;
    let mut u_zero = vec![0.0; y.len()];
    let mut records = Vec::with_capacity(steps + 1);
    let mut warnings = Vec::new();
    let mut last_recorded_loss: Option<f64> = None;

    for k in 0..=steps {
        let residual: Vec<f64> = u.iter().zip(&y).map(|(u, y)| u - y).collect();
        let loss = 0.5 * norm_sq(&residual);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(NtkError::DivergenceDetected { step: k, loss });
        }
        let is_record = k % record_every == 0 || k == steps;
        let (h_drift, max_w_drift) = if is_record {
            let hk = if k == 0 { h0.clone() } else { model.kernel(data)? };
            let drift = operator_norm(&hk.matrix.sub(&h0.matrix)?)?;
            let hk_norm = operator_norm(&hk.matrix)?;
            if eta * hk_norm > 1.0 + ETA_SLACK {
                warnings.push(format!(
                    "step {k}: step size {eta:.6e} exceeds 1/‖H(k)‖₂ = {:.6e}",
                    1.0 / hk_norm
                ));
            }
            if let Some(prev) = last_recorded_loss {
                if loss > prev + 1e-9 {
                    warnings.push(format!("step {k}: loss rose from {prev:.6e} to {loss:.6e}"));
                }
            }
            last_recorded_loss = Some(loss);
            (Some(drift), Some(max_row_drift(model.first_layer_weights(), &w0)))
        } else {
            (None, None)
        };
        records.push(TrainRecord {
            step: k,
            loss,
            psnr: psnr(&u, &y)?,
            eps_k: distance(&u, &u_ker),
            eps_zero_init: distance(&u, &u_zero),
            h_drift,
            max_w_drift,
        });
        if k == steps {
            break;
        }
        if eta > 0.0 {
            model.descend(data, &residual, eta, states.take())?;
            (u, states) = model.evaluate(&data.inputs)?;
        }
        u_ker = frozen.step(&u_ker);
        u_zero = frozen_zero.step(&u_zero);
    }

    Ok(TrainTrace {
        records,
        warnings,
        h0,
        final_predictions: u,
        model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeylReport {
    pub lambda_min_ref: f64,
    /// `‖h0 − h_ref‖₂`.
    pub perturbation: f64,
    pub lambda_min_h0: f64,
    /// `λ_min(h0) ≥ λ_min(h_ref) − ‖h0 − h_ref‖₂`, up to rounding.
    pub weyl_holds: bool,
    /// `‖h0 − h_ref‖₂ ≤ ½ λ_min(h_ref)`, which guarantees `λ_min(h0) ≥ ½ λ_min(h_ref)`.
    pub half_gap_condition: bool,
    pub half_gap_holds: bool,
}

pub fn weyl_gap_check(h0: &NtkGram, h_ref: &NtkGram) -> Result<WeylReport> {
    if h0.n() != h_ref.n() {
        return Err(NtkError::invalid(format!(
            "kernels differ in size: {} and {}",
            h0.n(),
            h_ref.n()
        )));
    }
    let lambda_min_ref = sym_eigendecompose(&h_ref.matrix)?.lambda_min();
    let lambda_min_h0 = sym_eigendecompose(&h0.matrix)?.lambda_min();
    let perturbation = operator_norm(&h0.matrix.sub(&h_ref.matrix)?)?;
    let tol = 1e-12 * h0.matrix.max_abs().max(h_ref.matrix.max_abs()) * h0.n() as f64;
    Ok(WeylReport {
        lambda_min_ref,
        perturbation,
        lambda_min_h0,
        weyl_holds: lambda_min_h0 >= lambda_min_ref - perturbation - tol,
        half_gap_condition: perturbation <= 0.5 * lambda_min_ref,
        half_gap_holds: lambda_min_h0 >= 0.5 * lambda_min_ref - tol,
    })
}

/// Entrywise mean of equally sized kernels.
pub fn mean_kernel(grams: &[NtkGram]) -> Result<NtkGram> {
    let Some(first) = grams.first() else {
        return Err(NtkError::invalid("need at least one kernel to average"));
    };
    let n = first.n();
    let mut acc = Matrix::zeros((n, n));
    for g in grams {
        if g.n() != n {
            return Err(NtkError::invalid("kernels differ in size"));
        }
        acc += g.matrix.as_array();
    }
    acc /= grams.len() as f64;
    Ok(NtkGram {
        matrix: SymMatrix::new(acc)?,
        provenance: first.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, norm, Rng};
    use crate::models::{Activation, Normalization};
    use crate::ntk::Provenance;

    fn gram(m: SymMatrix) -> NtkGram {
        NtkGram {
            matrix: m,
            provenance: Provenance::JacobianGram,
        }
    }

    fn random_psd(rng: &mut Rng, n: usize) -> SymMatrix {
        let b = gaussian_matrix(rng, n, n + 2, 1.0).unwrap();
        SymMatrix::new(b.dot(&b.t()) / n as f64).unwrap()
    }

    #[test]
    fn flow_at_zero_is_initial_error() {
        let mut rng = Rng::new(1);
        let h = random_psd(&mut rng, 5);
        let sys = FrozenKernelSystem::unchecked(gram(h), vec![1.0; 5], vec![0.5; 5], 0.0).unwrap();
        assert_eq!(flow_error(&sys, 0.0).unwrap(), vec![0.5; 5]);
        assert!(flow_error(&sys, -1.0).is_err());
    }

    #[test]
    fn scalar_mode_decay() {
        let h = SymMatrix::identity(3).unwrap().scaled(2.0);
        let sys = FrozenKernelSystem::new(gram(h), vec![1.0, 2.0, 3.0], vec![0.0; 3], 0.5).unwrap();
        let e = flow_error(&sys, 0.7).unwrap();
        let expected = (-1.4f64).exp() * norm(&[1.0, 2.0, 3.0]);
        assert!((norm(&e) - expected).abs() <= 1e-12);
        assert_eq!(gd_linear_rate_bound(&sys, 1).unwrap(), 0.0);
    }

    #[test]
    fn spectral_matches_recursion() {
        let mut rng = Rng::new(2);
        let h = random_psd(&mut rng, 8);
        let eta = 1.0 / operator_norm(&h).unwrap();
        let u0: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let sys = FrozenKernelSystem::new(gram(h), u0, y, eta).unwrap();
        for k in [0, 1, 7, 100] {
            let a = gd_spectral_error(&sys, k);
            let b = gd_recursion_error(&sys, k);
            assert!(distance(&a, &b) <= 1e-10 * norm(&sys.initial_error()).max(1.0));
        }
    }

    #[test]
    fn checked_constructor_rejects_large_step() {
        let h = SymMatrix::diag(&[1.0, 4.0]).unwrap();
        assert!(FrozenKernelSystem::new(gram(h.clone()), vec![0.0; 2], vec![1.0; 2], 0.3).is_err());
        assert!(FrozenKernelSystem::new(gram(h.clone()), vec![0.0; 2], vec![1.0; 2], 0.0).is_err());
        assert!(FrozenKernelSystem::new(gram(h), vec![0.0; 2], vec![1.0; 2], 0.25).is_ok());
    }

    #[test]
    fn rate_bound_needs_positive_gap() {
        let h = SymMatrix::diag(&[1.0, 0.0]).unwrap();
        let sys = FrozenKernelSystem::new(gram(h), vec![0.0; 2], vec![1.0; 2], 0.5).unwrap();
        assert!(matches!(gd_linear_rate_bound(&sys, 3), Err(NtkError::DegenerateKernel(_))));
    }

    fn small_data(rng: &mut Rng, n: usize, d: usize) -> EncodedDataset {
        let x = gaussian_matrix(rng, n, d, 1.0).unwrap();
        let y = (0..n).map(|_| rng.uniform()).collect();
        EncodedDataset::new(vec![[0.0; 2]; n], x, y).unwrap()
    }

    #[test]
    fn zero_step_size_keeps_everything_fixed() {
        let mut rng = Rng::new(3);
        let data = small_data(&mut rng, 6, 3);
        let model = TwoLayerModel::hadamard(&mut rng, 32, 3, 1.0, 1.0, Normalization::Sp, true).unwrap();
        let trace = train_finite_width(&TrainableModel::TwoLayer(model), &data, 0.0, 5, 2).unwrap();
        let first = trace.records[0].loss;
        for r in &trace.records {
            assert_eq!(r.loss, first);
            assert_eq!(r.eps_k, 0.0);
            if let Some(d) = r.h_drift {
                assert_eq!(d, 0.0);
            }
        }
        assert_eq!(trace.records.len(), 6);
    }

    #[test]
    fn linear_network_follows_frozen_kernel() {
        let mut rng = Rng::new(4);
        let data = small_data(&mut rng, 6, 3);
        let model = TwoLayerModel::baseline(&mut rng, 16, 3, 1.0, 1.0)
            .unwrap()
            .with_activation(Activation::Identity)
            .unwrap();
        let model = TrainableModel::TwoLayer(model);
        let eta = 0.5 / operator_norm(&model.kernel(&data).unwrap().matrix).unwrap();
        let trace = train_finite_width(&model, &data, eta, 50, 10).unwrap();
        for r in &trace.records {
            assert!(r.eps_k <= 1e-12, "step {} eps {}", r.step, r.eps_k);
            assert!(r.h_drift.is_none_or(|d| d <= 1e-12));
        }
        assert!(trace.final_record().loss < trace.records[0].loss);
        assert!(trace.warnings.is_empty());
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = Rng::new(5);
        let data = small_data(&mut rng, 4, 2);
        let model = TwoLayerModel::baseline(&mut rng, 8, 2, 1.0, 1.0)
            .unwrap()
            .with_activation(Activation::Identity)
            .unwrap();
        let model = TrainableModel::TwoLayer(model);
        let eta = 10.0 / operator_norm(&model.kernel(&data).unwrap().matrix).unwrap();
        let err = train_finite_width(&model, &data, eta, 500, 100).unwrap_err();
        assert!(matches!(err, NtkError::DivergenceDetected { .. }));
    }

    #[test]
    fn weyl_shift_case() {
        let mut rng = Rng::new(6);
        let h = random_psd(&mut rng, 5);
        let shifted = h.shifted(0.1);
        let r = weyl_gap_check(&gram(shifted), &gram(h.clone())).unwrap();
        assert!((r.lambda_min_h0 - r.lambda_min_ref - 0.1).abs() <= 1e-10);
        assert!((r.perturbation - 0.1).abs() <= 1e-10);
        assert!(r.weyl_holds);
        let same = weyl_gap_check(&gram(h.clone()), &gram(h)).unwrap();
        assert_eq!(same.perturbation, 0.0);
        assert!(same.weyl_holds && same.half_gap_holds);
    }
}
