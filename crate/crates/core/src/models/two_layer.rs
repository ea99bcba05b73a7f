use ndarray::Array2;
use rayon::prelude::*;

use super::normalize::{topk_mask, MIN_ENERGY};
use super::{Activation, Mode, ModulationMap, Normalization};
use crate::error::{NtkError, Result};
use crate::linalg::{gaussian_matrix, Matrix, Rng};

/// Two-layer coordinate network; only the first-layer weights are trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerModel {
    weights: Matrix,
    signs: Vec<f64>,
    a_scale: f64,
    init_std: f64,
    mode: Mode,
    normalization: Normalization,
    activation: Activation,
    modulation: Option<ModulationMap>,
}

/// Per-sample hidden quantities of a [`TwoLayerModel`].
///
/// `s` is the gate vector `𝕀` for plain networks and the gradient feature
/// `M ⊙ 𝕀 ⊙ β / √S` for normalized ones (`M` the selection mask); `t = s ⊙ p`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub preacts: Vec<f64>,
    pub activations: Vec<f64>,
    pub gates: Vec<f64>,
    pub mask: Vec<bool>,
    pub energy: f64,
    pub betas: Vec<f64>,
    pub s: Vec<f64>,
    pub p: Vec<f64>,
    pub t: Vec<f64>,
}

impl HiddenState {
    /// Number of open gates.
    pub fn active_count(&self) -> usize {
        self.gates.iter().filter(|&&g| g > 0.0).count()
    }
}

impl TwoLayerModel {
    /// Plain ReLU network with `W ~ N(0, κ²)` and random readout signs.
    pub fn baseline(rng: &mut Rng, m: usize, d: usize, a_scale: f64, init_std: f64) -> Result<Self> {
        let weights = gaussian_matrix(rng, m, d, init_std)?;
        let signs = (0..m).map(|_| rng.sign()).collect();
        Self::from_parts(
            weights,
            signs,
            a_scale,
            init_std,
            Mode::Baseline,
            Normalization::None,
            Activation::Relu,
            None,
        )
    }

    /// Hadamard network. With `modulated = false` the modulation is `p ≡ 1`;
    /// otherwise a frozen random tanh map with unit-variance parameters.
    pub fn hadamard(
        rng: &mut Rng,
        m: usize,
        d: usize,
        a_scale: f64,
        init_std: f64,
        normalization: Normalization,
        modulated: bool,
    ) -> Result<Self> {
        let weights = gaussian_matrix(rng, m, d, init_std)?;
        let signs = (0..m).map(|_| rng.sign()).collect();
        let modulation = if modulated {
            Some(ModulationMap::random(rng, m, d, 1.0)?)
        } else {
            None
        };
        Self::from_parts(
            weights,
            signs,
            a_scale,
            init_std,
            Mode::Hadamard,
            normalization,
            Activation::Relu,
            modulation,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        weights: Matrix,
        signs: Vec<f64>,
        a_scale: f64,
        init_std: f64,
        mode: Mode,
        normalization: Normalization,
        activation: Activation,
        modulation: Option<ModulationMap>,
    ) -> Result<Self> {
        let (m, d) = weights.dim();
        if m == 0 || d == 0 {
            return Err(NtkError::invalid("width and input dimension must be at least 1"));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(NtkError::invalid("weights must be finite"));
        }
        if signs.len() != m || signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(NtkError::invalid("need one readout sign of ±1 per neuron"));
        }
        if !(a_scale > 0.0) || !a_scale.is_finite() {
            return Err(NtkError::invalid(format!("readout scale must be > 0, got {a_scale}")));
        }
        if mode == Mode::Baseline && (!normalization.is_none() || modulation.is_some()) {
            return Err(NtkError::invalid(
                "baseline mode takes neither normalization nor modulation",
            ));
        }
        if mode == Mode::Hadamard && activation != Activation::Relu {
            return Err(NtkError::invalid("the identity activation is only available in baseline mode"));
        }
        if let Normalization::TopK(k) = normalization {
            if k == 0 || k > m {
                return Err(NtkError::invalid(format!("k = {k} outside 1..={m}")));
            }
        }
        if let Some(map) = &modulation {
            if map.width() != m || map.input_dim() != d {
                return Err(NtkError::invalid(format!(
                    "modulation is {}x{}, model is {m}x{d}",
                    map.width(),
                    map.input_dim()
                )));
            }
        }
        Ok(TwoLayerModel {
            weights,
            signs,
            a_scale,
            init_std,
            mode,
            normalization,
            activation,
            modulation,
        })
    }

    /// Switches the activation (identity is a baseline-only diagnostic).
    pub fn with_activation(self, activation: Activation) -> Result<Self> {
        let TwoLayerModel {
            weights,
            signs,
            a_scale,
            init_std,
            mode,
            normalization,
            modulation,
            ..
        } = self;
        Self::from_parts(weights, signs, a_scale, init_std, mode, normalization, activation, modulation)
    }

    /// Same network with readout scale `a` replaced.
    pub fn with_a_scale(mut self, a_scale: f64) -> Result<Self> {
        if !(a_scale > 0.0) || !a_scale.is_finite() {
            return Err(NtkError::invalid(format!("readout scale must be > 0, got {a_scale}")));
        }
        self.a_scale = a_scale;
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Matrix) -> Result<()> {
        if weights.dim() != self.weights.dim() {
            return Err(NtkError::invalid("weight shape mismatch"));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(NtkError::invalid("weights must be finite"));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn a_scale(&self) -> f64 {
        self.a_scale
    }

    /// `a_r = a · sign_r`.
    pub fn readout(&self, r: usize) -> f64 {
        self.a_scale * self.signs[r]
    }

    pub fn init_std(&self) -> f64 {
        self.init_std
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn modulation(&self) -> Option<&ModulationMap> {
        self.modulation.as_ref()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(NtkError::invalid(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Modulation vector `p(x̃)`, all ones when the model is unmodulated.
    pub fn modulation_at(&self, x: &[f64]) -> Vec<f64> {
        match &self.modulation {
            Some(map) => map.eval(x),
            None => vec![1.0; self.width()],
        }
    }

    pub fn hidden_state(&self, x: &[f64]) -> Result<HiddenState> {
        self.check_input(x)?;
        let preacts: Vec<f64> = self
            .weights
            .rows()
            .into_iter()
            .map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        self.state_from_preacts(preacts, self.modulation_at(x))
    }

    /// Hidden states of every row of `inputs`, computing preactivations with
    /// one matrix product.
    pub fn hidden_states(&self, inputs: &Matrix) -> Result<Vec<HiddenState>> {
        if inputs.ncols() != self.input_dim() {
            return Err(NtkError::invalid(format!(
                "inputs have dimension {}, model expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        let g = inputs.dot(&self.weights.t());
        let modulation = self.modulation.as_ref().map(|map| {
            let mut z = inputs.dot(&map.weight.t());
            for mut row in z.rows_mut() {
                row.iter_mut().zip(&map.bias).for_each(|(v, b)| *v = (*v + b).tanh());
            }
            z
        });
        (0..inputs.nrows())
            .into_par_iter()
            .map(|i| {
                let p = match &modulation {
                    Some(z) => z.row(i).to_vec(),
                    None => vec![1.0; self.width()],
                };
                self.state_from_preacts(g.row(i).to_vec(), p)
                    .map_err(|e| e.at_sample(i))
            })
            .collect()
    }

    fn state_from_preacts(&self, preacts: Vec<f64>, p: Vec<f64>) -> Result<HiddenState> {
        let m = self.width();
        let act = self.activation;
        let activations: Vec<f64> = preacts.iter().map(|&g| act.apply(g)).collect();
        let gates: Vec<f64> = preacts.iter().map(|&g| act.gate(g)).collect();
        let mask = match self.normalization {
            Normalization::TopK(k) => topk_mask(&activations, k)?,
            _ => vec![true; m],
        };
        let energy: f64 = activations
            .iter()
            .zip(&mask)
            .filter(|(_, &keep)| keep)
            .map(|(v, _)| v * v)
            .sum();

        let (betas, s) = if self.normalization.is_none() {
            (vec![1.0; m], gates.clone())
        } else {
            if !(energy >= MIN_ENERGY) {
                return Err(NtkError::energy(energy));
            }
            let inv_sqrt = 1.0 / energy.sqrt();
            let betas: Vec<f64> = (0..m)
                .map(|r| {
                    if mask[r] {
                        1.0 - activations[r] * activations[r] / energy
                    } else {
                        1.0
                    }
                })
                .collect();
            let s = (0..m)
                .map(|r| {
                    if mask[r] {
                        gates[r] * betas[r] * inv_sqrt
                    } else {
                        0.0
                    }
                })
                .collect();
            (betas, s)
        };
        let t = s.iter().zip(&p).map(|(a, b)| a * b).collect();
        Ok(HiddenState {
            preacts,
            activations,
            gates,
            mask,
            energy,
            betas,
            s,
            p,
            t,
        })
    }

    /// Network output from a precomputed hidden state.
    pub fn output_from_state(&self, h: &HiddenState) -> f64 {
        let m = self.width();
        let scale = match self.normalization {
            Normalization::None => 1.0,
            _ => 1.0 / h.energy.sqrt(),
        };
        let sum: f64 = (0..m)
            .filter(|&r| h.mask[r])
            .map(|r| self.readout(r) * h.p[r] * h.activations[r])
            .sum();
        sum * scale / (m as f64).sqrt()
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(self.output_from_state(&self.hidden_state(x)?))
    }

    pub fn baseline_forward(&self, x: &[f64]) -> Result<f64> {
        self.require(Mode::Baseline)?;
        self.forward(x)
    }

    pub fn hadamard_forward(&self, x: &[f64]) -> Result<f64> {
        self.require(Mode::Hadamard)?;
        self.forward(x)
    }

    fn require(&self, mode: Mode) -> Result<()> {
        if self.mode != mode {
            return Err(NtkError::invalid(format!(
                "operation needs {mode:?} mode, model is {:?}",
                self.mode
            )));
        }
        Ok(())
    }

    /// `q_r = ∂u/∂g_r`, the derivative of the output with respect to each
    /// preactivation. The weight gradient is `q ⊗ x̃`.
    ///
    /// For normalized models this is the full derivative, including the
    /// dependence of `S` on every active neuron:
    /// `q_r = M_r 𝕀_r (c_r − ŝ_r γ) / √(mS)` with `ŝ = σ/√S`, `γ = Σ_K c_ℓ ŝ_ℓ`.
    pub fn sensitivities_from_state(&self, h: &HiddenState) -> Vec<f64> {
        let m = self.width();
        let root_m = (m as f64).sqrt();
        let c: Vec<f64> = (0..m).map(|r| self.readout(r) * h.p[r]).collect();
        match self.normalization {
            Normalization::None => (0..m).map(|r| c[r] * h.gates[r] / root_m).collect(),
            _ => {
                let root_s = h.energy.sqrt();
                let gamma: f64 = (0..m)
                    .filter(|&r| h.mask[r])
                    .map(|r| c[r] * h.activations[r] / root_s)
                    .sum();
                (0..m)
                    .map(|r| {
                        if h.mask[r] {
                            let s_hat = h.activations[r] / root_s;
                            h.gates[r] * (c[r] - s_hat * gamma) / (root_m * root_s)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        }
    }

    /// The diagonal part of [`Self::sensitivities_from_state`]:
    /// `q_r = a_r t_r / √m`, dropping the cross-neuron coupling through `S`.
    /// Identical to the full derivative for unnormalized models.
    pub fn leading_order_sensitivities_from_state(&self, h: &HiddenState) -> Vec<f64> {
        let root_m = (self.width() as f64).sqrt();
        h.t.iter()
            .enumerate()
            .map(|(r, t)| self.readout(r) * t / root_m)
            .collect()
    }

    pub fn sensitivities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.sensitivities_from_state(&self.hidden_state(x)?))
    }

    /// `∂u/∂W` at `x̃`, an `m × d` matrix.
    pub fn gradient(&self, x: &[f64]) -> Result<Matrix> {
        let q = self.sensitivities(x)?;
        Ok(outer(&q, x))
    }

    /// Gradient with the leading-order sensitivities.
    pub fn leading_order_gradient(&self, x: &[f64]) -> Result<Matrix> {
        let h = self.hidden_state(x)?;
        Ok(outer(&self.leading_order_sensitivities_from_state(&h), x))
    }

    pub fn baseline_gradient(&self, x: &[f64]) -> Result<Matrix> {
        self.require(Mode::Baseline)?;
        self.gradient(x)
    }

    pub fn hadamard_gradient(&self, x: &[f64]) -> Result<Matrix> {
        self.require(Mode::Hadamard)?;
        self.gradient(x)
    }
}

fn outer(a: &[f64], b: &[f64]) -> Matrix {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}
