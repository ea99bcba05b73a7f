//! Coordinate networks with analytic gradients.
//!
//! [`TwoLayerModel`] covers the plain ReLU network `u = m^{-1/2} Σ a_r σ(w_rᵀx̃)`
//! and the normalized Hadamard network
//! `u = m^{-1/2} Σ_{r∈K} a_r p_r(x̃) σ(w_rᵀx̃) / √S`, `S = Σ_{r∈K} σ(w_rᵀx̃)²`,
//! where `K` is every neuron (SP) or the top-`k` activations (TopK-SP).
//! [`MultiLayerModel`] stacks the same layer rule and backpropagates through it.

pub mod checkpoint;
mod multilayer;
mod normalize;
mod two_layer;

use std::fmt;
use std::str::FromStr;

use crate::error::{NtkError, Result};
use crate::linalg::{gaussian_matrix, Matrix, Rng};

pub use multilayer::{
    ForwardCache, Layer, LayerCache, LayerGradient, MultiLayerGradient, MultiLayerModel, ParamScope,
};
pub use normalize::{choose_k, sp_normalize, topk_mask, topk_sp_normalize, uniform_k_mask, MIN_ENERGY};
pub use two_layer::{HiddenState, TwoLayerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Linear units. Only meant for diagnostics: with it the network is linear
    /// in its first-layer weights and the tangent kernel never moves.
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative, with the ReLU gate closed at zero: `𝕀{z ≥ 0}`.
    pub fn gate(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    Sp,
    TopK(usize),
}

impl Normalization {
    pub fn is_none(self) -> bool {
        self == Normalization::None
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Normalization::None => f.write_str("none"),
            Normalization::Sp => f.write_str("sp"),
            Normalization::TopK(k) => write!(f, "topk({k})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Hadamard,
}

impl FromStr for Mode {
    type Err = NtkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "hadamard" => Ok(Mode::Hadamard),
            other => Err(NtkError::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

/// Coordinate-dependent modulation `p(x̃) = tanh(A x̃ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationMap {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

impl ModulationMap {
    pub fn new(weight: Matrix, bias: Vec<f64>, frozen: bool) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(NtkError::invalid(format!(
                "modulation weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(NtkError::invalid("modulation parameters must be finite"));
        }
        Ok(ModulationMap {
            weight,
            bias,
            frozen,
        })
    }

    /// `A` and `b` with i.i.d. `N(0, std²)` entries, frozen.
    pub fn random(rng: &mut Rng, m: usize, d: usize, std: f64) -> Result<Self> {
        let weight = gaussian_matrix(rng, m, d, std)?;
        let bias = gaussian_matrix(rng, 1, m, std)?.into_raw_vec_and_offset().0;
        Self::new(weight, bias, true)
    }

    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .rows()
            .into_iter()
            .zip(&self.bias)
            .map(|(row, b)| (row.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() + b).tanh())
            .collect()
    }
}
