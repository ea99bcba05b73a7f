use super::normalize::{topk_mask, MIN_ENERGY};
use super::{Activation, ModulationMap, Normalization, TwoLayerModel};
use crate::error::{NtkError, Result};
use crate::linalg::{dot, gaussian_matrix, Matrix, Rng};

/// One layer: `y = normalize(σ(W y_prev)) ⊙ p(x̃)`.
///
/// The modulation reads the network input `x̃`, not the previous layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub normalization: Normalization,
    pub modulation: Option<ModulationMap>,
}

impl Layer {
    pub fn width(&self) -> usize {
        self.weight.nrows()
    }
}

/// Stack of [`Layer`]s followed by a linear readout `aᵀ y_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerModel {
    layers: Vec<Layer>,
    readout: Vec<f64>,
    activation: Activation,
}

/// Which parameters enter a Jacobian Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamScope {
    /// First-layer weights only.
    FirstLayer,
    /// Every weight matrix, the readout, and unfrozen modulation parameters.
    All,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Vec<f64>,
    pub preacts: Vec<f64>,
    pub activations: Vec<f64>,
    pub mask: Vec<bool>,
    pub energy: f64,
    /// Normalized (or, without normalization, raw) activations before modulation.
    pub hidden: Vec<f64>,
    pub p: Vec<f64>,
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub x: Vec<f64>,
    pub layers: Vec<LayerCache>,
    pub output: f64,
}

/// Per-sample gradient of one layer in factored form: `∂u/∂W = delta ⊗ input`,
/// and for unfrozen modulation `∂u/∂A = mod_delta ⊗ x̃`, `∂u/∂b = mod_delta`.
#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub delta: Vec<f64>,
    pub input: Vec<f64>,
    pub mod_delta: Option<Vec<f64>>,
}

impl LayerGradient {
    pub fn weight_grad(&self) -> Matrix {
        outer(&self.delta, &self.input)
    }
}

#[derive(Debug, Clone)]
pub struct MultiLayerGradient {
    pub x: Vec<f64>,
    pub layers: Vec<LayerGradient>,
    pub readout: Vec<f64>,
}

impl MultiLayerGradient {
    /// Inner product of two per-sample gradients over the parameters in `scope`.
    pub fn inner(&self, other: &MultiLayerGradient, scope: ParamScope) -> f64 {
        let first = &self.layers[0];
        let other_first = &other.layers[0];
        let mut acc = dot(&first.delta, &other_first.delta) * dot(&first.input, &other_first.input);
        if scope == ParamScope::FirstLayer {
            return acc;
        }
        let xx = dot(&self.x, &other.x);
        for (k, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if k > 0 {
                acc += dot(&a.delta, &b.delta) * dot(&a.input, &b.input);
            }
            if let (Some(ma), Some(mb)) = (&a.mod_delta, &b.mod_delta) {
                acc += dot(ma, mb) * (xx + 1.0);
            }
        }
        acc + dot(&self.readout, &other.readout)
    }

    /// All gradient entries in [`MultiLayerModel::params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for &dl in &l.delta {
                out.extend(l.input.iter().map(|v| dl * v));
            }
            if let Some(md) = &l.mod_delta {
                for &v in md {
                    out.extend(self.x.iter().map(|xi| v * xi));
                }
                out.extend_from_slice(md);
            }
        }
        out.extend_from_slice(&self.readout);
        out
    }
}

impl MultiLayerModel {
    pub fn new(layers: Vec<Layer>, readout: Vec<f64>, activation: Activation) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(NtkError::invalid("model needs at least one layer"));
        };
        let d = first.weight.ncols();
        if d == 0 {
            return Err(NtkError::invalid("input dimension must be at least 1"));
        }
        let mut prev = d;
        for (l, layer) in layers.iter().enumerate() {
            let (m, cols) = layer.weight.dim();
            if m == 0 || cols != prev {
                return Err(NtkError::invalid(format!(
                    "layer {} weight is {m}x{cols}, expected ?x{prev}",
                    l + 1
                )));
            }
            if layer.weight.iter().any(|v| !v.is_finite()) {
                return Err(NtkError::invalid(format!("layer {} weights must be finite", l + 1)));
            }
            if let Normalization::TopK(k) = layer.normalization {
                if k == 0 || k > m {
                    return Err(NtkError::invalid(format!("layer {}: k = {k} outside 1..={m}", l + 1)));
                }
            }
            if let Some(map) = &layer.modulation {
                if map.width() != m || map.input_dim() != d {
                    return Err(NtkError::invalid(format!(
                        "layer {} modulation is {}x{}, expected {m}x{d}",
                        l + 1,
                        map.width(),
                        map.input_dim()
                    )));
                }
            }
            prev = m;
        }
        if readout.len() != prev || readout.iter().any(|v| !v.is_finite()) {
            return Err(NtkError::invalid(format!("readout must have {prev} finite entries")));
        }
        Ok(MultiLayerModel {
            layers,
            readout,
            activation,
        })
    }

    /// Random network of the given hidden widths. Layer weights are
    /// `N(0, κ²)` when the layer input has unit norm (the network input or a
    /// normalized layer) and `N(0, 2κ²/m_prev)` after an unnormalized layer.
    /// Readout entries are `±a/√m_L`.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        rng: &mut Rng,
        input_dim: usize,
        widths: &[usize],
        normalization: Normalization,
        modulated: bool,
        init_std: f64,
        a_scale: f64,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        let mut prev_normalized = true;
        for &m in widths {
            let std = if prev_normalized {
                init_std
            } else {
                init_std * (2.0 / prev as f64).sqrt()
            };
            let weight = gaussian_matrix(rng, m, prev, std)?;
            let norm = match normalization {
                Normalization::TopK(k) => Normalization::TopK(k.min(m)),
                other => other,
            };
            let modulation = if modulated {
                Some(ModulationMap::random(rng, m, input_dim, 1.0)?)
            } else {
                None
            };
            layers.push(Layer {
                weight,
                normalization: norm,
                modulation,
            });
            prev = m;
            prev_normalized = !normalization.is_none();
        }
        let scale = a_scale / (prev as f64).sqrt();
        let readout = (0..prev).map(|_| scale * rng.sign()).collect();
        Self::new(layers, readout, Activation::Relu)
    }

    /// The same function as a two-layer model: one layer with readout `a_r/√m`.
    pub fn from_two_layer(model: &TwoLayerModel) -> Result<Self> {
        let m = model.width();
        let root_m = (m as f64).sqrt();
        let layer = Layer {
            weight: model.weights().clone(),
            normalization: model.normalization(),
            modulation: model.modulation().cloned(),
        };
        let readout = (0..m).map(|r| model.readout(r) / root_m).collect();
        Self::new(vec![layer], readout, model.activation())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn readout(&self) -> &[f64] {
        &self.readout
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_cache(x)?.output)
    }

    pub fn forward_cache(&self, x: &[f64]) -> Result<ForwardCache> {
        if x.len() != self.input_dim() {
            return Err(NtkError::invalid(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let act = self.activation;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut y = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let preacts: Vec<f64> = layer
                .weight
                .rows()
                .into_iter()
                .map(|w| w.iter().zip(&y).map(|(a, b)| a * b).sum())
                .collect();
            let activations: Vec<f64> = preacts.iter().map(|&g| act.apply(g)).collect();
            let m = activations.len();
            let mask = match layer.normalization {
                Normalization::TopK(k) => topk_mask(&activations, k)?,
                _ => vec![true; m],
            };
            let energy: f64 = (0..m)
                .filter(|&r| mask[r])
                .map(|r| activations[r] * activations[r])
                .sum();
            let hidden: Vec<f64> = if layer.normalization.is_none() {
                activations.clone()
            } else {
                if !(energy >= MIN_ENERGY) {
                    return Err(NtkError::energy(energy).at_layer(l + 1));
                }
                let inv = 1.0 / energy.sqrt();
                (0..m)
                    .map(|r| if mask[r] { activations[r] * inv } else { 0.0 })
                    .collect()
            };
            let p = match &layer.modulation {
                Some(map) => map.eval(x),
                None => vec![1.0; m],
            };
            let output: Vec<f64> = hidden.iter().zip(&p).map(|(h, p)| h * p).collect();
            caches.push(LayerCache {
                input: std::mem::replace(&mut y, output.clone()),
                preacts,
                activations,
                mask,
                energy,
                hidden,
                p,
                output,
            });
        }
        let output = dot(&self.readout, &y);
        Ok(ForwardCache {
            x: x.to_vec(),
            layers: caches,
            output,
        })
    }

    /// Gradient of `upstream · u(x̃)` with respect to every parameter block.
    pub fn backprop(&self, cache: &ForwardCache, upstream: f64) -> MultiLayerGradient {
        let act = self.activation;
        let last = &cache.layers[cache.layers.len() - 1];
        let readout: Vec<f64> = last.output.iter().map(|y| upstream * y).collect();
        let mut grad_y: Vec<f64> = self.readout.iter().map(|a| upstream * a).collect();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            let m = lc.hidden.len();
            let mod_delta = match &layer.modulation {
                Some(map) if !map.frozen => Some(
                    (0..m)
                        .map(|r| grad_y[r] * lc.hidden[r] * (1.0 - lc.p[r] * lc.p[r]))
                        .collect(),
                ),
                _ => None,
            };
            let grad_h: Vec<f64> = (0..m).map(|r| grad_y[r] * lc.p[r]).collect();
            let grad_act: Vec<f64> = if layer.normalization.is_none() {
                grad_h
            } else {
                // h_r = σ_r/√S on the selected set: ∂h_r/∂σ_q = (δ_rq − h_r h_q)/√S.
                let inv = 1.0 / lc.energy.sqrt();
                let proj = dot(&grad_h, &lc.hidden);
                (0..m)
                    .map(|q| {
                        if lc.mask[q] {
                            (grad_h[q] - lc.hidden[q] * proj) * inv
                        } else {
                            0.0
                        }
                    })
                    .collect()
            };
            let delta: Vec<f64> = (0..m)
                .map(|r| grad_act[r] * act.gate(lc.preacts[r]))
                .collect();
            let cols = layer.weight.ncols();
            let mut next = vec![0.0; cols];
            for (r, row) in layer.weight.rows().into_iter().enumerate() {
                if delta[r] != 0.0 {
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += delta[r] * w;
                    }
                }
            }
            grads.push(LayerGradient {
                delta,
                input: lc.input.clone(),
                mod_delta,
            });
            grad_y = next;
        }
        grads.reverse();
        MultiLayerGradient {
            x: cache.x.clone(),
            layers: grads,
            readout,
        }
    }

    pub fn gradient(&self, x: &[f64], upstream: f64) -> Result<MultiLayerGradient> {
        let cache = self.forward_cache(x)?;
        Ok(self.backprop(&cache, upstream))
    }

    /// Trainable parameters, flattened: per layer `W` (row-major), then `A`
    /// and `b` of unfrozen modulation, and finally the readout.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            if let Some(map) = l.modulation.as_ref().filter(|m| !m.frozen) {
                out.extend(map.weight.iter().copied());
                out.extend_from_slice(&map.bias);
            }
        }
        out.extend_from_slice(&self.readout);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Inverse of [`Self::params`].
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(NtkError::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            if let Some(map) = l.modulation.as_mut().filter(|m| !m.frozen) {
                map.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
                map.bias.iter_mut().for_each(|w| *w = it.next().unwrap());
            }
        }
        self.readout.iter_mut().for_each(|w| *w = it.next().unwrap());
        Ok(())
    }

    /// `θ ← θ − lr·g` for a flattened gradient in [`Self::params`] order.
    pub fn apply_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        let mut p = self.params();
        if grad.len() != p.len() {
            return Err(NtkError::invalid("gradient length mismatch"));
        }
        for (v, g) in p.iter_mut().zip(grad) {
            *v -= lr * g;
        }
        self.set_params(&p)
    }

    pub(crate) fn first_layer_weights(&self) -> &Matrix {
        &self.layers[0].weight
    }
}

fn outer(a: &[f64], b: &[f64]) -> Matrix {
    Matrix::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}
