//! Experiment pipeline: target, samples, encoding, model, statistics and training.
//!
//! Every run derives independent streams from its seed: 1 for the synthetic
//! target, 2 for the sample indices, 3 for the Fourier frequencies and 4 for the
//! network. Variants that share a seed therefore see the same target and the
//! same sample points.

use std::path::Path;

use ntks_core::dynamics::{train_finite_width, TrainTrace, TrainableModel};
use ntks_core::encoding::{EncodedDataset, RffEncoder};
use ntks_core::linalg::{operator_norm, sym_eigendecompose, Matrix, Rng, SymMatrix};
use ntks_core::models::{Mode, MultiLayerModel, TwoLayerModel};
use ntks_core::ntk::{
    similarity_bundle, spectral_stats_from_decomposition, variance_proxy_baseline,
    variance_proxy_hadamard, verify_mean_identity, verify_second_moment_identity, SpectralStats,
};
use ntks_core::signals::{load_pgm, psnr, synth_target, Grid2D, TargetSignal};
use ntks_core::NtkError;

use crate::config::{ExperimentConfig, TargetSource};
use crate::error::{CliError, Result};

const STREAM_TARGET: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_ENCODER: u64 = 3;
const STREAM_MODEL: u64 = 4;

/// A grayscale image used as the regression target.
#[derive(Debug, Clone)]
pub struct ImageTarget {
    pub grid: Grid2D,
    pub signal: TargetSignal,
}

impl ImageTarget {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (grid, signal) = load_pgm(path)?;
        Ok(ImageTarget { grid, signal })
    }
}

/// Everything a run needs before any statistic or training step.
#[derive(Debug, Clone)]
pub struct Workload {
    pub config: ExperimentConfig,
    pub grid: Grid2D,
    /// Target over the full grid.
    pub target: TargetSignal,
    /// Grid indices of the training samples, ascending. The origin is never
    /// sampled because its raw coordinates have zero norm.
    pub indices: Vec<usize>,
    pub data: EncodedDataset,
    /// Network inputs for every grid point, for reconstruction.
    pub full_inputs: Matrix,
    pub model: TrainableModel,
}

fn build_model(cfg: &ExperimentConfig, rng: &mut Rng) -> Result<TrainableModel> {
    let d = cfg.input_dim();
    let v = cfg.variant;
    let model = if cfg.depth == 1 {
        let m = match v.mode() {
            Mode::Baseline => TwoLayerModel::baseline(rng, cfg.width, d, cfg.a, cfg.init_std)?,
            Mode::Hadamard => TwoLayerModel::hadamard(
                rng,
                cfg.width,
                d,
                cfg.a,
                cfg.init_std,
                cfg.normalization(),
                v.modulated(),
            )?,
        };
        TrainableModel::TwoLayer(m)
    } else {
        TrainableModel::MultiLayer(MultiLayerModel::random(
            rng,
            d,
            &vec![cfg.width; cfg.depth],
            cfg.normalization(),
            v.modulated(),
            cfg.init_std,
            cfg.a,
        )?)
    };
    Ok(model)
}

pub fn prepare(cfg: &ExperimentConfig, image: Option<&ImageTarget>) -> Result<Workload> {
    let root = Rng::new(cfg.seed);
    let (grid, target) = match cfg.target {
        TargetSource::Synthetic(kind) => {
            let grid = Grid2D::new(cfg.grid_side)?;
            let target = synth_target(&grid, kind, &mut root.child(STREAM_TARGET));
            (grid, target)
        }
        TargetSource::Image => {
            let img = image.ok_or_else(|| CliError::InvalidConfig {
                field: "target".into(),
                message: "target \"image\" needs --image".into(),
            })?;
            (img.grid.clone(), img.signal.clone())
        }
    };
    if cfg.n_samples >= grid.len() {
        return Err(CliError::InvalidConfig {
            field: "n_samples".into(),
            message: format!("{} samples from {} non-origin points", cfg.n_samples, grid.len() - 1),
        });
    }
    let mut indices: Vec<usize> = root
        .child(STREAM_SAMPLES)
        .sample_indices(grid.len() - 1, cfg.n_samples)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    indices.sort_unstable();
    let points: Vec<[f64; 2]> = indices.iter().map(|&i| grid.point(i)).collect();
    let targets = target.select(&indices).values;
    let (data, full_inputs) = if cfg.variant.encoded() {
        let enc = RffEncoder::new(&mut root.child(STREAM_ENCODER), 2, cfg.enc_dim, cfg.bandwidth)?;
        (EncodedDataset::from_rff(&enc, &points, targets)?, enc.encode_all(grid.points()))
    } else {
        let all = grid.points();
        (
            EncodedDataset::from_raw(&points, targets)?,
            Matrix::from_shape_fn((all.len(), 2), |(i, k)| all[i][k]),
        )
    };
    let model = build_model(cfg, &mut root.child(STREAM_MODEL))?;
    Ok(Workload {
        config: cfg.clone(),
        grid,
        target,
        indices,
        data,
        full_inputs,
        model,
    })
}

/// Similarity decomposition of a two-layer kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityColumns {
    pub s_bar: f64,
    pub p_bar: f64,
    /// Mean masked hidden energy.
    pub s_bar_energy: f64,
    /// Squared-cosine masses, diagonal included.
    pub sum_tau_s: f64,
    pub sum_tau_s_offdiag: f64,
    pub sum_tau_p: f64,
    pub sum_tau_q: f64,
    /// Energy-overlap masses, diagonal included.
    pub sum_tau_s_overlap: f64,
    pub sum_tau_p_overlap: f64,
    pub variance_proxy: f64,
    pub identity_err_mean: f64,
    pub identity_err_second: f64,
}

#[derive(Debug, Clone)]
pub struct StatsRow {
    pub config_id: String,
    pub seed: u64,
    pub variant: String,
    pub n: usize,
    pub m: usize,
    pub spectral: SpectralStats,
    pub sum_tau_x: f64,
    /// Only for two-layer models.
    pub similarity: Option<SimilarityColumns>,
}

fn total(a: &SymMatrix) -> f64 {
    a.as_array().sum()
}

fn offdiag_total(a: &SymMatrix) -> f64 {
    total(a) - a.trace()
}

/// `Σ_ij ρ_ij² / (ρ_ii ρ_jj)`, zero-norm rows contributing nothing.
fn tau_x_mass(rho: &SymMatrix) -> f64 {
    let n = rho.n();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let den = rho.get(i, i) * rho.get(j, j);
            if den > 0.0 {
                acc += (rho.get(i, j).powi(2) / den).min(1.0);
            }
        }
    }
    acc
}

fn similarity_columns(model: &TwoLayerModel, data: &EncodedDataset) -> Result<SimilarityColumns> {
    let b = similarity_bundle(model, data)?;
    let variance_proxy = match model.mode() {
        Mode::Baseline => variance_proxy_baseline(&b),
        Mode::Hadamard => variance_proxy_hadamard(&b),
    };
    Ok(SimilarityColumns {
        s_bar: b.s_bar,
        p_bar: b.p_bar,
        s_bar_energy: b.masked_energy_bar,
        sum_tau_s: total(&b.cos2_s),
        sum_tau_s_offdiag: offdiag_total(&b.cos2_s),
        sum_tau_p: total(&b.cos2_p),
        sum_tau_q: total(&b.tau_q),
        sum_tau_s_overlap: total(&b.tau_s),
        sum_tau_p_overlap: total(&b.tau_p),
        variance_proxy,
        identity_err_mean: verify_mean_identity(model, data)?.rel_err,
        identity_err_second: verify_second_moment_identity(model, data)?.rel_err,
    })
}

/// Kernel statistics at initialization.
pub fn compute_stats(w: &Workload) -> Result<StatsRow> {
    let h = w.model.kernel(&w.data)?;
    let dec = sym_eigendecompose(&h.matrix)?;
    let spectral = spectral_stats_from_decomposition(&h.matrix, &dec);
    let similarity = match &w.model {
        TrainableModel::TwoLayer(m) => Some(similarity_columns(m, &w.data)?),
        TrainableModel::MultiLayer(_) => None,
    };
    Ok(StatsRow {
        config_id: w.config.config_id.clone(),
        seed: w.config.seed,
        variant: w.config.variant.name().into(),
        n: w.data.n(),
        m: w.config.width,
        spectral,
        sum_tau_x: tau_x_mass(&w.data.rho),
        similarity,
    })
}

/// Step size for a run: `eta_frac/‖H₀‖₂`, or the configured `eta` clamped to
/// `1/‖H₀‖₂`. Returns the step size and any clamping warning.
pub fn choose_eta(w: &Workload) -> Result<(f64, Option<String>)> {
    let h0 = w.model.kernel(&w.data)?;
    let norm = operator_norm(&h0.matrix)?;
    if !norm.is_finite() || norm <= 0.0 {
        return Err(NtkError::DegenerateKernel(format!("‖H₀‖₂ = {norm:e}")).into());
    }
    let limit = 1.0 / norm;
    Ok(match w.config.eta {
        Some(eta) if eta > limit => (
            limit,
            Some(format!("step size {eta:.6e} exceeds 1/‖H₀‖₂ = {limit:.6e}; clamped")),
        ),
        Some(eta) => (eta, None),
        None => (w.config.eta_frac * limit, None),
    })
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub eta: f64,
    pub trace: TrainTrace,
    pub warnings: Vec<String>,
}

impl TrainRun {
    /// PSNR on the training samples after the last step.
    pub fn final_psnr(&self) -> f64 {
        self.trace.final_record().psnr
    }

    pub fn final_loss(&self) -> f64 {
        self.trace.final_record().loss
    }
}

pub fn run_training(w: &Workload) -> Result<TrainRun> {
    let (eta, clamp) = choose_eta(w)?;
    let trace = train_finite_width(&w.model, &w.data, eta, w.config.steps, w.config.record_every)?;
    let mut warnings: Vec<String> = clamp.into_iter().collect();
    warnings.extend(trace.warnings.iter().cloned());
    Ok(TrainRun { eta, trace, warnings })
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub values: Vec<f64>,
    pub psnr: f64,
    /// Grid points where the network is undefined (zero hidden energy); set to 0.
    pub undefined_points: usize,
}

/// Evaluates a trained network on every grid point.
pub fn reconstruct(w: &Workload, model: &TrainableModel) -> Result<Reconstruction> {
    let (values, undefined_points) = match model.predict(&w.full_inputs) {
        Ok(v) => (v, 0),
        Err(NtkError::DegenerateEnergy { .. }) => {
            let mut undefined = 0;
            let mut values = Vec::with_capacity(w.full_inputs.nrows());
            for row in w.full_inputs.rows() {
                let x = Matrix::from_shape_vec((1, row.len()), row.to_vec()).expect("one row");
                match model.predict(&x) {
                    Ok(v) => values.push(v[0]),
                    Err(NtkError::DegenerateEnergy { .. }) => {
                        undefined += 1;
                        values.push(0.0);
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            (values, undefined)
        }
        Err(e) => return Err(e.into()),
    };
    let psnr = psnr(&values, &w.target.values)?;
    Ok(Reconstruction {
        values,
        psnr,
        undefined_points,
    })
}

/// One width and seed of a drift sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftPoint {
    pub config_id: String,
    pub seed: u64,
    pub m: usize,
    pub sup_eps: f64,
    pub sup_eps_zero_init: f64,
    pub sup_drift: f64,
    /// `‖H(k) − H₀‖₂` at the last step.
    pub final_drift: f64,
    pub final_loss: f64,
}

pub fn drift_point(base: &ExperimentConfig, m: usize, seed: u64) -> Result<DriftPoint> {
    let mut cfg = base.clone().with_seed(seed);
    cfg.width = m;
    let w = prepare(&cfg, None)?;
    let run = run_training(&w)?;
    let trace = &run.trace;
    Ok(DriftPoint {
        config_id: cfg.config_id,
        seed,
        m,
        sup_eps: trace.sup_eps(),
        sup_eps_zero_init: trace.records.iter().map(|r| r.eps_zero_init).fold(0.0, f64::max),
        sup_drift: trace.sup_h_drift(),
        final_drift: trace.final_record().h_drift.unwrap_or(0.0),
        final_loss: run.final_loss(),
    })
}

/// Kernel eigenvalues at initialization, descending.
pub fn spectrum(w: &Workload) -> Result<Vec<f64>> {
    let h = w.model.kernel(&w.data)?;
    Ok(sym_eigendecompose(&h.matrix)?.eigenvalues)
}
