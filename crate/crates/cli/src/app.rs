//! Command-line interface and subcommand drivers.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ntks_core::encoding::{
    avg_offdiag_tau, kappa, mc_avg_offdiag_tau_pairs, mc_kappa, mc_second_moment,
    raw_offdiag_tau_avg, second_moment, McEstimate,
};
use ntks_core::linalg::Rng;
use ntks_core::signals::{write_pgm, Grid2D};
use rayon::prelude::*;

use crate::config::{default_configs, parse_config, ExperimentConfig, Variant};
use crate::error::{CliError, Result};
use crate::experiments::{
    compute_stats, drift_point, prepare, reconstruct, run_training, spectrum, DriftPoint,
    ImageTarget, StatsRow, TrainRun,
};
use crate::report::{fmt_f64, fmt_opt, Table};

#[derive(Debug, Parser)]
#[command(name = "ntks", version, about = "NTK spectral statistics of coordinate networks")]
pub struct Cli {
    /// JSON experiment config: one object or an array. Defaults to one run per variant.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of every config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Binary PGM used by configs with `"target": "image"`.
    #[arg(long, global = true)]
    pub image: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Kernel statistics at initialization (ntk_stats.csv).
    NtkStats,
    /// Fourier-feature closed forms against Monte Carlo (pe_validation.csv).
    ValidatePe(PeArgs),
    /// Full-batch training traces (train_<id>.csv, recon_<id>.pgm).
    Train,
    /// Frozen-kernel residual and kernel drift across widths (drift_sweep.csv).
    DriftSweep(DriftArgs),
    /// Statistics plus final PSNR per variant (ablation.csv, recon_<id>.pgm).
    Ablate,
    /// Kernel eigenvalues at initialization (spectra.csv).
    Spectra,
}

#[derive(Debug, Clone, Args)]
pub struct PeArgs {
    #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
    pub dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    pub bandwidths: Vec<f64>,
    /// Grid side for the similarity average.
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    /// Monte Carlo draws per row, at least 10⁴.
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DriftArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    pub widths: Vec<usize>,
    /// Seeds per width, counting up from the base seed.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 20)]
    pub record_every: usize,
}

/// Files written and rows that failed.
#[derive(Debug, Default)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub failures: usize,
    pub warnings: Vec<String>,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.failures == 0
    }
}

pub const MIN_PE_DRAWS: usize = 10_000;

pub fn load_configs(cli: &Cli) -> Result<Vec<ExperimentConfig>> {
    let configs = match &cli.config {
        Some(path) => parse_config(path)?,
        None => default_configs(),
    };
    Ok(match cli.seed {
        Some(seed) => configs.into_iter().map(|c| c.with_seed(seed)).collect(),
        None => configs,
    })
}

pub fn run(cli: &Cli) -> Result<RunSummary> {
    fs::create_dir_all(&cli.out)?;
    let image = cli.image.as_deref().map(ImageTarget::load).transpose()?;
    let image = image.as_ref();
    match &cli.command {
        Command::NtkStats => {
            let (table, failures) = stats_table(&load_configs(cli)?, image);
            finish(&cli.out, "ntk_stats.csv", &table, failures)
        }
        Command::Spectra => {
            let (table, failures) = spectra_table(&load_configs(cli)?, image);
            finish(&cli.out, "spectra.csv", &table, failures)
        }
        Command::ValidatePe(args) => {
            let table = pe_validation_table(args, cli.seed.unwrap_or(0))?;
            finish(&cli.out, "pe_validation.csv", &table, 0)
        }
        Command::DriftSweep(args) => {
            let bases = match &cli.config {
                Some(path) => parse_config(path)?,
                None => vec![ExperimentConfig::new(Variant::Hada)],
            };
            let (table, failures) = drift_table(&bases, args, cli.seed.unwrap_or(0));
            finish(&cli.out, "drift_sweep.csv", &table, failures)
        }
        Command::Train => train_all(&load_configs(cli)?, image, &cli.out),
        Command::Ablate => {
            let (table, mut summary) = ablation(&load_configs(cli)?, image, &cli.out);
            let path = cli.out.join("ablation.csv");
            table.write(&path)?;
            summary.files.insert(0, path);
            Ok(summary)
        }
    }
}

fn finish(out: &Path, name: &str, table: &Table, failures: usize) -> Result<RunSummary> {
    let path = out.join(name);
    table.write(&path)?;
    Ok(RunSummary {
        files: vec![path],
        failures,
        warnings: Vec::new(),
    })
}

pub const STATS_COLUMNS: [&str; 23] = [
    "config_id",
    "seed",
    "variant",
    "n",
    "m",
    "mu_lambda",
    "v_lambda",
    "diag_var",
    "lambda_max",
    "lambda_min",
    "S_bar",
    "P_bar",
    "S_bar_energy",
    "sum_tau_x",
    "sum_tau_s",
    "sum_tau_s_offdiag",
    "sum_tau_p",
    "sum_tau_q",
    "sum_tau_s_overlap",
    "sum_tau_p_overlap",
    "variance_proxy",
    "identity_err_mean",
    "identity_err_second",
];

fn stats_cells(row: &StatsRow) -> Vec<String> {
    let s = &row.spectral;
    let sim = row.similarity.as_ref();
    let col = |f: fn(&crate::experiments::SimilarityColumns) -> f64| fmt_opt(sim.map(f));
    vec![
        row.config_id.clone(),
        row.seed.to_string(),
        row.variant.clone(),
        row.n.to_string(),
        row.m.to_string(),
        fmt_f64(s.mu_lambda),
        fmt_f64(s.v_lambda),
        fmt_f64(s.diag_var),
        fmt_opt(s.eigenvalues.first().copied()),
        fmt_opt(s.eigenvalues.last().copied()),
        col(|c| c.s_bar),
        col(|c| c.p_bar),
        col(|c| c.s_bar_energy),
        fmt_f64(row.sum_tau_x),
        col(|c| c.sum_tau_s),
        col(|c| c.sum_tau_s_offdiag),
        col(|c| c.sum_tau_p),
        col(|c| c.sum_tau_q),
        col(|c| c.sum_tau_s_overlap),
        col(|c| c.sum_tau_p_overlap),
        col(|c| c.variance_proxy),
        col(|c| c.identity_err_mean),
        col(|c| c.identity_err_second),
    ]
}

/// Leading cells of a failed row: id, seed and variant, then blanks.
fn failed_cells(cfg: &ExperimentConfig, width: usize) -> Vec<String> {
    let mut cells = vec![String::new(); width];
    cells[0] = cfg.config_id.clone();
    cells[1] = cfg.seed.to_string();
    cells[2] = cfg.variant.name().into();
    cells
}

fn with_columns(base: &[&str], extra: &[&str]) -> Table {
    let header: Vec<&str> = base.iter().chain(extra).copied().collect();
    Table::new(&header)
}

pub fn stats_rows(configs: &[ExperimentConfig], image: Option<&ImageTarget>) -> Vec<Result<StatsRow>> {
    configs
        .par_iter()
        .map(|cfg| prepare(cfg, image).and_then(|w| compute_stats(&w)))
        .collect()
}

pub fn stats_table(configs: &[ExperimentConfig], image: Option<&ImageTarget>) -> (Table, usize) {
    let mut table = with_columns(&STATS_COLUMNS, &["error"]);
    let mut failures = 0;
    for (cfg, row) in configs.iter().zip(stats_rows(configs, image)) {
        let cells = match row {
            Ok(row) => {
                let mut c = stats_cells(&row);
                c.push(String::new());
                c
            }
            Err(e) => {
                failures += 1;
                let mut c = failed_cells(cfg, STATS_COLUMNS.len());
                c.push(e.to_string());
                c
            }
        };
        table.push(cells);
    }
    (table, failures)
}

pub fn spectra_table(configs: &[ExperimentConfig], image: Option<&ImageTarget>) -> (Table, usize) {
    let mut table = Table::new(&["config_id", "seed", "variant", "index", "eigenvalue", "error"]);
    let results: Vec<Result<Vec<f64>>> = configs
        .par_iter()
        .map(|cfg| prepare(cfg, image).and_then(|w| spectrum(&w)))
        .collect();
    let mut failures = 0;
    for (cfg, res) in configs.iter().zip(results) {
        let lead = [cfg.config_id.clone(), cfg.seed.to_string(), cfg.variant.name().to_string()];
        match res {
            Ok(eigs) => {
                for (i, v) in eigs.into_iter().enumerate() {
                    let mut cells = lead.to_vec();
                    cells.extend([i.to_string(), fmt_f64(v), String::new()]);
                    table.push(cells);
                }
            }
            Err(e) => {
                failures += 1;
                let mut cells = lead.to_vec();
                cells.extend([String::new(), String::new(), e.to_string()]);
                table.push(cells);
            }
        }
    }
    (table, failures)
}

pub const TRAIN_COLUMNS: [&str; 9] = [
    "config_id",
    "seed",
    "step",
    "loss",
    "psnr",
    "eps_k",
    "eps_zero_init",
    "h_drift_opnorm",
    "max_w_drift",
];

pub fn train_trace_table(cfg: &ExperimentConfig, run: &TrainRun) -> Table {
    let mut table = Table::new(&TRAIN_COLUMNS);
    for r in &run.trace.records {
        table.push(vec![
            cfg.config_id.clone(),
            cfg.seed.to_string(),
            r.step.to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.psnr),
            fmt_f64(r.eps_k),
            fmt_f64(r.eps_zero_init),
            fmt_opt(r.h_drift),
            fmt_opt(r.max_w_drift),
        ]);
    }
    table
}

fn warning_lines(cfg: &ExperimentConfig, warnings: &[String]) -> Vec<String> {
    warnings.iter().map(|w| format!("{}: {w}", cfg.config_id)).collect()
}

fn write_warnings(out: &Path, warnings: &[String]) -> Result<Option<PathBuf>> {
    if warnings.is_empty() {
        return Ok(None);
    }
    let path = out.join("warnings.txt");
    fs::write(&path, warnings.iter().map(|w| format!("{w}\n")).collect::<String>())?;
    Ok(Some(path))
}

fn train_one(cfg: &ExperimentConfig, image: Option<&ImageTarget>, out: &Path) -> Result<(Vec<PathBuf>, Vec<String>)> {
    let w = prepare(cfg, image)?;
    let run = run_training(&w)?;
    let csv_path = out.join(format!("train_{}.csv", cfg.config_id));
    train_trace_table(cfg, &run).write(&csv_path)?;
    let recon = reconstruct(&w, &run.trace.model)?;
    let pgm_path = out.join(format!("recon_{}.pgm", cfg.config_id));
    write_pgm(&pgm_path, w.grid.side(), &recon.values)?;
    Ok((vec![csv_path, pgm_path], warning_lines(cfg, &run.warnings)))
}

fn train_all(configs: &[ExperimentConfig], image: Option<&ImageTarget>, out: &Path) -> Result<RunSummary> {
    let results: Vec<Result<(Vec<PathBuf>, Vec<String>)>> =
        configs.par_iter().map(|cfg| train_one(cfg, image, out)).collect();
    let mut summary = RunSummary::default();
    for (cfg, res) in configs.iter().zip(results) {
        match res {
            Ok((files, warnings)) => {
                summary.files.extend(files);
                summary.warnings.extend(warnings);
            }
            Err(e) => {
                summary.failures += 1;
                summary.warnings.push(format!("{}: failed: {e}", cfg.config_id));
            }
        }
    }
    if let Some(path) = write_warnings(out, &summary.warnings)? {
        summary.files.push(path);
    }
    Ok(summary)
}

pub const ABLATION_EXTRA: [&str; 5] = ["eta", "final_loss", "final_psnr", "recon_psnr", "error"];

/// Outcome of one ablation row.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub stats: StatsRow,
    pub eta: f64,
    pub final_loss: f64,
    /// PSNR on the training samples.
    pub final_psnr: f64,
    /// PSNR of the reconstruction over the full grid.
    pub recon_psnr: f64,
    pub warnings: Vec<String>,
}

/// Statistics at initialization, training and reconstruction for one config.
/// The reconstruction is written to `out` when given.
pub fn ablation_row(cfg: &ExperimentConfig, image: Option<&ImageTarget>, out: Option<&Path>) -> Result<AblationRow> {
    let w = prepare(cfg, image)?;
    let stats = compute_stats(&w)?;
    let run = run_training(&w)?;
    let recon = reconstruct(&w, &run.trace.model)?;
    if let Some(out) = out {
        write_pgm(out.join(format!("recon_{}.pgm", cfg.config_id)), w.grid.side(), &recon.values)?;
    }
    Ok(AblationRow {
        stats,
        eta: run.eta,
        final_loss: run.final_loss(),
        final_psnr: run.final_psnr(),
        recon_psnr: recon.psnr,
        warnings: warning_lines(cfg, &run.warnings),
    })
}

pub fn ablation(configs: &[ExperimentConfig], image: Option<&ImageTarget>, out: &Path) -> (Table, RunSummary) {
    let results: Vec<Result<AblationRow>> = configs
        .par_iter()
        .map(|cfg| ablation_row(cfg, image, Some(out)))
        .collect();
    let mut table = with_columns(&STATS_COLUMNS, &ABLATION_EXTRA);
    let mut summary = RunSummary::default();
    for (cfg, res) in configs.iter().zip(results) {
        match res {
            Ok(row) => {
                let mut cells = stats_cells(&row.stats);
                cells.extend([
                    fmt_f64(row.eta),
                    fmt_f64(row.final_loss),
                    fmt_f64(row.final_psnr),
                    fmt_f64(row.recon_psnr),
                    String::new(),
                ]);
                table.push(cells);
                summary.files.push(out.join(format!("recon_{}.pgm", cfg.config_id)));
                summary.warnings.extend(row.warnings);
            }
            Err(e) => {
                summary.failures += 1;
                let mut cells = failed_cells(cfg, STATS_COLUMNS.len() + ABLATION_EXTRA.len() - 1);
                cells.push(e.to_string());
                table.push(cells);
            }
        }
    }
    match write_warnings(out, &summary.warnings) {
        Ok(Some(path)) => summary.files.push(path),
        Ok(None) => {}
        Err(_) => summary.failures += 1,
    }
    (table, summary)
}

pub fn drift_points(bases: &[ExperimentConfig], args: &DriftArgs, base_seed: u64) -> Vec<(ExperimentConfig, usize, u64, Result<DriftPoint>)> {
    let jobs: Vec<(ExperimentConfig, usize, u64)> = bases
        .iter()
        .flat_map(|b| {
            let mut cfg = b.clone();
            cfg.n_samples = args.samples;
            cfg.steps = args.steps;
            cfg.record_every = args.record_every;
            args.widths
                .iter()
                .flat_map(move |&m| (0..args.seeds).map(move |s| (m, base_seed + s)))
                .map(move |(m, s)| (cfg.clone(), m, s))
        })
        .collect();
    let results: Vec<Result<DriftPoint>> = jobs
        .par_iter()
        .map(|(cfg, m, seed)| drift_point(cfg, *m, *seed))
        .collect();
    jobs.into_iter()
        .zip(results)
        .map(|((cfg, m, s), r)| (cfg, m, s, r))
        .collect()
}

pub fn drift_table(bases: &[ExperimentConfig], args: &DriftArgs, base_seed: u64) -> (Table, usize) {
    let mut table = Table::new(&[
        "config_id",
        "seed",
        "m",
        "sup_eps",
        "sup_eps_zero_init",
        "sup_drift",
        "final_drift",
        "final_loss",
        "error",
    ]);
    let mut failures = 0;
    for (cfg, m, seed, res) in drift_points(bases, args, base_seed) {
        let mut cells = vec![cfg.config_id.clone(), seed.to_string(), m.to_string()];
        match res {
            Ok(p) => cells.extend([
                fmt_f64(p.sup_eps),
                fmt_f64(p.sup_eps_zero_init),
                fmt_f64(p.sup_drift),
                fmt_f64(p.final_drift),
                fmt_f64(p.final_loss),
                String::new(),
            ]),
            Err(e) => {
                failures += 1;
                cells.extend(vec![String::new(); 5]);
                cells.push(e.to_string());
            }
        }
        table.push(cells);
    }
    (table, failures)
}

fn mc_cells(est: &McEstimate, closed: f64) -> [String; 4] {
    [
        fmt_f64(closed),
        fmt_f64(est.mean),
        fmt_f64(est.stderr),
        fmt_f64(est.z_score(closed)),
    ]
}

/// Closed forms against Monte Carlo at the grid spacing, and the grid-average
/// encoded similarity against the raw-coordinate average.
pub fn pe_validation_table(args: &PeArgs, seed: u64) -> Result<Table> {
    if args.draws < MIN_PE_DRAWS {
        return Err(CliError::InvalidConfig {
            field: "draws".into(),
            message: format!("{} draws, at least {MIN_PE_DRAWS} required", args.draws),
        });
    }
    if args.grid < 2 {
        return Err(CliError::InvalidConfig {
            field: "grid".into(),
            message: "grid side must be at least 2".into(),
        });
    }
    let grid = Grid2D::new(args.grid)?;
    let raw = raw_offdiag_tau_avg(&grid)?;
    let delta = 1.0 / (args.grid - 1) as f64;
    let mut table = Table::new(&[
        "config_id",
        "seed",
        "quantity",
        "dim",
        "bandwidth",
        "delta",
        "closed_form",
        "mc_mean",
        "mc_stderr",
        "z",
        "raw_baseline",
    ]);
    let root = Rng::new(seed);
    let mut stream = 0u64;
    for &dim in &args.dims {
        for &bw in &args.bandwidths {
            let id = format!("pe_d{dim}_b{bw}");
            let mut emit = |quantity: &str, delta: String, cells: [String; 4], baseline: String| {
                let mut row = vec![id.clone(), seed.to_string(), quantity.into(), dim.to_string(), fmt_f64(bw), delta];
                row.extend(cells);
                row.push(baseline);
                table.push(row);
            };
            let est = mc_kappa(&root.child(stream), bw, delta, args.draws)?;
            emit("kappa", fmt_f64(delta), mc_cells(&est, kappa(bw, delta)), String::new());
            let est = mc_second_moment(&root.child(stream + 1), dim, bw, delta, args.draws)?;
            emit("second_moment", fmt_f64(delta), mc_cells(&est, second_moment(dim, bw, delta)), String::new());
            let est = mc_avg_offdiag_tau_pairs(&root.child(stream + 2), &grid, dim, bw, args.draws)?;
            let closed = avg_offdiag_tau(&grid, dim, bw)?;
            emit("avg_offdiag_tau", String::new(), mc_cells(&est, closed), fmt_f64(raw));
            stream += 3;
        }
    }
    Ok(table)
}
