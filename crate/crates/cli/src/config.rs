//! Experiment configuration files.
//!
//! A config file holds either one JSON object or an array of them. Every key
//! except `variant` is optional:
//!
//! ```json
//! [{"variant": "base"}, {"variant": "hada", "width": 1024, "steps": 2000}]
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ntks_core::models::{choose_k, Mode, Normalization};
use ntks_core::signals::TargetKind;
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Raw coordinates, plain ReLU network.
    Base,
    /// Raw coordinates, spherical normalization.
    BaseNorm,
    /// Fourier features, plain ReLU network.
    RffPeEnc,
    RffPeEncNorm,
    RffPeEncTopk,
    /// Fourier features and modulation without normalization.
    HadaNonorm,
    Hada,
    HadaTopk,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Base,
        Variant::BaseNorm,
        Variant::RffPeEnc,
        Variant::RffPeEncNorm,
        Variant::RffPeEncTopk,
        Variant::HadaNonorm,
        Variant::Hada,
        Variant::HadaTopk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::BaseNorm => "base_norm",
            Variant::RffPeEnc => "rff_pe_enc",
            Variant::RffPeEncNorm => "rff_pe_enc_norm",
            Variant::RffPeEncTopk => "rff_pe_enc_topk",
            Variant::HadaNonorm => "hada_nonorm",
            Variant::Hada => "hada",
            Variant::HadaTopk => "hada_topk",
        }
    }

    pub fn encoded(self) -> bool {
        !matches!(self, Variant::Base | Variant::BaseNorm)
    }

    pub fn modulated(self) -> bool {
        matches!(self, Variant::HadaNonorm | Variant::Hada | Variant::HadaTopk)
    }

    pub fn mode(self) -> Mode {
        match self {
            Variant::Base | Variant::RffPeEnc => Mode::Baseline,
            _ => Mode::Hadamard,
        }
    }

    pub fn topk(self) -> bool {
        matches!(self, Variant::RffPeEncTopk | Variant::HadaTopk)
    }

    pub fn normalized(self) -> bool {
        !matches!(self, Variant::Base | Variant::RffPeEnc | Variant::HadaNonorm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSource {
    Synthetic(TargetKind),
    /// The image passed with `--image`.
    Image,
}

/// One fully defaulted and validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub config_id: String,
    pub variant: Variant,
    pub n_samples: usize,
    pub width: usize,
    /// Hidden layers; 1 is the two-layer network.
    pub depth: usize,
    /// Fourier feature dimension `d`.
    pub enc_dim: usize,
    /// Fourier feature bandwidth `ς`.
    pub bandwidth: f64,
    /// Explicit TopK size; when absent `k` follows the `(k_eta, k_c)` rule.
    pub k: Option<usize>,
    pub k_eta: f64,
    pub k_c: f64,
    /// Readout scale `a`.
    pub a: f64,
    /// First-layer initialization scale `κ`.
    pub init_std: f64,
    /// Absolute step size; clamped to `1/‖H₀‖₂` when larger.
    pub eta: Option<f64>,
    /// Step size as a fraction of `1/‖H₀‖₂`, used when `eta` is absent.
    pub eta_frac: f64,
    pub steps: usize,
    pub record_every: usize,
    pub seed: u64,
    pub target: TargetSource,
    pub grid_side: usize,
}

impl ExperimentConfig {
    pub fn new(variant: Variant) -> Self {
        RawConfig::with_variant(variant.name())
            .validate()
            .expect("defaults are valid")
    }

    /// `TopK(k)`, `Sp` or `None` as the variant requires.
    pub fn normalization(&self) -> Normalization {
        if self.variant.topk() {
            Normalization::TopK(self.topk_k())
        } else if self.variant.normalized() {
            Normalization::Sp
        } else {
            Normalization::None
        }
    }

    pub fn topk_k(&self) -> usize {
        self.k
            .unwrap_or_else(|| choose_k(self.width, self.k_eta, self.k_c).expect("validated rule"))
    }

    pub fn input_dim(&self) -> usize {
        if self.variant.encoded() {
            self.enc_dim
        } else {
            2
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

fn default_n_samples() -> usize {
    200
}
fn default_width() -> usize {
    512
}
fn default_depth() -> usize {
    1
}
fn default_enc_dim() -> usize {
    256
}
fn default_bandwidth() -> f64 {
    10.0
}
fn default_k_eta() -> f64 {
    1.0 / 6.0
}
fn default_k_c() -> f64 {
    2.0
}
fn default_one() -> f64 {
    1.0
}
fn default_eta_frac() -> f64 {
    0.9
}
fn default_steps() -> usize {
    1000
}
fn default_record_every() -> usize {
    50
}
fn default_target() -> String {
    "freq_mix".into()
}
fn default_grid_side() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    variant: String,
    #[serde(default)]
    config_id: Option<String>,
    #[serde(default = "default_n_samples")]
    n_samples: usize,
    #[serde(default = "default_width")]
    width: usize,
    #[serde(default = "default_depth")]
    depth: usize,
    #[serde(default = "default_enc_dim")]
    enc_dim: usize,
    #[serde(default = "default_bandwidth")]
    bandwidth: f64,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default = "default_k_eta")]
    k_eta: f64,
    #[serde(default = "default_k_c")]
    k_c: f64,
    #[serde(default = "default_one")]
    a: f64,
    #[serde(default = "default_one")]
    init_std: f64,
    #[serde(default)]
    eta: Option<f64>,
    #[serde(default = "default_eta_frac")]
    eta_frac: f64,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_record_every")]
    record_every: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_target")]
    target: String,
    #[serde(default = "default_grid_side")]
    grid_side: usize,
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::InvalidConfig {
        field: field.to_string(),
        message: message.into(),
    }
}

impl RawConfig {
    fn with_variant(variant: &str) -> Self {
        serde_json::from_value(serde_json::json!({ "variant": variant })).expect("minimal config")
    }

    fn validate(self) -> Result<ExperimentConfig> {
        let variant: Variant = self.variant.parse().map_err(|e: String| invalid("variant", e))?;
        let target = match self.target.as_str() {
            "image" => TargetSource::Image,
            other => TargetSource::Synthetic(
                other
                    .parse()
                    .map_err(|_| invalid("target", format!("unknown target {other:?}")))?,
            ),
        };
        if self.grid_side < 2 {
            return Err(invalid("grid_side", "must be at least 2"));
        }
        if self.n_samples == 0 {
            return Err(invalid("n_samples", "must be at least 1"));
        }
        if target != TargetSource::Image && self.n_samples >= self.grid_side * self.grid_side {
            return Err(invalid("n_samples", "must be below the number of non-origin grid points"));
        }
        if self.width == 0 {
            return Err(invalid("width", "must be at least 1"));
        }
        if self.depth == 0 {
            return Err(invalid("depth", "must be at least 1"));
        }
        if self.enc_dim < 2 || !self.enc_dim.is_multiple_of(2) {
            return Err(invalid("enc_dim", "must be even and at least 2"));
        }
        for (field, v) in [("bandwidth", self.bandwidth), ("a", self.a), ("init_std", self.init_std)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, "must be positive and finite"));
            }
        }
        if !(self.eta_frac > 0.0 && self.eta_frac <= 1.0) {
            return Err(invalid("eta_frac", "must lie in (0, 1]"));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(invalid("eta", "must be positive and finite"));
            }
        }
        if self.record_every == 0 {
            return Err(invalid("record_every", "must be at least 1"));
        }
        match self.k {
            Some(k) if k == 0 || k > self.width => {
                return Err(invalid("k", format!("must lie in 1..={}", self.width)));
            }
            Some(_) => {}
            None => {
                choose_k(self.width, self.k_eta, self.k_c).map_err(|e| invalid("k_eta", e.to_string()))?;
            }
        }
        Ok(ExperimentConfig {
            config_id: self.config_id.unwrap_or_else(|| variant.name().to_string()),
            variant,
            n_samples: self.n_samples,
            width: self.width,
            depth: self.depth,
            enc_dim: self.enc_dim,
            bandwidth: self.bandwidth,
            k: self.k,
            k_eta: self.k_eta,
            k_c: self.k_c,
            a: self.a,
            init_std: self.init_std,
            eta: self.eta,
            eta_frac: self.eta_frac,
            steps: self.steps,
            record_every: self.record_every,
            seed: self.seed,
            target,
            grid_side: self.grid_side,
        })
    }
}

/// Parses config text. Config ids, which default to the variant name, must be
/// unique.
pub fn parse_config_str(text: &str) -> Result<Vec<ExperimentConfig>> {
    let parse_err = |e: serde_json::Error| CliError::Parse {
        line: e.line(),
        message: e.to_string(),
    };
    // Dispatching on the first token keeps serde's field-level messages.
    let raws: Vec<RawConfig> = if text.trim_start().starts_with('[') {
        serde_json::from_str(text).map_err(parse_err)?
    } else {
        vec![serde_json::from_str(text).map_err(parse_err)?]
    };
    if raws.is_empty() {
        return Err(invalid("variant", "config lists no experiments"));
    }
    let configs: Vec<ExperimentConfig> = raws.into_iter().map(RawConfig::validate).collect::<Result<_>>()?;
    let mut seen = HashSet::new();
    for c in &configs {
        if !seen.insert(c.config_id.as_str()) {
            let field = if c.config_id == c.variant.name() {
                "variant"
            } else {
                "config_id"
            };
            return Err(invalid(field, format!("duplicate experiment {:?}", c.config_id)));
        }
    }
    Ok(configs)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<Vec<ExperimentConfig>> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// One default config per variant.
pub fn default_configs() -> Vec<ExperimentConfig> {
    Variant::ALL.into_iter().map(ExperimentConfig::new).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = &parse_config_str(r#"{"variant":"base"}"#).unwrap()[0];
        assert_eq!(cfg.variant, Variant::Base);
        assert_eq!(cfg.config_id, "base");
        assert_eq!((cfg.n_samples, cfg.width, cfg.enc_dim), (200, 512, 256));
        assert_eq!((cfg.bandwidth, cfg.a, cfg.eta_frac), (10.0, 1.0, 0.9));
        assert_eq!(cfg.steps, 1000);
        assert_eq!(cfg.eta, None);
    }

    #[test]
    fn empty_file_is_a_parse_error() {
        assert!(matches!(parse_config_str(""), Err(CliError::Parse { .. })));
    }

    #[test]
    fn parse_error_reports_line() {
        let err = parse_config_str("[\n{\"variant\": \"base\"},\n{\"variant\" \"hada\"}\n]").unwrap_err();
        match err {
            CliError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse_config_str(r#"{"variant":"base","widht":3}"#).is_err());
    }

    #[test]
    fn duplicate_variant_rejected() {
        let err = parse_config_str(r#"[{"variant":"hada"},{"variant":"hada"}]"#).unwrap_err();
        assert!(matches!(err, CliError::InvalidConfig { ref field, .. } if field == "variant"));
        assert!(parse_config_str(r#"[{"variant":"hada"},{"variant":"hada","config_id":"h2"}]"#).is_ok());
    }

    #[test]
    fn out_of_range_values_name_their_field() {
        for (text, field) in [
            (r#"{"variant":"base","width":0}"#, "width"),
            (r#"{"variant":"base","enc_dim":3}"#, "enc_dim"),
            (r#"{"variant":"base","eta_frac":1.5}"#, "eta_frac"),
            (r#"{"variant":"nope"}"#, "variant"),
            (r#"{"variant":"hada_topk","k":0}"#, "k"),
            (r#"{"variant":"base","target":"noise"}"#, "target"),
            (r#"{"variant":"base","grid_side":4,"n_samples":16}"#, "n_samples"),
        ] {
            match parse_config_str(text) {
                Err(CliError::InvalidConfig { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn variant_table() {
        assert_eq!(ExperimentConfig::new(Variant::HadaTopk).normalization(), Normalization::TopK(85));
        assert_eq!(ExperimentConfig::new(Variant::BaseNorm).normalization(), Normalization::Sp);
        assert_eq!(ExperimentConfig::new(Variant::HadaNonorm).normalization(), Normalization::None);
        assert_eq!(ExperimentConfig::new(Variant::Base).input_dim(), 2);
        assert!(!Variant::RffPeEncNorm.modulated());
        assert_eq!(Variant::RffPeEnc.mode(), Mode::Baseline);
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }
}
