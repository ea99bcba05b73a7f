//! Coordinate grids, target signals, PGM I/O and PSNR.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{NtkError, Result};
use crate::linalg::Rng;

/// Uniform `side × side` grid on `[0,1]²`, both endpoints included.
///
/// Points are stored row-major: `y` is the outer index, `x` the inner one, so
/// point `k` is `(k % side, k / side) / (side - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    side: usize,
    points: Vec<[f64; 2]>,
}

impl Grid2D {
    pub fn new(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(NtkError::invalid("grid side must be at least 1"));
        }
        let coord = |i: usize| {
            if side == 1 {
                0.0
            } else {
                i as f64 / (side - 1) as f64
            }
        };
        let mut points = Vec::with_capacity(side * side);
        for iy in 0..side {
            for ix in 0..side {
                points.push([coord(ix), coord(iy)]);
            }
        }
        Ok(Grid2D { side, points })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        self.points[k]
    }
}

/// Signal values aligned with the points of a grid, in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSignal {
    pub values: Vec<f64>,
}

impl TargetSignal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NtkError::invalid("signal has non-finite values"));
        }
        Ok(TargetSignal { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> TargetSignal {
        TargetSignal {
            values: indices.iter().map(|&i| self.values[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// Four plane waves at 1, 4, 16 and 32 cycles per unit with random
    /// directions and phases, averaged and mapped to `[0,1]`.
    FreqMix,
    /// `1` for `x ≥ 0.5`, else `0`.
    Step,
    /// `(x + y) / 2`.
    Ramp,
}

impl FromStr for TargetKind {
    type Err = NtkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "freq_mix" => Ok(TargetKind::FreqMix),
            "step" => Ok(TargetKind::Step),
            "ramp" => Ok(TargetKind::Ramp),
            other => Err(NtkError::invalid(format!("unknown target kind {other:?}"))),
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetKind::FreqMix => "freq_mix",
            TargetKind::Step => "step",
            TargetKind::Ramp => "ramp",
        })
    }
}

pub const FREQ_MIX_FREQUENCIES: [f64; 4] = [1.0, 4.0, 16.0, 32.0];

pub fn synth_target(grid: &Grid2D, kind: TargetKind, rng: &mut Rng) -> TargetSignal {
    let values = match kind {
        TargetKind::Ramp => grid.points().iter().map(|p| 0.5 * (p[0] + p[1])).collect(),
        TargetKind::Step => grid
            .points()
            .iter()
            .map(|p| if p[0] >= 0.5 { 1.0 } else { 0.0 })
            .collect(),
        TargetKind::FreqMix => {
            let waves: Vec<(f64, [f64; 2], f64)> = FREQ_MIX_FREQUENCIES
                .iter()
                .map(|&f| {
                    let angle = 2.0 * std::f64::consts::PI * rng.uniform();
                    let phase = 2.0 * std::f64::consts::PI * rng.uniform();
                    (f, [angle.cos(), angle.sin()], phase)
                })
                .collect();
            grid.points()
                .iter()
                .map(|p| {
                    let sum: f64 = waves
                        .iter()
                        .map(|(f, dir, phase)| {
                            let t = dir[0] * p[0] + dir[1] * p[1];
                            (2.0 * std::f64::consts::PI * f * t + phase).sin()
                        })
                        .sum();
                    (0.5 * (sum / waves.len() as f64 + 1.0)).clamp(0.0, 1.0)
                })
                .collect()
        }
    };
    TargetSignal { values }
}

/// Parses a binary (P5) or ASCII (P2) PGM image into a grid and `[0,1]` values.
pub fn parse_pgm(bytes: &[u8]) -> Result<(Grid2D, TargetSignal)> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    let magic = cur.token()?;
    let binary = match magic.as_str() {
        "P5" => true,
        "P2" => false,
        other => return Err(NtkError::Parse(format!("unsupported magic {other:?}"))),
    };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(NtkError::Parse(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(NtkError::Parse(format!("maxval {maxval} outside 1..=65535")));
    }
    if width != height {
        return Err(NtkError::UnsupportedShape(format!(
            "image is {width}x{height}, only square images are supported"
        )));
    }
    let count = width * height;
    let raw: Vec<usize> = if binary {
        // Exactly one whitespace byte separates the header from the payload.
        let start = cur.pos + 1;
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let payload = bytes.get(start..).unwrap_or(&[]);
        if payload.len() < need {
            return Err(NtkError::Parse(format!(
                "truncated payload: {} of {need} bytes",
                payload.len()
            )));
        }
        if wide {
            payload[..need]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as usize)
                .collect()
        } else {
            payload[..need].iter().map(|&b| b as usize).collect()
        }
    } else {
        let mut vals = Vec::with_capacity(count);
        for _ in 0..count {
            vals.push(cur.number("pixel")?);
        }
        vals
    };
    if let Some(v) = raw.iter().find(|&&v| v > maxval) {
        return Err(NtkError::Parse(format!("pixel value {v} exceeds maxval {maxval}")));
    }
    let scale = maxval as f64;
    let values = raw.into_iter().map(|v| v as f64 / scale).collect();
    Ok((Grid2D::new(width)?, TargetSignal { values }))
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<(Grid2D, TargetSignal)> {
    parse_pgm(&fs::read(path)?)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(NtkError::Parse("unexpected end of PGM data".into()));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        tok.parse()
            .map_err(|_| NtkError::Parse(format!("bad {what} field {tok:?}")))
    }
}

/// Encodes `[0,1]` values as an 8-bit binary PGM, rounding to the nearest level.
pub fn encode_pgm(side: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != side * side {
        return Err(NtkError::invalid(format!(
            "{} values for a {side}x{side} image",
            values.len()
        )));
    }
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        (v * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, side: usize, values: &[f64]) -> Result<()> {
    fs::write(path, encode_pgm(side, values)?)?;
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(NtkError::invalid(format!(
            "length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(NtkError::invalid("empty signals"));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak value 1. Returns `+∞` when the
/// signals coincide.
pub fn psnr(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let mse = mse(pred, truth)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}
