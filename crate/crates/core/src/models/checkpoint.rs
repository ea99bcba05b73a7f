//! Flat binary model checkpoints.
//!
//! All integers are little-endian `u64` unless noted, all reals little-endian
//! `f64`, matrices row-major.
//!
//! ```text
//! header   "NTKS1"                       5 bytes
//!          kind        u8                1 = two-layer, 2 = multi-layer
//!          mode        u8                0 = baseline, 1 = hadamard
//!          m, d, L     u64 ×3            first-layer width, input dim, depth
//!          activation  u8                0 = relu, 1 = identity
//! two-layer body
//!          norm u8 (0 none, 1 sp, 2 topk), k u64, modulated u8, frozen u8
//!          a_scale, init_std
//!          W (m·d), signs (m), [A (m·d), b (m)]
//! multi-layer body, per layer
//!          rows u64, cols u64, norm u8, k u64, modulated u8, frozen u8
//!          W (rows·cols), [A (rows·d), b (rows)]
//!          then readout length u64 and readout values
//! ```

use std::fs;
use std::path::Path;

use super::{Activation, Layer, Mode, ModulationMap, MultiLayerModel, Normalization, TwoLayerModel};
use crate::error::{NtkError, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 5] = b"NTKS1";

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    TwoLayer(TwoLayerModel),
    MultiLayer(MultiLayerModel),
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        match self {
            Checkpoint::TwoLayer(model) => {
                w.u8(1);
                w.u8(match model.mode() {
                    Mode::Baseline => 0,
                    Mode::Hadamard => 1,
                });
                w.u64(model.width() as u64);
                w.u64(model.input_dim() as u64);
                w.u64(1);
                w.u8(activation_code(model.activation()));
                w.normalization(model.normalization());
                w.u8(model.modulation().is_some() as u8);
                w.u8(model.modulation().is_some_and(|m| m.frozen) as u8);
                w.f64(model.a_scale());
                w.f64(model.init_std());
                w.matrix(model.weights());
                w.f64s(model.signs());
                if let Some(map) = model.modulation() {
                    w.matrix(&map.weight);
                    w.f64s(&map.bias);
                }
            }
            Checkpoint::MultiLayer(model) => {
                w.u8(2);
                w.u8(1);
                w.u64(model.layers()[0].width() as u64);
                w.u64(model.input_dim() as u64);
                w.u64(model.depth() as u64);
                w.u8(activation_code(model.activation()));
                for layer in model.layers() {
                    w.u64(layer.weight.nrows() as u64);
                    w.u64(layer.weight.ncols() as u64);
                    w.normalization(layer.normalization);
                    w.u8(layer.modulation.is_some() as u8);
                    w.u8(layer.modulation.as_ref().is_some_and(|m| m.frozen) as u8);
                    w.matrix(&layer.weight);
                    if let Some(map) = &layer.modulation {
                        w.matrix(&map.weight);
                        w.f64s(&map.bias);
                    }
                }
                w.u64(model.readout().len() as u64);
                w.f64s(model.readout());
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(NtkError::Parse("bad checkpoint magic".into()));
        }
        let kind = r.u8()?;
        let mode = match r.u8()? {
            0 => Mode::Baseline,
            1 => Mode::Hadamard,
            other => return Err(NtkError::Parse(format!("unknown mode code {other}"))),
        };
        let m = r.usize()?;
        let d = r.usize()?;
        let depth = r.usize()?;
        let activation = match r.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            other => return Err(NtkError::Parse(format!("unknown activation code {other}"))),
        };
        let ckpt = match kind {
            1 => {
                let normalization = r.normalization()?;
                let modulated = r.u8()? != 0;
                let frozen = r.u8()? != 0;
                let a_scale = r.f64()?;
                let init_std = r.f64()?;
                let weights = r.matrix(m, d)?;
                let signs = r.f64s(m)?;
                let modulation = if modulated {
                    let a = r.matrix(m, d)?;
                    let b = r.f64s(m)?;
                    Some(ModulationMap::new(a, b, frozen)?)
                } else {
                    None
                };
                Checkpoint::TwoLayer(TwoLayerModel::from_parts(
                    weights,
                    signs,
                    a_scale,
                    init_std,
                    mode,
                    normalization,
                    activation,
                    modulation,
                )?)
            }
            2 => {
                let mut layers = Vec::with_capacity(depth);
                for _ in 0..depth {
                    let rows = r.usize()?;
                    let cols = r.usize()?;
                    let normalization = r.normalization()?;
                    let modulated = r.u8()? != 0;
                    let frozen = r.u8()? != 0;
                    let weight = r.matrix(rows, cols)?;
                    let modulation = if modulated {
                        let a = r.matrix(rows, d)?;
                        let b = r.f64s(rows)?;
                        Some(ModulationMap::new(a, b, frozen)?)
                    } else {
                        None
                    };
                    layers.push(Layer {
                        weight,
                        normalization,
                        modulation,
                    });
                }
                let len = r.usize()?;
                let readout = r.f64s(len)?;
                Checkpoint::MultiLayer(MultiLayerModel::new(layers, readout, activation)?)
            }
            other => return Err(NtkError::Parse(format!("unknown checkpoint kind {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(NtkError::Parse(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn activation_code(a: Activation) -> u8 {
    match a {
        Activation::Relu => 0,
        Activation::Identity => 1,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }

    fn matrix(&mut self, m: &Matrix) {
        m.iter().for_each(|&x| self.f64(x));
    }

    fn normalization(&mut self, n: Normalization) {
        let (code, k) = match n {
            Normalization::None => (0, 0),
            Normalization::Sp => (1, 0),
            Normalization::TopK(k) => (2, k as u64),
        };
        self.u8(code);
        self.u64(k);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NtkError::Parse("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| NtkError::Parse("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(NtkError::Parse("truncated checkpoint".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| NtkError::Parse("matrix size overflows".into()))?;
        let data = self.f64s(n)?;
        Matrix::from_shape_vec((rows, cols), data).map_err(|e| NtkError::Parse(e.to_string()))
    }

    fn normalization(&mut self) -> Result<Normalization> {
        let code = self.u8()?;
        let k = self.usize()?;
        match code {
            0 => Ok(Normalization::None),
            1 => Ok(Normalization::Sp),
            2 => Ok(Normalization::TopK(k)),
            other => Err(NtkError::Parse(format!("unknown normalization code {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    #[test]
    fn two_layer_roundtrip() {
        let mut rng = Rng::new(1);
        let model =
            TwoLayerModel::hadamard(&mut rng, 6, 4, 1.5, 1.0, Normalization::TopK(3), true).unwrap();
        let ckpt = Checkpoint::TwoLayer(model);
        assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap(), ckpt);
    }

    #[test]
    fn multilayer_roundtrip() {
        let mut rng = Rng::new(2);
        let model = MultiLayerModel::random(&mut rng, 3, &[5, 4], Normalization::Sp, true, 1.0, 1.0).unwrap();
        let ckpt = Checkpoint::MultiLayer(model);
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..5], b"NTKS1");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let mut rng = Rng::new(3);
        let model = TwoLayerModel::baseline(&mut rng, 4, 2, 1.0, 1.0).unwrap();
        let bytes = Checkpoint::TwoLayer(model).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
