//! Model checkpoint format.
//!
//! Binary file, all integers and floats little-endian:
//!
//! ```text
//! offset  size      field
//! 0       8         magic  b"IRTSPM\0\0"
//! 8       4         format version (u32) = 1
//! 12      4         number of layer widths L (u32), input through output
//! 16      4*L       widths (u32 each)
//! ..      8         parameter count P (u64)
//! ..      8*P       parameters (f64), layer by layer: weights row-major
//!                   (fan_out x fan_in) then biases
//! ```
//!
//! A JSON sidecar with the same stem carries the architecture and any
//! training hyperparameters; loading only requires the binary file.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mlp::{param_count, MlpModel, LOGIT_CLAMP};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"IRTSPM\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Contents of the `.json` sidecar written next to a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format_version: u32,
    pub widths: Vec<usize>,
    pub param_count: usize,
    pub hidden_activation: String,
    pub output_activation: String,
    pub logit_clamp: f64,
    #[serde(default)]
    pub hyperparameters: serde_json::Value,
}

impl ModelSidecar {
    pub fn for_model(model: &MlpModel, hyperparameters: serde_json::Value) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            widths: model.widths().to_vec(),
            param_count: model.param_count(),
            hidden_activation: "relu".into(),
            output_activation: "logistic".into(),
            logit_clamp: LOGIT_CLAMP,
            hyperparameters,
        }
    }
}

pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("json")
}

pub fn encode(model: &MlpModel) -> Vec<u8> {
    let widths = model.widths();
    let mut buf = Vec::with_capacity(24 + 4 * widths.len() + 8 * model.param_count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for &w in widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<MlpModel> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n_widths = c.u32()? as usize;
    if !(2..=64).contains(&n_widths) {
        return Err(Error::Format(format!("implausible layer count {n_widths}")));
    }
    let widths = (0..n_widths)
        .map(|_| c.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = c.u64()? as usize;
    if n != param_count(&widths) {
        return Err(Error::Format(format!(
            "parameter count {n} does not match widths {widths:?}"
        )));
    }
    let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    let params = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    MlpModel::from_params(&widths, params).map_err(|e| Error::Format(e.to_string()))
}

/// Write the model file and its sidecar.
pub fn save(model: &MlpModel, path: &Path, hyperparameters: serde_json::Value) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(model))?;
    f.sync_all()?;
    let sidecar = ModelSidecar::for_model(model, hyperparameters);
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MlpModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn load_sidecar(path: &Path) -> Result<ModelSidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::make_rng;
    use crate::spm::init_model;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = MlpModel::zeros(&[2, 3, 1]).unwrap();
        let b = encode(&m);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 3);
        assert_eq!(b.len(), 16 + 12 + 8 + 8 * 13);
    }

    #[test]
    fn rejects_corruption() {
        let m = init_model(3, &[4], &mut make_rng(0)).unwrap();
        let b = encode(&m);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut ver = b.clone();
        ver[8] = 2;
        assert!(decode(&ver).is_err());
    }

    #[test]
    fn file_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spm_1.bin");
        let m = init_model(4, &[6, 5], &mut make_rng(3)).unwrap();
        save(&m, &path, serde_json::json!({"epochs": 3})).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(encode(&back), encode(&m));
        let side = load_sidecar(&path).unwrap();
        assert_eq!(side.widths, vec![4, 6, 5, 1]);
        assert_eq!(side.param_count, m.param_count());
        assert_eq!(side.hyperparameters["epochs"], 3);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            d in 1usize..6,
            hidden in proptest::collection::vec(1usize..8, 0..3),
            seed in any::<u64>(),
        ) {
            let m = init_model(d, &hidden, &mut make_rng(seed)).unwrap();
            let back = decode(&encode(&m)).unwrap();
            prop_assert_eq!(back.widths(), m.widths());
            for (a, b) in back.params().iter().zip(m.params()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
