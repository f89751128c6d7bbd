//! `EVM1` model checkpoints.
//!
//! Layout (little-endian): magic `EVM1`, u32 version, u8 kind, u8 precision,
//! u64 input dim, u32 hidden count, u64 per hidden width, u32 classes,
//! u64 best epoch; then every parameter tensor as f64 in declaration order;
//! then u64 epoch count and `(loss, val_score)` f64 pairs.

use std::fs;
use std::path::Path;

use super::model::{ModelKind, ModelSpec, Params};
use super::train::{EpochRecord, Precision, TrainedModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EVM1";
const VERSION: u32 = 1;

pub fn encode_model(model: &TrainedModel) -> Vec<u8> {
    let spec = &model.spec;
    let mut out = Vec::with_capacity(64 + 8 * model.params.n_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(spec.kind.code());
    out.push(match model.precision {
        Precision::Single => 0,
        Precision::Double => 1,
    });
    out.extend_from_slice(&(spec.input_dim as u64).to_le_bytes());
    out.extend_from_slice(&(spec.hidden.len() as u32).to_le_bytes());
    for &h in &spec.hidden {
        out.extend_from_slice(&(h as u64).to_le_bytes());
    }
    out.extend_from_slice(&(spec.n_classes as u32).to_le_bytes());
    out.extend_from_slice(&(model.best_epoch as u64).to_le_bytes());
    for t in model.params.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(model.epoch_log.len() as u64).to_le_bytes());
    for r in &model.epoch_log {
        out.extend_from_slice(&r.loss.to_le_bytes());
        out.extend_from_slice(&r.val_score.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = ModelKind::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown model kind".into()))?;
    let precision = match r.u8()? {
        0 => Precision::Single,
        1 => Precision::Double,
        other => return Err(Error::Checkpoint(format!("unknown precision code {other}"))),
    };
    let input_dim = r.usize()?;
    let n_hidden = r.u32()? as usize;
    if n_hidden > 64 {
        return Err(Error::Checkpoint(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let n_classes = r.u32()? as usize;
    let spec = ModelSpec {
        kind,
        input_dim,
        hidden,
        n_classes,
    };
    spec.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let best_epoch = r.usize()?;

    let n_values: usize = spec.layer_shapes().iter().map(|&(i, o)| i * o + o).sum();
    if n_values.saturating_mul(8) > bytes.len() {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let mut params = Params::<f64>::zeros(&spec);
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = r.f64()?;
        }
    }
    let n_epochs = r.usize()?;
    if n_epochs.saturating_mul(16) != bytes.len() - r.pos {
        return Err(Error::Checkpoint("epoch log length does not match payload".into()));
    }
    let epoch_log = (0..n_epochs)
        .map(|_| {
            Ok(EpochRecord {
                loss: r.f64()?,
                val_score: r.f64()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if best_epoch >= n_epochs.max(1) {
        return Err(Error::Checkpoint(format!("best epoch {best_epoch} outside log of {n_epochs}")));
    }
    Ok(TrainedModel {
        spec,
        precision,
        params,
        best_epoch,
        epoch_log,
    })
}

pub fn save_model(path: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
