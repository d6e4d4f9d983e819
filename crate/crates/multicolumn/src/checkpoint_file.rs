//! Checkpoint file.
//!
//! ```text
//! magic        8 bytes  "MNCKPT01"
//! config hash  32 bytes SHA-256 of the training configuration
//! epoch        u32
//! mode         u8       1 = mn-v, 2 = mn-vc
//! gate bias    u8       0 or 1
//! dim          u32
//! classes      u32
//! history len  u32
//! history      len x f64   mean training loss per epoch
//! parameters   f64 blob: theta2 (dim), bias2, theta3 (2 dim), bias3,
//!              classifier (classes x dim, row-major)
//! ```
//!
//! The bias entries are absent when gate bias is 0. Everything is
//! little-endian. Parameters are stored at full `f64` precision so a reloaded
//! checkpoint reproduces forward outputs bit for bit.

use std::fs;
use std::path::Path;

use multicolumn_core::training::Checkpoint;
use multicolumn_core::{GateParams, Mode};

use crate::corpus_file::Cursor;
use crate::error::{Error, FormatError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MNCKPT01";

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let p = &ck.params;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&ck.config_hash);
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    out.push(ck.mode.code());
    out.push(u8::from(p.has_bias()));
    out.extend_from_slice(&(p.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(p.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(ck.loss_history.len() as u32).to_le_bytes());
    for l in &ck.loss_history {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for x in p.to_flat() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut cur = Cursor::new(bytes);
    cur.expect_magic(CHECKPOINT_MAGIC)?;
    let config_hash = cur.array::<32>()?;
    let epoch = cur.u32()?;
    let mode_at = cur.offset();
    let mode = match Mode::from_code(cur.u8()?) {
        Some(m @ (Mode::MnV | Mode::MnVc)) => m,
        _ => {
            return Err(FormatError::BadField {
                offset: mode_at,
                what: "mode must be 1 (mn-v) or 2 (mn-vc)".into(),
            })
        }
    };
    let bias_at = cur.offset();
    let gate_bias = match cur.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(FormatError::BadField {
                offset: bias_at,
                what: format!("gate bias flag {other}"),
            })
        }
    };
    let dim_at = cur.offset();
    let dim = cur.u32()?;
    if dim == 0 {
        return Err(FormatError::BadDimension {
            offset: dim_at,
            dim,
        });
    }
    let classes = cur.u32()? as usize;
    let history_len = cur.u32()? as usize;
    let mut loss_history = Vec::with_capacity(history_len.min(cur.remaining() / 8));
    for _ in 0..history_len {
        loss_history.push(cur.f64()?);
    }
    let mut params = GateParams::zeros(dim as usize, classes, gate_bias);
    let mut flat = Vec::with_capacity(params.flat_len());
    for _ in 0..params.flat_len() {
        let at = cur.offset();
        let x = cur.f64()?;
        if !x.is_finite() {
            return Err(FormatError::NonFinite { offset: at });
        }
        flat.push(x);
    }
    cur.finish()?;
    params
        .set_from_flat(&flat)
        .expect("blob length matches shape");
    Ok(Checkpoint {
        params,
        mode,
        epoch,
        loss_history,
        config_hash,
    })
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}
