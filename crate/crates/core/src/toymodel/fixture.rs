//! Binary model fixture.
//!
//! Layout: `b"QCFX"`, `u32` version, `u32` header length, JSON header
//! (spec and planted counts), then every matrix in canonical order as
//! `u32 rows, u32 cols` followed by `rows * cols` little-endian f32 values.
//! Weights round-trip bit-exactly because they are stored at f32 precision.

use super::{build_synthetic, Ffn, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::ids::MatrixId;
use crate::numerics::{DenseMatrix, Precision};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

const MAGIC: &[u8; 4] = b"QCFX";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    planted: Vec<(MatrixId, usize)>,
}

/// Calls `f` on every matrix in canonical order: per layer q, k, v, o and
/// the FFN (up, gate, down, per expert for MoE), then MoE routers, then the
/// embedding and the final projection.
fn visit(model: &mut Model, f: &mut dyn FnMut(&mut DenseMatrix) -> Result<()>) -> Result<()> {
    for layer in &mut model.layers {
        let a = &mut layer.attn;
        for m in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
            f(m)?;
        }
        let ffns: Vec<&mut super::FfnWeights> = match &mut layer.ffn {
            Ffn::Dense(w) => vec![w],
            Ffn::Moe { experts, .. } => experts.iter_mut().collect(),
        };
        for w in ffns {
            for m in [&mut w.up, &mut w.gate, &mut w.down] {
                f(m)?;
            }
        }
    }
    for layer in &mut model.layers {
        if let Ffn::Moe { router, .. } = &mut layer.ffn {
            f(router)?;
        }
    }
    f(&mut model.embedding)?;
    f(&mut model.lm_head)
}

pub fn write_fixture(model: &Model, mut w: impl Write) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        spec: model.spec.clone(),
        planted: model.planted.iter().map(|(k, v)| (*k, *v)).collect(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    // visiting needs `&mut`; a clone keeps the writer's signature honest
    let mut copy = model.clone();
    visit(&mut copy, &mut |m| {
        if m.precision() != Precision::F32 {
            return Err(Error::Format("fixture weights must use f32 storage".into()));
        }
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        for v in m.as_slice() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("fixture truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a fixture. The model skeleton is rebuilt from the header spec and
/// every matrix is then overwritten from the blobs.
pub fn read_fixture(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a model fixture (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported fixture version {version}")));
    }
    let len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?)?;
    let mut model = build_synthetic(&header.spec)?;
    model.planted = header.planted.into_iter().collect::<BTreeMap<_, _>>();
    visit(&mut model, &mut |m| {
        let (rows, cols) = (c.u32()? as usize, c.u32()? as usize);
        if (rows, cols) != m.shape() {
            return Err(Error::Format(format!(
                "fixture blob {:?} does not match spec shape {:?}",
                (rows, cols),
                m.shape()
            )));
        }
        let raw = c.take(rows * cols * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        *m = DenseMatrix::from_vec(rows, cols, data)
            .map_err(|e| Error::Format(format!("fixture blob: {e}")))?
            .into_f32_storage();
        Ok(())
    })?;
    if c.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after fixture", bytes.len() - c.at)));
    }
    Ok(model)
}
