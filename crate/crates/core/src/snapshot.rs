//! Binary model snapshots (`VSEM`).
//!
//! ```text
//! 0   4  magic "VSEM"
//! 4   4  version (u32 LE, = 1)
//! 8   4  d_img, 12 4 d_cap, 16 4 dim (u32 LE)
//! 20  1  normalize_image, 21 1 normalize_caption, 22 1 abs_embeddings (0/1)
//! 23  1  similarity (0 = inner product, 1 = order)
//! 24  4  epoch (u32 LE)
//! 28  8  rsum (f64 LE)
//! 36  .. d_img × dim then d_cap × dim f64 LE, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{ProjectionModel, SimilarityKind};

pub const MAGIC: [u8; 4] = *b"VSEM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 36;

/// A stored model plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredModel {
    pub model: ProjectionModel,
    pub similarity: SimilarityKind,
    pub epoch: usize,
    pub rsum: f64,
}

pub fn encode(stored: &StoredModel) -> Result<Vec<u8>> {
    let m = &stored.model;
    let field = |name: &str, v: usize| {
        u32::try_from(v).map_err(|_| Error::Format(format!("dimension overflow: {name}={v}")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (m.w_img().len() + m.w_cap().len()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, v) in [("d_img", m.d_img()), ("d_cap", m.d_cap()), ("dim", m.dim())] {
        out.extend_from_slice(&field(name, v)?.to_le_bytes());
    }
    out.push(u8::from(m.normalize_image));
    out.push(u8::from(m.normalize_caption));
    out.push(u8::from(m.abs_embeddings));
    out.push(match stored.similarity {
        SimilarityKind::InnerProduct => 0,
        SimilarityKind::Order => 1,
    });
    out.extend_from_slice(&field("epoch", stored.epoch)?.to_le_bytes());
    out.extend_from_slice(&stored.rsum.to_le_bytes());
    for &x in m.w_img().iter().chain(m.w_cap().iter()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<StoredModel> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    let u32_at =
        |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let version = u32_at(4) as u32;
    if version != VERSION {
        return Err(Error::Format(format!(
            "version mismatch: file has {version}, expected {VERSION}"
        )));
    }
    let (d_img, d_cap, dim) = (u32_at(8), u32_at(12), u32_at(16));
    let flag = |o: usize, name: &str| match bytes[o] {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Format(format!("{name} flag has invalid value {v}"))),
    };
    let normalize_image = flag(20, "normalize_image")?;
    let normalize_caption = flag(21, "normalize_caption")?;
    let abs_embeddings = flag(22, "abs_embeddings")?;
    let similarity = match bytes[23] {
        0 => SimilarityKind::InnerProduct,
        1 => SimilarityKind::Order,
        v => return Err(Error::Format(format!("unknown similarity code {v}"))),
    };
    let epoch = u32_at(24);
    let rsum = f64::from_le_bytes(bytes[28..36].try_into().expect("8 bytes"));
    let n_img = d_img
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let n_cap = d_cap
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("dimension overflow".into()))?;
    let payload = (n_img + n_cap) * 8;
    let body = &bytes[HEADER_LEN..];
    if body.len() != payload {
        return Err(Error::Format(format!(
            "truncated payload: expected {payload} bytes, found {}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let w_img = Array2::from_shape_vec((d_img, dim), values[..n_img].to_vec())
        .map_err(|e| Error::Format(e.to_string()))?;
    let w_cap = Array2::from_shape_vec((d_cap, dim), values[n_img..].to_vec())
        .map_err(|e| Error::Format(e.to_string()))?;
    let model = ProjectionModel::new(w_img, w_cap)
        .map_err(|e| Error::Format(format!("invalid weights: {e}")))?
        .with_flags(normalize_image, normalize_caption, abs_embeddings);
    Ok(StoredModel {
        model,
        similarity,
        epoch,
        rsum,
    })
}

pub fn write_snapshot(stored: &StoredModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(stored)?)?;
    Ok(())
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<StoredModel> {
    decode(&fs::read(path)?)
}
