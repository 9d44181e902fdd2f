//! The `VSEF` binary feature file.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VSEF"
//! 4       4     version (u32 LE, = 1)
//! 8       4     n_images (u32 LE)
//! 12      4     d_img (u32 LE)
//! 16      4     d_cap (u32 LE)
//! 20      4     cpi (u32 LE)
//! 24      ...   n_images × d_img f32 LE, row-major image features
//! ...     ...   (n_images·cpi) × d_cap f32 LE, row-major caption features
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::PairedFeatureSet;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VSEF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn write_features(set: &PairedFeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(set)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<PairedFeatureSet> {
    decode(&fs::read(path)?)
}

fn header_field(name: &str, value: usize) -> Result<u32> {
    u32::try_from(value).map_err(|_| {
        Error::Format(format!(
            "dimension overflow: {name}={value} does not fit in u32"
        ))
    })
}

pub(crate) fn encode(set: &PairedFeatureSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(
        HEADER_LEN + 4 * (set.image_features().len() + set.caption_features().len()),
    );
    out.extend_from_slice(&MAGIC);
    for (name, v) in [
        ("version", VERSION as usize),
        ("n_images", set.n_images()),
        ("d_img", set.d_img()),
        ("d_cap", set.d_cap()),
        ("cpi", set.cpi()),
    ] {
        out.extend_from_slice(&header_field(name, v)?.to_le_bytes());
    }
    for &x in set.image_features().iter().chain(set.caption_features()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<PairedFeatureSet> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        return Err(Error::Format(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let field =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = field(0);
    if version != VERSION {
        return Err(Error::Format(format!(
            "version mismatch: file has {version}, expected {VERSION}"
        )));
    }
    let [n_images, d_img, d_cap, cpi] =
        [field(1), field(2), field(3), field(4)].map(|v| v as usize);
    for (name, v) in [
        ("n_images", n_images),
        ("d_img", d_img),
        ("d_cap", d_cap),
        ("cpi", cpi),
    ] {
        if v == 0 {
            return Err(Error::Format(format!("{name} is zero")));
        }
    }
    let overflow = |name: &str| {
        Error::Format(format!(
            "dimension overflow: {name} payload size does not fit in memory"
        ))
    };
    let n_img_values = n_images
        .checked_mul(d_img)
        .ok_or_else(|| overflow("image"))?;
    let n_cap_values = n_images
        .checked_mul(cpi)
        .and_then(|x| x.checked_mul(d_cap))
        .ok_or_else(|| overflow("caption"))?;
    let payload = n_img_values
        .checked_add(n_cap_values)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| overflow("total"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::Format(format!(
            "truncated payload: expected {payload} bytes, found {}",
            body.len()
        )));
    }
    if body.len() > payload {
        return Err(Error::Format(format!(
            "trailing bytes: {} after the declared payload",
            body.len() - payload
        )));
    }
    let floats: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (img, cap) = floats.split_at(n_img_values);
    PairedFeatureSet::new(n_images, d_img, d_cap, cpi, img.to_vec(), cap.to_vec())
        .map_err(|e| Error::Format(format!("invalid payload: {e}")))
}
