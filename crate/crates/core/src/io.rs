//! Binary tensor files and JSON helpers.
//!
//! Tensor layout: magic `GRIT`, `u32` version (1), `u32` ndim, `ndim × u32`
//! dims, then `product(dims)` little-endian `f32` values in row-major order.
//! All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::map::{Image, LabelMap, ProbabilityMap};

pub const MAGIC: &[u8; 4] = b"GRIT";
pub const VERSION: u32 = 1;

/// A decoded tensor: dims plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensor(dims: &[usize], data: impl IntoIterator<Item = f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * dims.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::format(path, reason);
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad("truncated header"))
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = word(4)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let ndim = word(8)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        dims.push(word(12 + 4 * i)? as usize);
    }
    let header = 12 + 4 * ndim;
    let count: usize = dims.iter().product();
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| bad("dims overflow"))?;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "payload is {} bytes, dims {dims:?} need {}",
            bytes.len().saturating_sub(header),
            count * 4
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor { dims, data })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn save_tensor(path: &Path, dims: &[usize], data: impl IntoIterator<Item = f32>) -> Result<()> {
    write_atomic(path, &encode_tensor(dims, data))
}

pub fn load_tensor_raw(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?, path)
}

/// Writes `map` as an `H × W × C` tensor. Values are stored as `f32`.
pub fn save_map(map: &ProbabilityMap, path: &Path) -> Result<()> {
    save_tensor(
        path,
        &[map.height(), map.width(), map.channels()],
        map.data().iter().map(|&v| v as f32),
    )
}

pub fn load_map(path: &Path) -> Result<ProbabilityMap> {
    let t = load_tensor_raw(path)?;
    let [h, w, c] = t.dims[..] else {
        return Err(Error::format(
            path,
            format!("expected 3 dims, got {:?}", t.dims),
        ));
    };
    ProbabilityMap::new(h, w, c, t.data.into_iter().map(f64::from).collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    save_tensor(
        path,
        &[img.height, img.width, img.channels],
        img.data.iter().map(|&v| v as f32),
    )
}

pub fn load_image(path: &Path) -> Result<Image> {
    let t = load_tensor_raw(path)?;
    let [h, w, c] = t.dims[..] else {
        return Err(Error::format(
            path,
            format!("expected 3 dims, got {:?}", t.dims),
        ));
    };
    Image::new(h, w, c, t.data.into_iter().map(f64::from).collect())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Label maps are stored as `H × W` tensors of class ids.
pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    save_tensor(
        path,
        &[labels.height(), labels.width()],
        labels.data().iter().map(|&v| v as f32),
    )
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let t = load_tensor_raw(path)?;
    let [h, w] = t.dims[..] else {
        return Err(Error::format(
            path,
            format!("expected 2 dims, got {:?}", t.dims),
        ));
    };
    let data = t
        .data
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::format(
                    path,
                    format!("label value {v} is not a class id"),
                ))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(h, w, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn from_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// Homographies in JSON: the 72-byte little-endian row-major encoding as
/// hex (authoritative) next to readable rows.
pub mod homography_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::geometry::Homography;

    #[derive(Serialize, Deserialize)]
    struct Repr {
        le_f64: String,
        rows: [[f64; 3]; 3],
    }

    pub fn serialize<S: Serializer>(h: &Homography, s: S) -> Result<S::Ok, S::Error> {
        Repr {
            le_f64: super::to_hex(&h.to_le_bytes()),
            rows: h.rows(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Homography, D::Error> {
        let repr = Repr::deserialize(d)?;
        let bytes = super::from_hex(&repr.le_f64)
            .ok_or_else(|| serde::de::Error::custom("homography hex is malformed"))?;
        Homography::from_le_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}
