//! Per-frame dense map files (teacher predictions and ground-truth depth).
//!
//! Layout, little-endian: `b"STDM"`, u32 version, u32 height, u32 width,
//! u32 kind (0 = inverse depth, 1 = depth), then `height·width` f32 values in
//! row-major order. A value of 0 marks an invalid pixel.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"STDM";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    InverseDepth,
    Depth,
}

impl MapKind {
    fn code(self) -> u32 {
        match self {
            MapKind::InverseDepth => 0,
            MapKind::Depth => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(MapKind::InverseDepth),
            1 => Some(MapKind::Depth),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFile {
    pub kind: MapKind,
    pub values: Array2<f32>,
}

pub fn encode_map(kind: MapKind, values: &Array2<f32>) -> Vec<u8> {
    let (h, w) = values.dim();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * h * w);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, h as u32, w as u32, kind.code()] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_map(bytes: &[u8], path: &Path) -> Result<MapFile> {
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not a map file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != VERSION {
        return Err(bad(&format!("unsupported map version {}", word(0))));
    }
    let (h, w) = (word(1) as usize, word(2) as usize);
    let kind = MapKind::from_code(word(3)).ok_or_else(|| bad("unknown map kind"))?;
    if bytes.len() != HEADER_LEN + 4 * h * w {
        return Err(bad(&format!("expected {}×{} values", h, w)));
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array2::from_shape_vec((h, w), data).expect("length checked above");
    Ok(MapFile { kind, values })
}

pub fn write_map(path: &Path, kind: MapKind, values: &Array2<f32>) -> Result<()> {
    std::fs::write(path, encode_map(kind, values)).map_err(|e| Error::io(path, e))
}

pub fn read_map(path: &Path) -> Result<MapFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_map(&bytes, path)
}
