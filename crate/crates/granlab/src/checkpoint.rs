//! Binary checkpoint format for [`MoeLayer`].
//!
//! Byte layout:
//!
//! | offset      | size | content                                        |
//! |-------------|------|------------------------------------------------|
//! | 0           | 8    | magic `GRANLAB\0`                              |
//! | 8           | 8    | header length `L`, u64 little-endian           |
//! | 16          | L    | UTF-8 JSON header ([`CheckpointHeader`])       |
//! | 16 + L      | 8·N  | f64 little-endian payload                      |
//!
//! The payload holds, in order: the `m × d` routing matrix, the length-`m`
//! bias, `A_1 … A_m` (each `d × w`) and `B_1 … B_m` (each `d × w`). Every
//! matrix is stored column-major. The header's `arrays` field repeats this
//! order with shapes, so a reader never has to infer it.

use std::fs;
use std::io::Write;
use std::path::Path;

use granlab_core::moe::{MoeConfig, MoeLayer};
use granlab_core::Matrix;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"GRANLAB\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("bad header: {0}")]
    Header(String),
    #[error("layer rejected: {0}")]
    Layer(#[from] granlab_core::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub endianness: String,
    pub layout: String,
    pub config: MoeConfig,
    pub arrays: Vec<ArraySpec>,
    pub provenance: Provenance,
}

fn array_specs(config: &MoeConfig) -> Vec<ArraySpec> {
    let MoeConfig { m, w, d, .. } = *config;
    let mut out = vec![
        ArraySpec { name: "routing".into(), rows: m, cols: d },
        ArraySpec { name: "bias".into(), rows: m, cols: 1 },
    ];
    for prefix in ["A", "B"] {
        for j in 1..=m {
            out.push(ArraySpec { name: format!("{prefix}{j}"), rows: d, cols: w });
        }
    }
    out
}

pub fn to_bytes(layer: &MoeLayer, provenance: Provenance) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        endianness: "little".into(),
        layout: "column-major".into(),
        config: layer.config,
        arrays: array_specs(&layer.config),
        provenance,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |vals: &[f64]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    put(&layer.routing.to_col_major());
    put(&layer.bias);
    for mat in layer.a.iter().chain(&layer.b) {
        put(&mat.to_col_major());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(MoeLayer, CheckpointHeader), CheckpointError> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated("preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = len.checked_add(16).ok_or(CheckpointError::Truncated("header"))?;
    let body = bytes.get(16..end).ok_or(CheckpointError::Truncated("header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.endianness != "little" || header.layout != "column-major" {
        return Err(CheckpointError::Header("unsupported endianness or layout".into()));
    }
    if header.arrays != array_specs(&header.config) {
        return Err(CheckpointError::Header("array list does not match config".into()));
    }
    let payload = &bytes[end..];
    let expected: usize = header.arrays.iter().map(|a| a.rows * a.cols).sum();
    if payload.len() != 8 * expected {
        return Err(CheckpointError::Truncated("payload"));
    }
    let mut vals = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |spec: &ArraySpec| {
        let data: Vec<f64> = vals.by_ref().take(spec.rows * spec.cols).collect();
        Matrix::from_col_major(spec.rows, spec.cols, &data)
    };
    let routing = take(&header.arrays[0]);
    let bias = take(&header.arrays[1]).into_vec();
    let m = header.config.m;
    let a: Vec<Matrix> = header.arrays[2..2 + m].iter().map(&mut take).collect();
    let b: Vec<Matrix> = header.arrays[2 + m..].iter().map(&mut take).collect();
    let layer = MoeLayer::new(header.config, routing, bias, a, b)?;
    Ok((layer, header))
}

pub fn write_checkpoint(path: &Path, layer: &MoeLayer, provenance: Provenance) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&to_bytes(layer, provenance)).map_err(io)
}

pub fn read_checkpoint(path: &Path) -> Result<(MoeLayer, CheckpointHeader), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    from_bytes(&bytes)
}
