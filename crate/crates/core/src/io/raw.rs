use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_bytes, write_json, DataType, Decoded};
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, LabelVolume, ScalarVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    /// `"float32"` or `"uint16"`.
    pub dtype: String,
}

/// Accepts either member of the pair and returns the header path.
pub(crate) fn header_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub(crate) fn data_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

pub(crate) fn read(header_file: &Path) -> Result<Decoded> {
    let header: RawHeader = super::read_json(header_file)?;
    let dtype = match header.dtype.as_str() {
        "float32" => DataType::F32,
        "uint16" => DataType::U16,
        other => {
            return Err(Error::format(
                header_file,
                format!("unsupported dtype {other:?} (expected float32 or uint16)"),
            ))
        }
    };
    let geometry = GridGeometry::new(&header.dims, &header.spacing, &header.origin)
        .map_err(|e| Error::format(header_file, e.to_string()))?;
    let data_file = data_path(header_file);
    let bytes = fs::read(&data_file).map_err(|e| Error::io(&data_file, e))?;
    let needed = geometry.voxel_count() * dtype.size();
    if bytes.len() < needed {
        return Err(Error::Truncated {
            path: data_file,
            offset: bytes.len() as u64,
            needed: (needed - bytes.len()) as u64,
        });
    }
    if bytes.len() > needed {
        return Err(Error::format(
            &data_file,
            format!("{} trailing bytes after {} samples", bytes.len() - needed, geometry.voxel_count()),
        ));
    }
    let values = match dtype {
        DataType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
    };
    Ok(Decoded {
        geometry,
        dtype,
        values,
    })
}

fn header_for(g: &GridGeometry, dtype: &str) -> RawHeader {
    RawHeader {
        dims: g.dims().to_vec(),
        spacing: g.spacing().to_vec(),
        origin: g.origin().to_vec(),
        dtype: dtype.to_string(),
    }
}

pub(crate) fn write_scalar(vol: &ScalarVolume, header_file: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(vol.values().len() * 4);
    for (i, &v) in vol.values().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidInput(format!("voxel {i} value {v} does not fit in float32")));
        }
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    write_json(&header_for(vol.geometry(), "float32"), header_file)?;
    write_bytes(&data_path(header_file), &bytes)
}

pub(crate) fn write_labels(vol: &LabelVolume, header_file: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(vol.labels().len() * 2);
    for (i, &l) in vol.labels().iter().enumerate() {
        let v = u16::try_from(l)
            .map_err(|_| Error::InvalidInput(format!("label {l} at voxel {i} does not fit in uint16")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_json(&header_for(vol.geometry(), "uint16"), header_file)?;
    write_bytes(&data_path(header_file), &bytes)
}
