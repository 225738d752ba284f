//! Volume file formats.
//!
//! * NIfTI-1 single-file volumes (`.nii`, `.nii.gz`).
//! * A raw format: a JSON header (`name.json`) with `dims`, `spacing`,
//!   `origin` and `dtype`, next to `name.raw` holding little-endian `float32`
//!   (images) or `uint16` (labels) samples, first axis fastest.

mod nifti;
mod raw;

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, LabelVolume, ScalarVolume};

pub use raw::RawHeader;

/// Sample type as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl DataType {
    pub fn is_integer(self) -> bool {
        !matches!(self, DataType::F32 | DataType::F64)
    }

    pub fn name(self) -> &'static str {
        match self {
            DataType::U8 => "uint8",
            DataType::I8 => "int8",
            DataType::I16 => "int16",
            DataType::U16 => "uint16",
            DataType::I32 => "int32",
            DataType::U32 => "uint32",
            DataType::F32 => "float32",
            DataType::F64 => "float64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DataType::U8 | DataType::I8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::I32 | DataType::U32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Raw,
    Nifti,
    NiftiGz,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        if name.ends_with(".nii.gz") {
            Ok(VolumeFormat::NiftiGz)
        } else if name.ends_with(".nii") {
            Ok(VolumeFormat::Nifti)
        } else if name.ends_with(".json") || name.ends_with(".raw") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::format(path, "unrecognised volume extension (expected .nii, .nii.gz or .json)"))
        }
    }

    /// File suffix including the leading dot.
    pub fn suffix(self) -> &'static str {
        match self {
            VolumeFormat::Raw => ".json",
            VolumeFormat::Nifti => ".nii",
            VolumeFormat::NiftiGz => ".nii.gz",
        }
    }
}

/// Samples as read from disk, widened to `f64` (exact for every supported type).
#[derive(Debug, Clone)]
pub(crate) struct Decoded {
    pub geometry: GridGeometry,
    pub dtype: DataType,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum VolumeData {
    Scalar(ScalarVolume),
    Labels(LabelVolume),
}

#[derive(Debug, Clone)]
pub struct VolumeInfo {
    pub geometry: GridGeometry,
    pub dtype: DataType,
    pub format: VolumeFormat,
}

fn decode(path: &Path) -> Result<(Decoded, VolumeFormat)> {
    let format = VolumeFormat::from_path(path)?;
    let d = match format {
        VolumeFormat::Raw => raw::read(&raw::header_path(path))?,
        VolumeFormat::Nifti | VolumeFormat::NiftiGz => nifti::read(path, format == VolumeFormat::NiftiGz)?,
    };
    Ok((d, format))
}

pub fn inspect_volume(path: &Path) -> Result<VolumeInfo> {
    let (d, format) = decode(path)?;
    Ok(VolumeInfo {
        geometry: d.geometry,
        dtype: d.dtype,
        format,
    })
}

/// Loads any supported volume: integer types become labels, floats scalars.
pub fn load_volume(path: &Path) -> Result<VolumeData> {
    let (d, _) = decode(path)?;
    if d.dtype.is_integer() {
        labels_from(d, path).map(VolumeData::Labels)
    } else {
        ScalarVolume::new(d.geometry, d.values)
            .map(VolumeData::Scalar)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Loads a volume as scalar intensities, whatever its stored type.
pub fn load_scalar(path: &Path) -> Result<ScalarVolume> {
    let (d, _) = decode(path)?;
    ScalarVolume::new(d.geometry, d.values).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads a segmentation; every sample must be a non-negative integer.
pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let (d, _) = decode(path)?;
    labels_from(d, path)
}

fn labels_from(d: Decoded, path: &Path) -> Result<LabelVolume> {
    let mut labels = Vec::with_capacity(d.values.len());
    for (i, &v) in d.values.iter().enumerate() {
        if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
            return Err(Error::format(path, format!("voxel {i} holds {v}, not a non-negative integer label")));
        }
        labels.push(v as u32);
    }
    LabelVolume::new(d.geometry, labels).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_scalar(vol: &ScalarVolume, path: &Path) -> Result<()> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => raw::write_scalar(vol, &raw::header_path(path)),
        f @ (VolumeFormat::Nifti | VolumeFormat::NiftiGz) => {
            nifti::write_scalar(vol, path, f == VolumeFormat::NiftiGz)
        }
    }
}

pub fn save_labels(vol: &LabelVolume, path: &Path) -> Result<()> {
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => raw::write_labels(vol, &raw::header_path(path)),
        f @ (VolumeFormat::Nifti | VolumeFormat::NiftiGz) => {
            nifti::write_labels(vol, path, f == VolumeFormat::NiftiGz)
        }
    }
}

/// All files making up a stored volume (the header and data pair for raw volumes).
pub fn volume_files(path: &Path) -> Result<Vec<PathBuf>> {
    Ok(match VolumeFormat::from_path(path)? {
        VolumeFormat::Raw => {
            let h = raw::header_path(path);
            vec![h.clone(), raw::data_path(&h)]
        }
        _ => vec![path.to_path_buf()],
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
