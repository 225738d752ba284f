//! Minimal NIfTI-1 single-file reader and writer.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{write_bytes, DataType, Decoded};
use crate::error::{Error, Result};
use crate::grid::{GridGeometry, LabelVolume, ScalarVolume};

const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
const DATA_OFFSET: usize = 352;

struct Fields<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[off..off + N]);
        if self.big_endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }

    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.arr(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.arr(off))
    }
}

fn datatype_from_code(code: i16) -> Option<DataType> {
    Some(match code {
        2 => DataType::U8,
        4 => DataType::I16,
        8 => DataType::I32,
        16 => DataType::F32,
        64 => DataType::F64,
        256 => DataType::I8,
        512 => DataType::U16,
        768 => DataType::U32,
        _ => return None,
    })
}

fn read_all(path: &Path, gz: bool) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !gz {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::format(path, format!("gzip stream: {e}")))?;
    Ok(out)
}

pub(crate) fn read(path: &Path, gz: bool) -> Result<Decoded> {
    let bytes = read_all(path, gz)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            needed: (HEADER_SIZE - bytes.len()) as u64,
        });
    }
    let big_endian = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        n => return Err(Error::format(path, format!("sizeof_hdr is {n}, not 348"))),
    };
    let h = Fields {
        bytes: &bytes,
        big_endian,
    };
    if &bytes[344..347] != b"n+1" {
        return Err(Error::format(path, "not a single-file NIfTI-1 volume (magic is not n+1)"));
    }

    let ndim_raw = h.i16(40);
    if !(1..=7).contains(&ndim_raw) {
        return Err(Error::format(path, format!("dim[0] = {ndim_raw} out of range")));
    }
    let mut dims: Vec<usize> = Vec::new();
    for k in 1..=ndim_raw as usize {
        let d = h.i16(40 + 2 * k);
        if d < 1 {
            return Err(Error::format(path, format!("dim[{k}] = {d}")));
        }
        dims.push(d as usize);
    }
    if dims.len() > 3 && dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::format(path, "time series and vector volumes are not supported"));
    }
    dims.truncate(3);
    while dims.len() > 2 && *dims.last().unwrap() == 1 {
        dims.pop();
    }
    if dims.len() < 2 {
        return Err(Error::format(path, "need a 2D or 3D volume"));
    }
    let nd = dims.len();

    let code = h.i16(70);
    let dtype = datatype_from_code(code)
        .ok_or_else(|| Error::format(path, format!("unsupported datatype code {code}")))?;
    let spacing: Vec<f64> = (1..=nd).map(|k| (h.f32(76 + 4 * k) as f64).abs()).collect();

    let qform = h.i16(252);
    let sform = h.i16(254);
    let origin: Vec<f64> = if qform > 0 {
        (0..nd).map(|k| h.f32(268 + 4 * k) as f64).collect()
    } else if sform > 0 {
        (0..nd).map(|k| h.f32(280 + 16 * k + 12) as f64).collect()
    } else {
        vec![0.0; nd]
    };

    let geometry = GridGeometry::new(&dims, &spacing, &origin).map_err(|e| Error::format(path, e.to_string()))?;

    let vox_offset = h.f32(108);
    if vox_offset.is_nan() || vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::format(path, format!("vox_offset {vox_offset} is invalid")));
    }
    let start = vox_offset as usize;
    let n = geometry.voxel_count();
    let end = start + n * dtype.size();
    if bytes.len() < end {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            needed: (end - bytes.len()) as u64,
        });
    }
    let data = Fields {
        bytes: &bytes[start..end],
        big_endian,
    };
    let sz = dtype.size();
    let mut values: Vec<f64> = (0..n)
        .map(|i| {
            let o = i * sz;
            match dtype {
                DataType::U8 => data.bytes[o] as f64,
                DataType::I8 => data.bytes[o] as i8 as f64,
                DataType::I16 => data.i16(o) as f64,
                DataType::U16 => u16::from_le_bytes(data.arr(o)) as f64,
                DataType::I32 => data.i32(o) as f64,
                DataType::U32 => u32::from_le_bytes(data.arr(o)) as f64,
                DataType::F32 => data.f32(o) as f64,
                DataType::F64 => f64::from_le_bytes(data.arr(o)),
            }
        })
        .collect();

    let slope = h.f32(112) as f64;
    let inter = h.f32(116) as f64;
    let mut dtype = dtype;
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut values {
            *v = slope * *v + inter;
        }
        // Scaled integers are intensities, not labels.
        dtype = DataType::F64;
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("voxel {i} is not finite")));
    }
    Ok(Decoded {
        geometry,
        dtype,
        values,
    })
}

fn header(g: &GridGeometry, code: i16, bitpix: i16) -> Vec<u8> {
    let mut b = vec![0u8; DATA_OFFSET];
    let put = |b: &mut Vec<u8>, off: usize, bytes: &[u8]| b[off..off + bytes.len()].copy_from_slice(bytes);
    put(&mut b, 0, &(HEADER_SIZE as i32).to_le_bytes());
    let nd = g.ndim();
    put(&mut b, 40, &(nd as i16).to_le_bytes());
    for k in 0..7 {
        let d = if k < nd { g.dim(k) as i16 } else { 1 };
        put(&mut b, 42 + 2 * k, &d.to_le_bytes());
    }
    put(&mut b, 70, &code.to_le_bytes());
    put(&mut b, 72, &bitpix.to_le_bytes());
    // pixdim[0] is the qform handedness factor.
    put(&mut b, 76, &1.0f32.to_le_bytes());
    for k in 0..7 {
        let s = if k < nd { g.spacing()[k] as f32 } else { 1.0 };
        put(&mut b, 80 + 4 * k, &s.to_le_bytes());
    }
    put(&mut b, 108, &(DATA_OFFSET as f32).to_le_bytes());
    put(&mut b, 112, &1.0f32.to_le_bytes());
    b[123] = 2; // millimetres
    put(&mut b, 252, &1i16.to_le_bytes());
    put(&mut b, 254, &1i16.to_le_bytes());
    let mut origin = [0.0f32; 3];
    let mut spacing = [1.0f32; 3];
    for k in 0..nd {
        origin[k] = g.origin()[k] as f32;
        spacing[k] = g.spacing()[k] as f32;
    }
    for k in 0..3 {
        put(&mut b, 268 + 4 * k, &origin[k].to_le_bytes());
        let mut row = [0.0f32; 4];
        row[k] = spacing[k];
        row[3] = origin[k];
        for (c, v) in row.iter().enumerate() {
            put(&mut b, 280 + 16 * k + 4 * c, &v.to_le_bytes());
        }
    }
    put(&mut b, 344, b"n+1\0");
    b
}

fn finish(path: &Path, bytes: Vec<u8>, gz: bool) -> Result<()> {
    if !gz {
        return write_bytes(path, &bytes);
    }
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let out = enc.finish().map_err(|e| Error::io(path, e))?;
    write_bytes(path, &out)
}

pub(crate) fn write_scalar(vol: &ScalarVolume, path: &Path, gz: bool) -> Result<()> {
    let mut b = header(vol.geometry(), 16, 32);
    b.reserve(vol.values().len() * 4);
    for (i, &v) in vol.values().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::InvalidInput(format!("voxel {i} value {v} does not fit in float32")));
        }
        b.extend_from_slice(&f.to_le_bytes());
    }
    finish(path, b, gz)
}

pub(crate) fn write_labels(vol: &LabelVolume, path: &Path, gz: bool) -> Result<()> {
    let mut b = header(vol.geometry(), 512, 16);
    b.reserve(vol.labels().len() * 2);
    for (i, &l) in vol.labels().iter().enumerate() {
        let v = u16::try_from(l)
            .map_err(|_| Error::InvalidInput(format!("label {l} at voxel {i} does not fit in uint16")))?;
        b.extend_from_slice(&v.to_le_bytes());
    }
    finish(path, b, gz)
}
