//! PNG slice previews.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::GridGeometry;
use crate::io::{write_bytes, VolumeData};

/// Colours for labels 1, 2, ...; label 0 is black and the table repeats.
const LABEL_COLORS: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn label_color(label: u32) -> [u8; 3] {
    if label == 0 {
        [0, 0, 0]
    } else {
        LABEL_COLORS[((label - 1) % LABEL_COLORS.len() as u32) as usize]
    }
}

/// Linear indices of the slice `axis = index`, rows of the remaining two axes.
fn slice_indices(g: &GridGeometry, axis: usize, index: usize) -> Result<(usize, usize, Vec<usize>)> {
    if axis > 2 {
        return Err(Error::InvalidInput(format!("slice axis {axis} must be 0, 1 or 2")));
    }
    let n = g.dim(axis);
    if index >= n {
        return Err(Error::InvalidInput(format!(
            "slice index {index} out of range for axis {axis} with {n} voxels"
        )));
    }
    let free: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (w, h) = (g.dim(free[0]), g.dim(free[1]));
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let mut idx = [0usize; 3];
            idx[axis] = index;
            idx[free[0]] = c;
            idx[free[1]] = r;
            out.push(g.linear_index(idx));
        }
    }
    Ok((w, h, out))
}

/// Encodes one slice: min-max windowed gray for intensities (uniform 128 when
/// constant), the fixed colour table for labels.
pub fn encode_slice(vol: &VolumeData, axis: usize, index: usize) -> Result<Vec<u8>> {
    let (g, color) = match vol {
        VolumeData::Scalar(s) => (s.geometry(), png::ColorType::Grayscale),
        VolumeData::Labels(l) => (l.geometry(), png::ColorType::Rgb),
    };
    let (w, h, idx) = slice_indices(g, axis, index)?;
    let pixels: Vec<u8> = match vol {
        VolumeData::Scalar(s) => {
            let vals: Vec<f64> = idx.iter().map(|&i| s.values()[i]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            vals.iter()
                .map(|&v| {
                    if hi > lo {
                        (255.0 * (v - lo) / (hi - lo)).round() as u8
                    } else {
                        128
                    }
                })
                .collect()
        }
        VolumeData::Labels(l) => idx.iter().flat_map(|&i| label_color(l.labels()[i])).collect(),
    };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(BufWriter::new(&mut buf), w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::NoFilter);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidInput(format!("png header: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::InvalidInput(format!("png data: {e}")))?;
    }
    Ok(buf)
}

pub fn render_preview(vol: &VolumeData, axis: usize, index: usize, out: &Path) -> Result<()> {
    let bytes = encode_slice(vol, axis, index)?;
    write_bytes(out, &bytes)
}
