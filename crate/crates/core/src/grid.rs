//! Regular-grid volumes, Catmull-Rom / nearest-neighbour sampling and warping.
//!
//! All containers store voxels with the first axis varying fastest (the NIfTI
//! order). Two-dimensional grids are represented with a unit third axis that
//! never takes part in interpolation, so every point and vector is a `[f64; 3]`
//! whose third component is zero in 2D.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Physical point or vector (mm). The third component is zero on 2D grids.
pub type Point = [f64; 3];

/// Smallest extent per axis; the cubic stencil needs four samples.
pub const MIN_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryRecord", into = "GeometryRecord")]
pub struct GridGeometry {
    ndim: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct GeometryRecord {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

impl TryFrom<GeometryRecord> for GridGeometry {
    type Error = Error;

    fn try_from(r: GeometryRecord) -> Result<Self> {
        GridGeometry::new(&r.dims, &r.spacing, &r.origin)
    }
}

impl From<GridGeometry> for GeometryRecord {
    fn from(g: GridGeometry) -> Self {
        GeometryRecord {
            dims: g.dims().to_vec(),
            spacing: g.spacing().to_vec(),
            origin: g.origin().to_vec(),
        }
    }
}

impl GridGeometry {
    pub fn new(dims: &[usize], spacing: &[f64], origin: &[f64]) -> Result<Self> {
        let ndim = dims.len();
        if !(2..=3).contains(&ndim) {
            return Err(Error::InvalidGeometry(format!(
                "expected 2 or 3 axes, got {ndim}"
            )));
        }
        if spacing.len() != ndim || origin.len() != ndim {
            return Err(Error::InvalidGeometry(format!(
                "dims has {ndim} axes but spacing has {} and origin {}",
                spacing.len(),
                origin.len()
            )));
        }
        let mut g = GridGeometry {
            ndim,
            dims: [1; 3],
            spacing: [1.0; 3],
            origin: [0.0; 3],
        };
        for a in 0..ndim {
            if dims[a] < MIN_DIM {
                return Err(Error::InvalidGeometry(format!(
                    "axis {a} has {} voxels, need at least {MIN_DIM}",
                    dims[a]
                )));
            }
            if !(spacing[a].is_finite() && spacing[a] > 0.0) {
                return Err(Error::InvalidGeometry(format!(
                    "axis {a} spacing {} is not a positive finite number",
                    spacing[a]
                )));
            }
            if !origin[a].is_finite() {
                return Err(Error::InvalidGeometry(format!("axis {a} origin is not finite")));
            }
            g.dims[a] = dims[a];
            g.spacing[a] = spacing[a];
            g.origin[a] = origin[a];
        }
        Ok(g)
    }

    /// Unit spacing, zero origin.
    pub fn unit(dims: &[usize]) -> Result<Self> {
        let n = dims.len();
        GridGeometry::new(dims, &vec![1.0; n], &vec![0.0; n])
    }

    pub fn ndim(&self) -> usize {
        self.ndim
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.ndim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing[..self.ndim]
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin[..self.ndim]
    }

    /// Extent along axis `a`, 1 for axes beyond `ndim`.
    #[inline]
    pub fn dim(&self, a: usize) -> usize {
        self.dims[a]
    }

    #[inline]
    pub(crate) fn spacing3(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    #[inline]
    pub fn voxel_index(&self, lin: usize) -> [usize; 3] {
        let i = lin % self.dims[0];
        let rest = lin / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Continuous index coordinates to physical position.
    #[inline]
    pub fn index_to_physical(&self, u: [f64; 3]) -> Point {
        let mut p = [0.0; 3];
        for a in 0..self.ndim {
            p[a] = self.origin[a] + u[a] * self.spacing[a];
        }
        p
    }

    #[inline]
    pub fn physical_to_index(&self, p: Point) -> [f64; 3] {
        let mut u = [0.0; 3];
        for a in 0..self.ndim {
            u[a] = (p[a] - self.origin[a]) / self.spacing[a];
        }
        u
    }

    #[inline]
    pub fn voxel_center(&self, lin: usize) -> Point {
        let idx = self.voxel_index(lin);
        self.index_to_physical([idx[0] as f64, idx[1] as f64, idx[2] as f64])
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing().iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn ensure_same(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }
}

/// Catmull-Rom weights for the taps at offsets -1, 0, 1, 2 and fractional part `t`.
#[inline]
pub(crate) fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

#[inline]
pub(crate) fn catmull_rom_derivatives(t: f64) -> [f64; 4] {
    let t2 = t * t;
    [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ]
}

#[derive(Clone, Copy)]
struct AxisStencil {
    idx: [usize; 4],
    w: [f64; 4],
    dw: [f64; 4],
    len: usize,
}

impl AxisStencil {
    const UNIT: AxisStencil = AxisStencil {
        idx: [0; 4],
        w: [1.0, 0.0, 0.0, 0.0],
        dw: [0.0; 4],
        len: 1,
    };

    /// Stencil for index coordinate `u` on an axis of `n` samples, clamping `u`
    /// to `[0, n-1]` and replicating edge samples.
    #[inline]
    fn new(u: f64, n: usize) -> AxisStencil {
        let last = (n - 1) as f64;
        let (uc, clamped) = if u < 0.0 {
            (0.0, true)
        } else if u > last {
            (last, true)
        } else {
            (u, false)
        };
        let i0 = (uc.floor() as usize).min(n - 1);
        let t = uc - i0 as f64;
        let base = i0 as isize - 1;
        let mut idx = [0usize; 4];
        for (o, slot) in idx.iter_mut().enumerate() {
            *slot = (base + o as isize).clamp(0, n as isize - 1) as usize;
        }
        let w = if t == 0.0 {
            [0.0, 1.0, 0.0, 0.0]
        } else {
            catmull_rom_weights(t)
        };
        let dw = if clamped {
            [0.0; 4]
        } else {
            catmull_rom_derivatives(t)
        };
        AxisStencil { idx, w, dw, len: 4 }
    }
}

fn stencils(dims: [usize; 3], ndim: usize, u: [f64; 3]) -> [AxisStencil; 3] {
    let mut s = [AxisStencil::UNIT; 3];
    for a in 0..ndim {
        s[a] = AxisStencil::new(u[a], dims[a]);
    }
    s
}

/// Adds `term` to `acc`, taking the first term verbatim so that a lone
/// contributing sample is reproduced bit-for-bit (including negative zero).
#[inline]
fn accumulate(acc: &mut Option<f64>, term: f64) {
    *acc = Some(match *acc {
        None => term,
        Some(v) => v + term,
    });
}

/// Catmull-Rom value at index coordinates `u` for data fetched through `fetch`.
/// Zero-weight taps are skipped so grid nodes return stored values exactly.
fn cubic_value(g: &GridGeometry, u: [f64; 3], fetch: impl Fn(usize) -> f64) -> f64 {
    let s = stencils(g.dims, g.ndim, u);
    let mut vol_acc = None;
    for kz in 0..s[2].len {
        let wz = s[2].w[kz];
        if wz == 0.0 {
            continue;
        }
        let mut plane_acc = None;
        for jy in 0..s[1].len {
            let wy = s[1].w[jy];
            if wy == 0.0 {
                continue;
            }
            let row_base = g.dims[0] * (s[1].idx[jy] + g.dims[1] * s[2].idx[kz]);
            let mut row_acc = None;
            for ix in 0..s[0].len {
                let wx = s[0].w[ix];
                if wx == 0.0 {
                    continue;
                }
                accumulate(&mut row_acc, wx * fetch(row_base + s[0].idx[ix]));
            }
            accumulate(&mut plane_acc, wy * row_acc.unwrap_or(0.0));
        }
        accumulate(&mut vol_acc, wz * plane_acc.unwrap_or(0.0));
    }
    vol_acc.unwrap_or(0.0)
}

/// Derivative of the Catmull-Rom interpolant with respect to index coordinates.
fn cubic_index_gradient(g: &GridGeometry, u: [f64; 3], fetch: impl Fn(usize) -> f64) -> [f64; 3] {
    let s = stencils(g.dims, g.ndim, u);
    let mut grad = [0.0; 3];
    for kz in 0..s[2].len {
        let (wz, dwz) = (s[2].w[kz], s[2].dw[kz]);
        for jy in 0..s[1].len {
            let (wy, dwy) = (s[1].w[jy], s[1].dw[jy]);
            let row_base = g.dims[0] * (s[1].idx[jy] + g.dims[1] * s[2].idx[kz]);
            let (mut rv, mut rd) = (0.0, 0.0);
            for ix in 0..s[0].len {
                let f = fetch(row_base + s[0].idx[ix]);
                rv += s[0].w[ix] * f;
                rd += s[0].dw[ix] * f;
            }
            grad[0] += rd * wy * wz;
            grad[1] += rv * dwy * wz;
            grad[2] += rv * wy * dwz;
        }
    }
    grad
}

/// Scalar image or template on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScalarRecord", into = "ScalarRecord")]
pub struct ScalarVolume {
    geometry: GridGeometry,
    values: Vec<f64>,
    lo: f64,
    hi: f64,
}

#[derive(Serialize, Deserialize)]
struct ScalarRecord {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl TryFrom<ScalarRecord> for ScalarVolume {
    type Error = Error;

    fn try_from(r: ScalarRecord) -> Result<Self> {
        ScalarVolume::new(r.geometry, r.values)
    }
}

impl From<ScalarVolume> for ScalarRecord {
    fn from(v: ScalarVolume) -> Self {
        ScalarRecord {
            geometry: v.geometry,
            values: v.values,
        }
    }
}

impl ScalarVolume {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.voxel_count() {
            return Err(Error::InvalidInput(format!(
                "{} values for a grid of {} voxels",
                values.len(),
                geometry.voxel_count()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value at voxel {i}")));
        }
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(ScalarVolume {
            geometry,
            values,
            lo,
            hi,
        })
    }

    pub fn filled(geometry: GridGeometry, value: f64) -> Result<Self> {
        let n = geometry.voxel_count();
        ScalarVolume::new(geometry, vec![value; n])
    }

    /// Evaluates `f` at every voxel centre.
    pub fn from_fn(geometry: GridGeometry, f: impl Fn(Point) -> f64) -> Result<Self> {
        let values = (0..geometry.voxel_count())
            .map(|i| f(geometry.voxel_center(i)))
            .collect();
        ScalarVolume::new(geometry, values)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Smallest and largest stored value.
    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Catmull-Rom interpolant at index coordinates. The result is limited to
    /// the stored value range so interpolation never overshoots the data.
    #[inline]
    pub fn sample_index(&self, u: [f64; 3]) -> f64 {
        let v = cubic_value(&self.geometry, u, |i| self.values[i]);
        v.clamp(self.lo, self.hi)
    }

    /// Value and physical-space gradient at index coordinates; the gradient is
    /// zero wherever the range limit is active.
    #[inline]
    pub fn sample_index_with_gradient(&self, u: [f64; 3]) -> (f64, [f64; 3]) {
        let raw = cubic_value(&self.geometry, u, |i| self.values[i]);
        if raw < self.lo || raw > self.hi {
            return (raw.clamp(self.lo, self.hi), [0.0; 3]);
        }
        let gi = cubic_index_gradient(&self.geometry, u, |i| self.values[i]);
        let sp = self.geometry.spacing3();
        let mut g = [0.0; 3];
        for a in 0..self.geometry.ndim() {
            g[a] = gi[a] / sp[a];
        }
        (raw, g)
    }

    pub fn sample_cubic(&self, p: Point) -> f64 {
        self.sample_index(self.geometry.physical_to_index(p))
    }

    /// Spatial gradient of the cubic interpolant, per mm.
    pub fn gradient(&self, p: Point) -> [f64; 3] {
        self.sample_index_with_gradient(self.geometry.physical_to_index(p))
            .1
    }

    /// Sum of squared voxel differences.
    pub fn sum_sq_diff(&self, other: &ScalarVolume) -> Result<f64> {
        self.geometry.ensure_same(&other.geometry, "sum_sq_diff")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

pub fn sample_cubic(vol: &ScalarVolume, p: Point) -> f64 {
    vol.sample_cubic(p)
}

pub fn image_gradient(vol: &ScalarVolume, p: Point) -> [f64; 3] {
    vol.gradient(p)
}

/// Integer segmentation on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVolume {
    geometry: GridGeometry,
    labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(geometry: GridGeometry, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != geometry.voxel_count() {
            return Err(Error::InvalidInput(format!(
                "{} labels for a grid of {} voxels",
                labels.len(),
                geometry.voxel_count()
            )));
        }
        Ok(LabelVolume { geometry, labels })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Nearest voxel label at index coordinates; ties go to the lower index and
    /// out-of-domain positions clamp to the boundary voxel.
    #[inline]
    pub fn sample_index(&self, u: [f64; 3]) -> u32 {
        let g = &self.geometry;
        let mut idx = [0usize; 3];
        for a in 0..g.ndim() {
            let last = (g.dim(a) - 1) as f64;
            let r = (u[a] - 0.5).ceil().clamp(0.0, last);
            idx[a] = r as usize;
        }
        self.labels[g.linear_index(idx)]
    }

    pub fn sample_nearest(&self, p: Point) -> u32 {
        self.sample_index(self.geometry.physical_to_index(p))
    }

    /// Distinct labels present, ascending.
    pub fn label_set(&self) -> Vec<u32> {
        let mut s = self.labels.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

pub fn sample_nearest(labels: &LabelVolume, p: Point) -> u32 {
    labels.sample_nearest(p)
}

/// Dense per-voxel displacement in mm; `x -> x + d(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    geometry: GridGeometry,
    vectors: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.voxel_count();
        DisplacementField {
            geometry,
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn new(geometry: GridGeometry, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != geometry.voxel_count() {
            return Err(Error::InvalidInput(format!(
                "{} vectors for a grid of {} voxels",
                vectors.len(),
                geometry.voxel_count()
            )));
        }
        if vectors.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite displacement".into()));
        }
        let mut vectors = vectors;
        for v in &mut vectors {
            for c in v.iter_mut().skip(geometry.ndim()) {
                *c = 0.0;
            }
        }
        Ok(DisplacementField { geometry, vectors })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    /// Largest displacement magnitude in mm.
    pub fn max_norm(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Largest displacement measured in voxels of the finest axis.
    pub fn max_norm_voxels(&self) -> f64 {
        self.max_norm() / self.geometry.min_spacing()
    }

    /// Cubic interpolation of the displacement at index coordinates.
    pub fn sample_index(&self, u: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (c, slot) in out.iter_mut().enumerate().take(self.geometry.ndim()) {
            *slot = cubic_value(&self.geometry, u, |i| self.vectors[i][c]);
        }
        out
    }

    pub fn negated(&self) -> DisplacementField {
        DisplacementField {
            geometry: self.geometry.clone(),
            vectors: self
                .vectors
                .iter()
                .map(|v| [-v[0], -v[1], -v[2]])
                .collect(),
        }
    }

    /// SHA-256 over the little-endian components, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in self.geometry.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in &self.vectors {
            for c in &v[..self.geometry.ndim()] {
                h.update(c.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Index coordinates that voxel `lin` is mapped to.
    #[inline]
    pub(crate) fn target_index(&self, lin: usize) -> [f64; 3] {
        let idx = self.geometry.voxel_index(lin);
        let sp = self.geometry.spacing3();
        let d = self.vectors[lin];
        let mut u = [idx[0] as f64, idx[1] as f64, idx[2] as f64];
        for a in 0..self.geometry.ndim() {
            u[a] += d[a] / sp[a];
        }
        u
    }
}

/// `output(x) = vol(x + d(x))` with cubic interpolation.
///
/// Works in index space so that a zero displacement lands exactly on the grid
/// nodes and reproduces the input bit-for-bit.
pub fn warp_image(vol: &ScalarVolume, d: &DisplacementField) -> Result<ScalarVolume> {
    vol.geometry.ensure_same(&d.geometry, "warp_image")?;
    let values: Vec<f64> = (0..vol.geometry.voxel_count())
        .into_par_iter()
        .map(|lin| vol.sample_index(d.target_index(lin)))
        .collect();
    ScalarVolume::new(vol.geometry.clone(), values)
}

/// `output(x) = labels(x + d(x))` with nearest-neighbour lookup.
pub fn warp_labels(labels: &LabelVolume, d: &DisplacementField) -> Result<LabelVolume> {
    labels.geometry.ensure_same(&d.geometry, "warp_labels")?;
    let out: Vec<u32> = (0..labels.geometry.voxel_count())
        .into_par_iter()
        .map(|lin| labels.sample_index(d.target_index(lin)))
        .collect();
    LabelVolume::new(labels.geometry.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom2(n: usize) -> GridGeometry {
        GridGeometry::unit(&[n, n]).unwrap()
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(GridGeometry::unit(&[3, 8]).is_err());
        assert!(GridGeometry::unit(&[8]).is_err());
        assert!(GridGeometry::new(&[8, 8], &[1.0, 0.0], &[0.0, 0.0]).is_err());
        assert!(GridGeometry::new(&[8, 8, 8], &[1.0, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn index_round_trip() {
        let g = GridGeometry::unit(&[5, 6, 7]).unwrap();
        for lin in 0..g.voxel_count() {
            assert_eq!(g.linear_index(g.voxel_index(lin)), lin);
        }
    }

    #[test]
    fn catmull_rom_weights_partition_unity() {
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let w = catmull_rom_weights(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            // Linear reproduction: sum w_o * o == t for offsets -1..2.
            let lin: f64 = w.iter().enumerate().map(|(o, w)| w * (o as f64 - 1.0)).sum();
            assert!((lin - t).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_volume_samples_constant() {
        let v = ScalarVolume::filled(geom2(8), 3.25).unwrap();
        for p in [[1.3, 2.7, 0.0], [5.5, 0.1, 0.0], [-4.0, 20.0, 0.0]] {
            assert_eq!(v.sample_cubic(p), 3.25);
            assert_eq!(v.gradient(p), [0.0; 3]);
        }
    }

    #[test]
    fn node_returns_stored_value() {
        let g = geom2(6);
        let mut vals: Vec<f64> = (0..36).map(|i| (i as f64 * 0.37).sin()).collect();
        vals[g.linear_index([2, 3, 0])] = 7.5;
        let v = ScalarVolume::new(g, vals).unwrap();
        assert_eq!(v.sample_cubic([2.0, 3.0, 0.0]), 7.5);
    }

    #[test]
    fn ramp_is_reproduced() {
        let g = geom2(8);
        let v = ScalarVolume::from_fn(g, |p| p[0]).unwrap();
        let s = v.sample_cubic([2.5, 3.2, 0.0]);
        assert!((s - 2.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_physical_ramp() {
        let g = GridGeometry::new(&[10, 8], &[0.5, 2.0], &[1.0, -3.0]).unwrap();
        let v = ScalarVolume::from_fn(g, |p| 2.0 * p[0]).unwrap();
        let gr = v.gradient([3.3, 2.1, 0.0]);
        assert!((gr[0] - 2.0).abs() < 1e-12);
        assert!(gr[1].abs() < 1e-12);
    }

    #[test]
    fn clamped_outside_domain() {
        let g = geom2(5);
        let v = ScalarVolume::from_fn(g, |p| p[0] + 10.0 * p[1]).unwrap();
        assert_eq!(v.sample_cubic([-3.0, 0.0, 0.0]), v.sample_cubic([0.0, 0.0, 0.0]));
        assert_eq!(v.sample_cubic([9.0, 4.0, 0.0]), 44.0);
        assert_eq!(v.gradient([-3.0, 2.0, 0.0])[0], 0.0);
    }

    #[test]
    fn nearest_rules() {
        let g = geom2(4);
        let mut labels = vec![0u32; 16];
        labels[g.linear_index([1, 1, 0])] = 3;
        labels[g.linear_index([1, 2, 0])] = 2;
        labels[g.linear_index([2, 2, 0])] = 9;
        labels[g.linear_index([0, 0, 0])] = 5;
        let l = LabelVolume::new(g, labels).unwrap();
        assert_eq!(l.sample_nearest([1.0, 1.0, 0.0]), 3);
        assert_eq!(l.sample_nearest([1.5, 2.0, 0.0]), 2);
        assert_eq!(l.sample_nearest([-2.0, -0.7, 0.0]), 5);
    }

    #[test]
    fn identity_warp_is_exact() {
        let g = GridGeometry::new(&[7, 9], &[0.3, 1.7], &[0.1, -2.2]).unwrap();
        let mut vals: Vec<f64> = (0..63).map(|i| ((i * 7919) % 101) as f64 / 7.0 - 3.0).collect();
        vals[5] = -0.0;
        let v = ScalarVolume::new(g.clone(), vals).unwrap();
        let w = warp_image(&v, &DisplacementField::zeros(g.clone())).unwrap();
        for (a, b) in v.values().iter().zip(w.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let l = LabelVolume::new(g.clone(), (0..63).map(|i| i % 4).collect()).unwrap();
        assert_eq!(warp_labels(&l, &DisplacementField::zeros(g)).unwrap(), l);
    }

    #[test]
    fn integer_shift_moves_labels_and_ramp() {
        let g = GridGeometry::new(&[10, 10], &[2.0, 2.0], &[0.0, 0.0]).unwrap();
        let d = DisplacementField::new(g.clone(), vec![[2.0, 0.0, 0.0]; 100]).unwrap();
        let l = LabelVolume::new(g.clone(), (0..100).map(|i| (i % 10) as u32).collect()).unwrap();
        let wl = warp_labels(&l, &d).unwrap();
        let ramp = ScalarVolume::from_fn(g.clone(), |p| p[0]).unwrap();
        let wr = warp_image(&ramp, &d).unwrap();
        for j in 0..10 {
            for i in 0..9 {
                let lin = g.linear_index([i, j, 0]);
                assert_eq!(wl.labels()[lin], (i + 1) as u32);
                if (1..8).contains(&i) {
                    assert!((wr.values()[lin] - 2.0 * (i + 1) as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mismatched_geometry_rejected() {
        let v = ScalarVolume::filled(geom2(6), 1.0).unwrap();
        let d = DisplacementField::zeros(geom2(7));
        assert!(matches!(warp_image(&v, &d), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn serde_round_trip_geometry() {
        let g = GridGeometry::new(&[4, 5, 6], &[1.0, 1.0, 3.0], &[0.0, 1.0, 2.0]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: GridGeometry = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
        assert!(serde_json::from_str::<GridGeometry>(r#"{"dims":[2,5],"spacing":[1,1],"origin":[0,0]}"#).is_err());
    }
}
