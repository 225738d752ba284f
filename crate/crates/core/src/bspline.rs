//! Random free-form deformations: i.i.d. Gaussian control displacements on a
//! uniform cubic B-spline lattice.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::min_jacobian;
use crate::grid::{warp_image, warp_labels, DisplacementField, GridGeometry, LabelVolume, ScalarVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BsplineConfig {
    /// Control points per axis spanning the volume.
    pub cp: usize,
    /// Standard deviation of control displacements, in voxels.
    pub sd: f64,
    pub seed: u64,
}

impl BsplineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cp < 4 {
            return Err(Error::InvalidInput(format!(
                "need at least 4 control points per axis, got {}",
                self.cp
            )));
        }
        if !(self.sd.is_finite() && self.sd >= 0.0) {
            return Err(Error::InvalidInput(format!("sd must be non-negative, got {}", self.sd)));
        }
        Ok(())
    }
}

/// Uniform cubic B-spline basis for the taps at offsets -1, 0, 1, 2.
#[inline]
pub fn bspline_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Control lattice with `cp` points across each axis plus one margin point per side.
#[derive(Debug, Clone, PartialEq)]
pub struct BsplineLattice {
    geometry: GridGeometry,
    cp: usize,
    /// Coefficient count per axis, `cp + 2` on active axes.
    counts: [usize; 3],
    coeffs: Vec<[f64; 3]>,
}

impl BsplineLattice {
    pub fn zeros(geometry: &GridGeometry, cp: usize) -> Result<Self> {
        if cp < 4 {
            return Err(Error::InvalidInput(format!(
                "need at least 4 control points per axis, got {cp}"
            )));
        }
        let mut counts = [1usize; 3];
        for c in counts.iter_mut().take(geometry.ndim()) {
            *c = cp + 2;
        }
        Ok(BsplineLattice {
            geometry: geometry.clone(),
            cp,
            counts,
            coeffs: vec![[0.0; 3]; counts.iter().product()],
        })
    }

    /// Coefficients drawn i.i.d. `N(0, sd^2)` voxels per axis, stored in mm.
    pub fn random(cfg: &BsplineConfig, geometry: &GridGeometry, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut lat = BsplineLattice::zeros(geometry, cfg.cp)?;
        let nd = geometry.ndim();
        let sp = geometry.spacing().to_vec();
        for c in &mut lat.coeffs {
            for a in 0..nd {
                let z: f64 = rng.sample(StandardNormal);
                c[a] = cfg.sd * z * sp[a];
            }
        }
        Ok(lat)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts[..self.geometry.ndim()]
    }

    /// Coefficient at lattice index `j` (per axis in `-1..=cp`).
    pub fn set(&mut self, j: [isize; 3], value: [f64; 3]) {
        let lin = self.lin(j);
        self.coeffs[lin] = value;
    }

    fn lin(&self, j: [isize; 3]) -> usize {
        let mut s = [0usize; 3];
        for a in 0..self.geometry.ndim() {
            s[a] = (j[a] + 1) as usize;
        }
        s[0] + self.counts[0] * (s[1] + self.counts[1] * s[2])
    }

    /// Lattice coordinate of voxel index `i` on axis `a`.
    fn lattice_coord(&self, a: usize, i: usize) -> f64 {
        let n = self.geometry.dim(a);
        i as f64 * (self.cp - 1) as f64 / (n - 1) as f64
    }

    /// First tap (lattice index) and basis weights at voxel `i` on axis `a`.
    pub fn axis_weights(&self, a: usize, i: usize) -> (isize, [f64; 4]) {
        let u = self.lattice_coord(a, i);
        let j0 = (u.floor() as usize).min(self.cp - 2);
        let t = u - j0 as f64;
        (j0 as isize - 1, bspline_weights(t))
    }

    /// Dense displacement at every voxel centre.
    pub fn evaluate(&self) -> DisplacementField {
        let g = &self.geometry;
        let nd = g.ndim();
        let per_axis: Vec<Vec<(isize, [f64; 4])>> = (0..3)
            .map(|a| {
                if a < nd {
                    (0..g.dim(a)).map(|i| self.axis_weights(a, i)).collect()
                } else {
                    vec![(-1, [1.0, 0.0, 0.0, 0.0])]
                }
            })
            .collect();
        let taps = |a: usize| if a < nd { 4 } else { 1 };
        let vectors = (0..g.voxel_count())
            .map(|lin| {
                let idx = g.voxel_index(lin);
                let (bx, wx) = per_axis[0][idx[0]];
                let (by, wy) = per_axis[1][idx[1]];
                let (bz, wz) = per_axis[2][idx[2]];
                let mut d = [0.0; 3];
                for (kz, &wzk) in wz.iter().enumerate().take(taps(2)) {
                    for (jy, &wyj) in wy.iter().enumerate().take(taps(1)) {
                        for (ix, &wxi) in wx.iter().enumerate().take(taps(0)) {
                            let w = wxi * wyj * wzk;
                            let j = [
                                bx + ix as isize,
                                by + jy as isize,
                                if nd == 3 { bz + kz as isize } else { -1 },
                            ];
                            let c = self.coeffs[self.lin(j)];
                            for a in 0..nd {
                                d[a] += w * c[a];
                            }
                        }
                    }
                }
                d
            })
            .collect();
        DisplacementField::new(g.clone(), vectors).expect("finite coefficients")
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.coeffs.iter().flatten().fold(0.0, |m, c| m.max(c.abs()))
    }
}

pub fn sample_bspline_field(
    cfg: &BsplineConfig,
    g: &GridGeometry,
    rng: &mut ChaCha8Rng,
) -> Result<DisplacementField> {
    Ok(BsplineLattice::random(cfg, g, rng)?.evaluate())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDiagnostics {
    pub image_field_checksum: String,
    pub label_field_checksum: String,
    pub min_jacobian: f64,
    pub max_displacement_mm: f64,
}

/// Warps an image (cubic) and its labels (nearest) with one sampled field.
pub fn apply_baseline(
    img: &ScalarVolume,
    lbl: &LabelVolume,
    cfg: &BsplineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ScalarVolume, LabelVolume, BaselineDiagnostics)> {
    img.geometry().ensure_same(lbl.geometry(), "apply_baseline")?;
    let field = sample_bspline_field(cfg, img.geometry(), rng)?;
    let out_img = warp_image(img, &field)?;
    let out_lbl = warp_labels(lbl, &field)?;
    let sum = field.checksum();
    let diag = BaselineDiagnostics {
        image_field_checksum: sum.clone(),
        label_field_checksum: sum,
        min_jacobian: min_jacobian(&field),
        max_displacement_mm: field.max_norm(),
    };
    Ok((out_img, out_lbl, diag))
}
