//! Wendland-kernel parameterisation of stationary velocity fields.
//!
//! A velocity field is the kernel expansion `v(x) = sum_i phi(|x - x_i| / R) a_i`
//! over a regular lattice of control points `x_i`, with one coefficient vector
//! `a_i` (mm) per point. The same kernel defines the RKHS norm `a^T K a` and the
//! Gaussian coefficient prior `a ~ N(0, K)` applied independently per axis.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, GridGeometry, Point};

/// Control points every 8 voxels unless configured otherwise.
pub const DEFAULT_CONTROL_SPACING: usize = 8;
/// Diagonal jitter added to the Gram matrix.
pub const GRAM_JITTER: f64 = 1e-8;

/// Wendland C2 profile `(1-u)^4 (4u+1)` on `[0, 1)`, zero beyond.
#[inline]
pub fn wendland_c2(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let s = 1.0 - u;
        let s2 = s * s;
        s2 * s2 * (4.0 * u + 1.0)
    }
}

/// `d/du` of [`wendland_c2`]: `-20 u (1-u)^3`.
#[inline]
pub fn wendland_c2_derivative(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let s = 1.0 - u;
        -20.0 * u * s * s * s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Kernel support radius in mm.
    pub support_radius: f64,
    /// Control-point spacing per axis, in voxels.
    pub control_spacing: [usize; 3],
}

impl KernelConfig {
    pub fn new(support_radius: f64, control_spacing: usize) -> Result<Self> {
        let cfg = KernelConfig {
            support_radius,
            control_spacing: [control_spacing; 3],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Support radius defaults to twice the physical control spacing (largest axis).
    pub fn for_geometry(g: &GridGeometry, control_spacing: usize) -> Result<Self> {
        let phys = g
            .spacing()
            .iter()
            .map(|s| s * control_spacing as f64)
            .fold(0.0, f64::max);
        KernelConfig::new(2.0 * phys, control_spacing)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.support_radius.is_finite() && self.support_radius > 0.0) {
            return Err(Error::InvalidInput(format!(
                "support radius must be positive, got {}",
                self.support_radius
            )));
        }
        if self.control_spacing.iter().any(|&s| s < 1) {
            return Err(Error::InvalidInput(
                "control spacing must be at least one voxel".into(),
            ));
        }
        Ok(())
    }
}

pub fn kernel_eval(cfg: &KernelConfig, r: f64) -> f64 {
    wendland_c2(r / cfg.support_radius)
}

/// Regular lattice of control points centred in the volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    geometry: GridGeometry,
    counts: [usize; 3],
    first: [f64; 3],
    step: [f64; 3],
    positions: Vec<Point>,
}

impl ControlGrid {
    pub fn new(geometry: &GridGeometry, cfg: &KernelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut counts = [1usize; 3];
        let mut first = [0.0; 3];
        let mut step = [1.0; 3];
        for a in 0..geometry.ndim() {
            let n = geometry.dim(a);
            let cs = cfg.control_spacing[a];
            let m = (n - 1) / cs + 1;
            let offset = ((n - 1) - (m - 1) * cs) as f64 / 2.0;
            counts[a] = m;
            first[a] = geometry.origin()[a] + offset * geometry.spacing()[a];
            step[a] = cs as f64 * geometry.spacing()[a];
        }
        let mut positions = Vec::with_capacity(counts.iter().product());
        for k in 0..counts[2] {
            for j in 0..counts[1] {
                for i in 0..counts[0] {
                    let mut p = [0.0; 3];
                    for (a, &c) in [i, j, k].iter().enumerate().take(geometry.ndim()) {
                        p[a] = first[a] + c as f64 * step[a];
                    }
                    positions.push(p);
                }
            }
        }
        Ok(ControlGrid {
            geometry: geometry.clone(),
            counts,
            first,
            step,
            positions,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Control points per axis.
    pub fn counts(&self) -> &[usize] {
        &self.counts[..self.geometry.ndim()]
    }
}

/// Control grid plus kernel: everything needed to evaluate a field from coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBasis {
    grid: ControlGrid,
    kernel: KernelConfig,
}

impl KernelBasis {
    pub fn new(geometry: &GridGeometry, kernel: KernelConfig) -> Result<Self> {
        let grid = ControlGrid::new(geometry, &kernel)?;
        Ok(KernelBasis { grid, kernel })
    }

    pub fn grid(&self) -> &ControlGrid {
        &self.grid
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn ndim(&self) -> usize {
        self.grid.geometry.ndim()
    }

    /// Number of scalar coefficients (`control points x ndim`).
    pub fn flat_len(&self) -> usize {
        self.grid.len() * self.ndim()
    }

    /// Calls `f(i, u, p - x_i)` for every control point with `u = |p - x_i| / R < 1`.
    #[inline]
    pub fn for_each_neighbor(&self, p: Point, mut f: impl FnMut(usize, f64, [f64; 3])) {
        let r = self.kernel.support_radius;
        let g = &self.grid;
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..self.ndim() {
            let m = g.counts[a] as f64;
            let jl = ((p[a] - r - g.first[a]) / g.step[a]).ceil().max(0.0);
            let jh = ((p[a] + r - g.first[a]) / g.step[a]).floor().min(m - 1.0);
            if jl > jh {
                return;
            }
            lo[a] = jl as usize;
            hi[a] = jh as usize;
        }
        let r2 = r * r;
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                let row = g.counts[0] * (j + g.counts[1] * k);
                for i in lo[0]..=hi[0] {
                    let idx = row + i;
                    let x = g.positions[idx];
                    let d = [p[0] - x[0], p[1] - x[1], p[2] - x[2]];
                    let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    if d2 < r2 {
                        f(idx, d2.sqrt() / r, d);
                    }
                }
            }
        }
    }
}

/// Coefficient vectors attached to a shared [`KernelBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct KernelVelocityField {
    basis: Arc<KernelBasis>,
    coeffs: Vec<[f64; 3]>,
}

impl KernelVelocityField {
    pub fn zeros(basis: Arc<KernelBasis>) -> Self {
        let n = basis.grid.len();
        KernelVelocityField {
            basis,
            coeffs: vec![[0.0; 3]; n],
        }
    }

    pub fn new(basis: Arc<KernelBasis>, coeffs: Vec<[f64; 3]>) -> Result<Self> {
        if coeffs.len() != basis.grid.len() {
            return Err(Error::InvalidInput(format!(
                "{} coefficient vectors for {} control points",
                coeffs.len(),
                basis.grid.len()
            )));
        }
        if coeffs.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite coefficient".into()));
        }
        let nd = basis.ndim();
        let mut coeffs = coeffs;
        for a in &mut coeffs {
            for c in a.iter_mut().skip(nd) {
                *c = 0.0;
            }
        }
        Ok(KernelVelocityField { basis, coeffs })
    }

    /// Coefficients laid out point-major: `flat[i * ndim + axis]`.
    pub fn from_flat(basis: Arc<KernelBasis>, flat: &[f64]) -> Result<Self> {
        let nd = basis.ndim();
        if flat.len() != basis.flat_len() {
            return Err(Error::InvalidInput(format!(
                "{} coefficients, expected {}",
                flat.len(),
                basis.flat_len()
            )));
        }
        let coeffs = flat
            .chunks_exact(nd)
            .map(|c| {
                let mut a = [0.0; 3];
                a[..nd].copy_from_slice(c);
                a
            })
            .collect();
        KernelVelocityField::new(basis, coeffs)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let nd = self.basis.ndim();
        self.coeffs.iter().flat_map(|a| a[..nd].to_vec()).collect()
    }

    pub fn basis(&self) -> &Arc<KernelBasis> {
        &self.basis
    }

    pub fn coeffs(&self) -> &[[f64; 3]] {
        &self.coeffs
    }

    pub fn scaled(&self, s: f64) -> KernelVelocityField {
        KernelVelocityField {
            basis: self.basis.clone(),
            coeffs: self
                .coeffs
                .iter()
                .map(|a| [a[0] * s, a[1] * s, a[2] * s])
                .collect(),
        }
    }

    pub fn negated(&self) -> KernelVelocityField {
        self.scaled(-1.0)
    }

    pub fn velocity_at(&self, p: Point) -> [f64; 3] {
        let mut v = [0.0; 3];
        self.basis.for_each_neighbor(p, |i, u, _| {
            let w = wendland_c2(u);
            let a = self.coeffs[i];
            v[0] += w * a[0];
            v[1] += w * a[1];
            v[2] += w * a[2];
        });
        v
    }

    /// Velocity and its spatial Jacobian `J[c][b] = d v_c / d x_b` (per mm).
    pub fn velocity_and_jacobian(&self, p: Point) -> ([f64; 3], [[f64; 3]; 3]) {
        let r = self.basis.kernel.support_radius;
        let inv_r2 = 1.0 / (r * r);
        let mut v = [0.0; 3];
        let mut jac = [[0.0; 3]; 3];
        self.basis.for_each_neighbor(p, |i, u, d| {
            let w = wendland_c2(u);
            let s = 1.0 - u;
            // grad_x phi(|x - x_i| / R) = -20 (1-u)^3 (x - x_i) / R^2
            let gscale = -20.0 * s * s * s * inv_r2;
            let a = self.coeffs[i];
            for c in 0..3 {
                v[c] += w * a[c];
                for b in 0..3 {
                    jac[c][b] += a[c] * gscale * d[b];
                }
            }
        });
        (v, jac)
    }

    /// Rasterises the field at the voxel centres of `g` (must be the basis geometry).
    pub fn dense_velocity(&self, g: &GridGeometry) -> Result<DisplacementField> {
        self.basis.grid.geometry.ensure_same(g, "dense_velocity")?;
        let vectors = (0..g.voxel_count())
            .map(|lin| self.velocity_at(g.voxel_center(lin)))
            .collect();
        DisplacementField::new(g.clone(), vectors)
    }

    /// RKHS norm `sum_i sum_j phi(|x_i - x_j|) a_i . a_j`, summed over the sparse
    /// neighbourhoods.
    pub fn norm_sq(&self) -> f64 {
        let mut total = 0.0;
        for (i, &xi) in self.basis.grid.positions.iter().enumerate() {
            let ai = self.coeffs[i];
            self.basis.for_each_neighbor(xi, |j, u, _| {
                let aj = self.coeffs[j];
                total += wendland_c2(u) * (ai[0] * aj[0] + ai[1] * aj[1] + ai[2] * aj[2]);
            });
        }
        total.max(0.0)
    }

    /// `K a` per axis, in the flat layout.
    pub fn gram_times_coeffs(&self) -> Vec<f64> {
        let nd = self.basis.ndim();
        let mut out = vec![0.0; self.basis.flat_len()];
        for (i, &xi) in self.basis.grid.positions.iter().enumerate() {
            self.basis.for_each_neighbor(xi, |j, u, _| {
                let w = wendland_c2(u);
                for c in 0..nd {
                    out[i * nd + c] += w * self.coeffs[j][c];
                }
            });
        }
        out
    }
}

pub fn velocity_at(v: &KernelVelocityField, p: Point) -> [f64; 3] {
    v.velocity_at(p)
}

pub fn dense_velocity(v: &KernelVelocityField, g: &GridGeometry) -> Result<DisplacementField> {
    v.dense_velocity(g)
}

pub fn norm_sq(v: &KernelVelocityField) -> f64 {
    v.norm_sq()
}

/// Dense scalar Gram matrix over control points (the per-axis block).
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    matrix: DMatrix<f64>,
}

impl GramMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    /// `sum_c a_c^T K a_c` computed densely.
    pub fn quadratic_form(&self, v: &KernelVelocityField) -> f64 {
        let n = self.len();
        let mut total = 0.0;
        for c in 0..v.basis.ndim() {
            let a = nalgebra::DVector::from_fn(n, |i, _| v.coeffs[i][c]);
            total += a.dot(&(&self.matrix * &a));
        }
        total
    }
}

pub fn gram_matrix(grid: &ControlGrid, cfg: &KernelConfig) -> GramMatrix {
    let n = grid.len();
    let p = &grid.positions;
    let matrix = DMatrix::from_fn(n, n, |i, j| {
        let d = [p[i][0] - p[j][0], p[i][1] - p[j][1], p[i][2] - p[j][2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let k = kernel_eval(cfg, r);
        if i == j {
            k + GRAM_JITTER
        } else {
            k
        }
    });
    GramMatrix { matrix }
}

/// Gaussian prior `a_c ~ N(0, K)` on each axis' coefficients, backed by a
/// Cholesky factor of the jittered Gram matrix.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    basis: Arc<KernelBasis>,
    chol: Cholesky<f64, Dyn>,
    log_det_gram: f64,
}

impl GaussianPrior {
    pub fn new(basis: Arc<KernelBasis>) -> Result<Self> {
        let gram = gram_matrix(&basis.grid, &basis.kernel);
        let chol = Cholesky::new(gram.matrix).ok_or_else(|| {
            Error::InvalidInput("kernel Gram matrix is not positive definite".into())
        })?;
        let log_det_gram = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(GaussianPrior {
            basis,
            chol,
            log_det_gram,
        })
    }

    pub fn basis(&self) -> &Arc<KernelBasis> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.flat_len()
    }

    /// `log det` of the scalar Gram block.
    pub fn log_det_gram(&self) -> f64 {
        self.log_det_gram
    }

    /// `-(d/2) log 2 pi - (ndim/2) log det K`.
    pub fn log_normalizer(&self) -> f64 {
        let d = self.dim() as f64;
        let nd = self.basis.ndim() as f64;
        -0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * nd * self.log_det_gram
    }

    /// `K^{-1} a` per axis, in the flat layout.
    pub fn precision_times(&self, flat: &[f64]) -> Vec<f64> {
        let nd = self.basis.ndim();
        let n = self.basis.grid.len();
        let rhs = DMatrix::from_fn(n, nd, |i, c| flat[i * nd + c]);
        let sol = self.chol.solve(&rhs);
        let mut out = vec![0.0; flat.len()];
        for i in 0..n {
            for c in 0..nd {
                out[i * nd + c] = sol[(i, c)];
            }
        }
        out
    }

    /// Log density and its gradient `-K^{-1} a`.
    pub fn log_density_and_gradient(&self, flat: &[f64]) -> (f64, Vec<f64>) {
        let pa = self.precision_times(flat);
        let quad: f64 = flat.iter().zip(&pa).map(|(a, b)| a * b).sum();
        let grad = pa.iter().map(|x| -x).collect();
        (-0.5 * quad + self.log_normalizer(), grad)
    }

    pub fn log_density(&self, flat: &[f64]) -> f64 {
        self.log_density_and_gradient(flat).0
    }

    /// Draws coefficients from the prior: `a_c = L z`, `z ~ N(0, I)`.
    pub fn sample(&self, rng: &mut impl Rng) -> KernelVelocityField {
        let nd = self.basis.ndim();
        let n = self.basis.grid.len();
        let z = DMatrix::from_fn(n, nd, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = self.chol.l() * z;
        let flat: Vec<f64> = (0..n)
            .flat_map(|i| (0..nd).map(move |c| (i, c)))
            .map(|(i, c)| a[(i, c)])
            .collect();
        KernelVelocityField::from_flat(self.basis.clone(), &flat)
            .expect("prior sample has the basis layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis_2d(n: usize, cs: usize) -> Arc<KernelBasis> {
        let g = GridGeometry::unit(&[n, n]).unwrap();
        Arc::new(KernelBasis::new(&g, KernelConfig::for_geometry(&g, cs).unwrap()).unwrap())
    }

    fn random_field(basis: &Arc<KernelBasis>, seed: u64, scale: f64) -> KernelVelocityField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..basis.flat_len())
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        KernelVelocityField::from_flat(basis.clone(), &flat).unwrap()
    }

    #[test]
    fn kernel_closed_form() {
        let cfg = KernelConfig::new(4.0, 2).unwrap();
        assert_eq!(kernel_eval(&cfg, 0.0), 1.0);
        assert_eq!(kernel_eval(&cfg, 4.0), 0.0);
        assert!((kernel_eval(&cfg, 2.0) - 0.1875).abs() < 1e-15);
        assert_eq!(kernel_eval(&cfg, 9.0), 0.0);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        for k in 1..20 {
            let u = k as f64 / 20.0;
            let h = 1e-6;
            let fd = (wendland_c2(u + h) - wendland_c2(u - h)) / (2.0 * h);
            assert!((fd - wendland_c2_derivative(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn control_grid_is_centred() {
        let g = GridGeometry::unit(&[16, 16]).unwrap();
        let grid = ControlGrid::new(&g, &KernelConfig::new(12.0, 6).unwrap()).unwrap();
        assert_eq!(grid.counts(), &[3, 3]);
        assert_eq!(grid.positions()[0], [1.5, 1.5, 0.0]);
        assert_eq!(grid.positions()[8], [13.5, 13.5, 0.0]);
        let g = GridGeometry::unit(&[64, 64, 64]).unwrap();
        let grid = ControlGrid::new(&g, &KernelConfig::for_geometry(&g, 8).unwrap()).unwrap();
        assert_eq!(grid.counts(), &[8, 8, 8]);
    }

    #[test]
    fn single_point_field() {
        let g = GridGeometry::unit(&[5, 5]).unwrap();
        let basis = Arc::new(KernelBasis::new(&g, KernelConfig::new(3.0, 8).unwrap()).unwrap());
        assert_eq!(basis.grid().len(), 1);
        let v = KernelVelocityField::new(basis.clone(), vec![[2.0, 0.0, 0.0]]).unwrap();
        let x = basis.grid().positions()[0];
        assert_eq!(v.velocity_at(x), [2.0, 0.0, 0.0]);
        assert_eq!(v.velocity_at([x[0] + 3.5, x[1], 0.0]), [0.0; 3]);
        let v = KernelVelocityField::new(basis, vec![[3.0, 0.0, 0.0]]).unwrap();
        assert_eq!(v.norm_sq(), 9.0);
    }

    #[test]
    fn zero_field_everywhere_zero() {
        let basis = basis_2d(16, 4);
        let v = KernelVelocityField::zeros(basis.clone());
        assert_eq!(v.norm_sq(), 0.0);
        let d = v.dense_velocity(basis.grid().geometry()).unwrap();
        assert_eq!(d.max_norm(), 0.0);
    }

    #[test]
    fn dense_matches_pointwise() {
        let basis = basis_2d(12, 4);
        let v = random_field(&basis, 3, 1.0);
        let g = basis.grid().geometry().clone();
        let d = v.dense_velocity(&g).unwrap();
        for lin in 0..g.voxel_count() {
            assert_eq!(d.vectors()[lin], v.velocity_at(g.voxel_center(lin)));
        }
    }

    #[test]
    fn sparse_norm_matches_dense_gram() {
        for seed in 0..5 {
            let basis = basis_2d(20, 4);
            let v = random_field(&basis, seed, 2.0);
            let gram = gram_matrix(basis.grid(), basis.kernel());
            let dense = gram.quadratic_form(&v);
            let jitter: f64 = v.coeffs().iter().flatten().map(|c| c * c).sum::<f64>() * GRAM_JITTER;
            let sparse = v.norm_sq();
            assert!(((dense - jitter) - sparse).abs() <= 1e-10 * dense.abs());
        }
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let basis = basis_2d(24, 3);
        let gram = gram_matrix(basis.grid(), basis.kernel());
        let m = gram.matrix();
        assert_eq!(m, &m.transpose());
        let eig = m.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e >= 0.0));
        for i in 0..m.nrows() {
            assert_eq!(m[(i, i)], 1.0 + GRAM_JITTER);
        }
    }

    #[test]
    fn gram_far_points_identity() {
        let g = GridGeometry::unit(&[20, 5]).unwrap();
        let grid = ControlGrid::new(&g, &KernelConfig::new(5.0, 10).unwrap()).unwrap();
        assert_eq!(grid.len(), 2);
        let gram = gram_matrix(&grid, &KernelConfig::new(5.0, 10).unwrap());
        assert_eq!(gram.matrix()[(0, 1)], 0.0);
        assert_eq!(gram.matrix()[(0, 0)], 1.0 + GRAM_JITTER);
    }

    #[test]
    fn prior_gradient_matches_fd() {
        let basis = basis_2d(16, 6);
        let prior = GaussianPrior::new(basis.clone()).unwrap();
        let a = random_field(&basis, 9, 1.0).to_flat();
        let (_, grad) = prior.log_density_and_gradient(&a);
        for k in 0..a.len() {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[k] += 1e-5;
            am[k] -= 1e-5;
            let fd = (prior.log_density(&ap) - prior.log_density(&am)) / 2e-5;
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + grad[k].abs()));
        }
    }

    #[test]
    fn jacobian_matches_fd() {
        let basis = basis_2d(16, 4);
        let v = random_field(&basis, 5, 1.5);
        let p = [6.3, 8.8, 0.0];
        let (_, jac) = v.velocity_and_jacobian(p);
        for b in 0..2 {
            let mut pp = p;
            let mut pm = p;
            pp[b] += 1e-6;
            pm[b] -= 1e-6;
            let (vp, vm) = (v.velocity_at(pp), v.velocity_at(pm));
            for c in 0..2 {
                let fd = (vp[c] - vm[c]) / 2e-6;
                assert!((fd - jac[c][b]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn flat_round_trip_and_size_check() {
        let basis = basis_2d(16, 4);
        let v = random_field(&basis, 1, 1.0);
        let back = KernelVelocityField::from_flat(basis.clone(), &v.to_flat()).unwrap();
        assert_eq!(v, back);
        assert!(KernelVelocityField::from_flat(basis, &[1.0]).is_err());
    }
}
