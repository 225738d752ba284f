//! Exponential map of stationary velocity fields by explicit Euler integration
//! of particle trajectories, plus inversion and Jacobian diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{DisplacementField, GridGeometry, Point, ScalarVolume};
use crate::kernel::KernelVelocityField;

pub const DEFAULT_FLOW_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub steps: usize,
    /// Integration time in `[0, 1]`.
    pub time: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            steps: DEFAULT_FLOW_STEPS,
            time: 1.0,
        }
    }
}

impl FlowConfig {
    pub fn new(steps: usize, time: f64) -> Result<Self> {
        let fc = FlowConfig { steps, time };
        fc.validate()?;
        Ok(fc)
    }

    pub fn with_time(self, time: f64) -> Self {
        FlowConfig { time, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::InvalidInput("flow needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.time) {
            return Err(Error::InvalidInput(format!(
                "integration time {} outside [0, 1]",
                self.time
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn step_length(&self) -> f64 {
        self.time / self.steps as f64
    }
}

/// End point of the Euler trajectory started at `p`.
#[inline]
pub fn flow_point(v: &KernelVelocityField, p: Point, fc: &FlowConfig) -> Point {
    let h = fc.step_length();
    let mut y = p;
    if h == 0.0 {
        return y;
    }
    for _ in 0..fc.steps {
        let vel = v.velocity_at(y);
        y = [y[0] + h * vel[0], y[1] + h * vel[1], y[2] + h * vel[2]];
    }
    y
}

/// Displacement `d(x) = y_steps - x` of the Euler flow of `v` up to `fc.time`.
pub fn exponentiate(
    v: &KernelVelocityField,
    g: &GridGeometry,
    fc: &FlowConfig,
) -> Result<DisplacementField> {
    fc.validate()?;
    let vectors: Vec<[f64; 3]> = (0..g.voxel_count())
        .into_par_iter()
        .map(|lin| {
            let x = g.voxel_center(lin);
            let y = flow_point(v, x, fc);
            [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
        })
        .collect();
    DisplacementField::new(g.clone(), vectors)
}

/// Inverse map of `exponentiate(v)`, realised by flowing the negated velocity.
pub fn exponentiate_inverse(
    v: &KernelVelocityField,
    g: &GridGeometry,
    fc: &FlowConfig,
) -> Result<DisplacementField> {
    exponentiate(&v.negated(), g, fc)
}

/// Fixed-point inversion `d_inv(x) = -d(x + d_inv(x))` for dense-only fields.
///
/// Fails with [`Error::InversionFailed`] when the residual
/// `|d_inv(x) + d(x + d_inv(x))|` still exceeds half the finest voxel spacing.
pub fn invert(d: &DisplacementField, iters: usize) -> Result<DisplacementField> {
    invert_with_tolerance(d, iters, 0.5 * d.geometry().min_spacing())
}

pub fn invert_with_tolerance(
    d: &DisplacementField,
    iters: usize,
    tolerance: f64,
) -> Result<DisplacementField> {
    if iters < 1 {
        return Err(Error::InvalidInput("inversion needs at least one iteration".into()));
    }
    let g = d.geometry().clone();
    let sp = g.spacing3();
    let nd = g.ndim();
    let lookup = |lin: usize, inv: [f64; 3]| {
        let idx = g.voxel_index(lin);
        let mut u = [idx[0] as f64, idx[1] as f64, idx[2] as f64];
        for a in 0..nd {
            u[a] += inv[a] / sp[a];
        }
        d.sample_index(u)
    };
    let mut inv: Vec<[f64; 3]> = d.negated().vectors().to_vec();
    for _ in 0..iters {
        inv = (0..g.voxel_count())
            .into_par_iter()
            .map(|lin| {
                let f = lookup(lin, inv[lin]);
                [-f[0], -f[1], -f[2]]
            })
            .collect();
    }
    let max_residual = (0..g.voxel_count())
        .into_par_iter()
        .map(|lin| {
            let f = lookup(lin, inv[lin]);
            let r = [inv[lin][0] + f[0], inv[lin][1] + f[1], inv[lin][2] + f[2]];
            (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
        })
        .reduce(|| 0.0, f64::max);
    if max_residual > tolerance {
        return Err(Error::InversionFailed {
            max_residual,
            tolerance,
        });
    }
    DisplacementField::new(g, inv)
}

/// Largest `|phi(phi_inv(x)) - x|` over voxels, with `phi` evaluated exactly by
/// flowing `v` from each point `x + d_inv(x)`.
pub fn inverse_consistency_residual(
    v: &KernelVelocityField,
    d_inv: &DisplacementField,
    fc: &FlowConfig,
) -> f64 {
    let g = d_inv.geometry();
    (0..g.voxel_count())
        .into_par_iter()
        .map(|lin| {
            let x = g.voxel_center(lin);
            let di = d_inv.vectors()[lin];
            let y = [x[0] + di[0], x[1] + di[1], x[2] + di[2]];
            let z = flow_point(v, y, fc);
            let r = [z[0] - x[0], z[1] - x[1], z[2] - x[2]];
            (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
        })
        .reduce(|| 0.0, f64::max)
}

/// `det(d(x + d(x)) / dx)` per voxel from central differences, one-sided at
/// the boundary.
pub fn jacobian_determinant(d: &DisplacementField) -> ScalarVolume {
    let g = d.geometry().clone();
    let nd = g.ndim();
    let sp = g.spacing3();
    let vecs = d.vectors();
    let values: Vec<f64> = (0..g.voxel_count())
        .into_par_iter()
        .map(|lin| {
            let idx = g.voxel_index(lin);
            let mut jac = [[0.0; 3]; 3];
            for b in 0..nd {
                let n = g.dim(b);
                let (lo, hi) = if idx[b] == 0 {
                    (0, 1)
                } else if idx[b] == n - 1 {
                    (n - 2, n - 1)
                } else {
                    (idx[b] - 1, idx[b] + 1)
                };
                let mut il = idx;
                let mut ih = idx;
                il[b] = lo;
                ih[b] = hi;
                let (vl, vh) = (vecs[g.linear_index(il)], vecs[g.linear_index(ih)]);
                let h = (hi - lo) as f64 * sp[b];
                for c in 0..nd {
                    jac[c][b] = (vh[c] - vl[c]) / h;
                }
            }
            for (c, row) in jac.iter_mut().enumerate().take(nd) {
                row[c] += 1.0;
            }
            if nd == 2 {
                jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]
            } else {
                jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                    - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                    + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
            }
        })
        .collect();
    ScalarVolume::new(g, values).expect("finite displacements give finite determinants")
}

/// Smallest Jacobian determinant over the volume.
pub fn min_jacobian(d: &DisplacementField) -> f64 {
    jacobian_determinant(d)
        .values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{KernelBasis, KernelConfig};
    use std::sync::Arc;

    fn basis(n: usize, cs: usize, r: f64) -> Arc<KernelBasis> {
        let g = GridGeometry::unit(&[n, n]).unwrap();
        Arc::new(KernelBasis::new(&g, KernelConfig::new(r, cs).unwrap()).unwrap())
    }

    #[test]
    fn zero_field_and_zero_time_are_identity() {
        let b = basis(12, 4, 8.0);
        let g = b.grid().geometry().clone();
        let z = KernelVelocityField::zeros(b.clone());
        assert_eq!(exponentiate(&z, &g, &FlowConfig::default()).unwrap().max_norm(), 0.0);
        let v = KernelVelocityField::new(b.clone(), vec![[1.0, -2.0, 0.0]; b.grid().len()]).unwrap();
        let d = exponentiate(&v, &g, &FlowConfig::new(8, 0.0).unwrap()).unwrap();
        assert_eq!(d.max_norm(), 0.0);
    }

    #[test]
    fn rejects_bad_flow_config() {
        assert!(FlowConfig::new(0, 0.5).is_err());
        assert!(FlowConfig::new(4, 1.5).is_err());
    }

    #[test]
    fn constant_interior_translation() {
        // Coefficients equal everywhere on a dense lattice give an almost
        // constant field deep inside the volume.
        let b = basis(40, 2, 12.0);
        let g = b.grid().geometry().clone();
        let ones = KernelVelocityField::new(b.clone(), vec![[1.0, 0.0, 0.0]; b.grid().len()]).unwrap();
        let c = ones.velocity_at([20.0, 20.0, 0.0])[0];
        let v = ones.scaled(0.5 / c);
        let fc = FlowConfig::new(64, 1.0).unwrap();
        let d = exponentiate(&v, &g, &fc).unwrap();
        let lin = g.linear_index([20, 20, 0]);
        assert!((d.vectors()[lin][0] - 0.5).abs() < 1e-3 * 0.5);
        let det = jacobian_determinant(&d);
        assert!((det.values()[lin] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn jacobian_of_identity_and_shift() {
        let g = GridGeometry::new(&[8, 9, 6], &[1.0, 2.0, 0.5], &[0.0; 3]).unwrap();
        let det = jacobian_determinant(&DisplacementField::zeros(g.clone()));
        assert!(det.values().iter().all(|&v| v == 1.0));
        let shift = DisplacementField::new(g.clone(), vec![[1.5, -0.5, 2.0]; g.voxel_count()]).unwrap();
        assert!(jacobian_determinant(&shift).values().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn jacobian_of_uniform_scaling() {
        let g = GridGeometry::unit(&[10, 10]).unwrap();
        let vecs = (0..100).map(|lin| {
            let x = g.voxel_center(lin);
            [0.1 * x[0], 0.2 * x[1], 0.0]
        });
        let d = DisplacementField::new(g.clone(), vecs.collect()).unwrap();
        let det = jacobian_determinant(&d);
        assert!(det.values().iter().all(|&v| (v - 1.1 * 1.2).abs() < 1e-12));
    }

    #[test]
    fn fixed_point_inverts_translation() {
        let g = GridGeometry::unit(&[12, 12]).unwrap();
        let d = DisplacementField::new(g.clone(), vec![[1.25, -0.5, 0.0]; 144]).unwrap();
        let inv = invert(&d, 10).unwrap();
        let lin = g.linear_index([6, 6, 0]);
        assert!((inv.vectors()[lin][0] + 1.25).abs() < 1e-12);
        assert!((inv.vectors()[lin][1] - 0.5).abs() < 1e-12);
        let zero = invert(&DisplacementField::zeros(g), 3).unwrap();
        assert_eq!(zero.max_norm(), 0.0);
    }

    #[test]
    fn fixed_point_reports_failure() {
        // A local fold: the map reverses orientation around x = 16, where the
        // fixed-point iteration oscillates instead of converging.
        let g = GridGeometry::unit(&[32, 8]).unwrap();
        let vecs = (0..256).map(|lin| {
            let s = g.voxel_center(lin)[0] - 16.0;
            [-3.0 * s * (-s * s / 8.0).exp(), 0.0, 0.0]
        });
        let d = DisplacementField::new(g.clone(), vecs.collect()).unwrap();
        match invert(&d, 10) {
            Err(Error::InversionFailed { max_residual, .. }) => assert!(max_residual > 0.5),
            other => panic!("expected inversion failure, got {other:?}"),
        }
    }

    #[test]
    fn negated_flow_inverts() {
        let b = basis(24, 4, 8.0);
        let g = b.grid().geometry().clone();
        let n = b.grid().len();
        let coeffs = (0..n).map(|i| [((i * 37) % 11) as f64 / 5.0 - 1.0, ((i * 13) % 7) as f64 / 3.0 - 1.0, 0.0]);
        let v = KernelVelocityField::new(b, coeffs.collect()).unwrap();
        let fc = FlowConfig::new(16, 1.0).unwrap();
        let inv = exponentiate_inverse(&v, &g, &fc).unwrap();
        assert!(inverse_consistency_residual(&v, &inv, &fc) < 0.5);
    }

    #[test]
    fn deterministic() {
        let b = basis(16, 4, 8.0);
        let g = b.grid().geometry().clone();
        let v = KernelVelocityField::new(b.clone(), vec![[0.3, 0.7, 0.0]; b.grid().len()]).unwrap();
        let a = exponentiate(&v, &g, &FlowConfig::default()).unwrap();
        let c = exponentiate(&v, &g, &FlowConfig::default()).unwrap();
        assert_eq!(a.checksum(), c.checksum());
    }
}
