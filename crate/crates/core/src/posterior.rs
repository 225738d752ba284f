//! Registration energy and the log posterior over velocity coefficients.
//!
//! The likelihood compares the template with the observation pulled back
//! through the flow, `I_T(x) - I_k(x + d(x))`, with i.i.d. Gaussian voxel noise.
//! Its gradient is taken by reverse-mode differentiation through the Euler
//! recursion, so it is exact for the discretised objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{exponentiate, FlowConfig};
use crate::grid::{warp_image, ScalarVolume};
use crate::hmc::LogDensity;
use crate::kernel::{GaussianPrior, KernelVelocityField};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Voxels per parallel work item; fixed so the reduction order never depends
/// on the thread count.
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    /// Weight of the RKHS norm in the deterministic energy.
    pub lambda: f64,
    /// Voxel noise standard deviation.
    pub sigma: f64,
    pub flow: FlowConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            lambda: 1.0,
            sigma: 1.0,
            flow: FlowConfig::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        self.flow.validate()
    }
}

/// `|I1 o Exp(v) - I2|^2 + lambda |v|^2`.
pub fn energy(
    i1: &ScalarVolume,
    i2: &ScalarVolume,
    v: &KernelVelocityField,
    rc: &RegistrationConfig,
) -> Result<f64> {
    rc.validate()?;
    i1.geometry().ensure_same(i2.geometry(), "energy")?;
    let d = exponentiate(v, i1.geometry(), &rc.flow)?;
    let warped = warp_image(i1, &d)?;
    Ok(warped.sum_sq_diff(i2)? + rc.lambda * v.norm_sq())
}

/// Sum of squared residuals `|I_T - I_k o Exp(v)|^2`.
pub fn residual_sum_sq(
    ik: &ScalarVolume,
    v: &KernelVelocityField,
    it: &ScalarVolume,
    flow: &FlowConfig,
) -> Result<f64> {
    ik.geometry().ensure_same(it.geometry(), "residual")?;
    let d = exponentiate(v, ik.geometry(), flow)?;
    warp_image(ik, &d)?.sum_sq_diff(it)
}

/// Gaussian voxel log-likelihood of the template given the warped observation.
pub fn log_likelihood(
    ik: &ScalarVolume,
    v: &KernelVelocityField,
    it: &ScalarVolume,
    rc: &RegistrationConfig,
) -> Result<f64> {
    rc.validate()?;
    let ssd = residual_sum_sq(ik, v, it, &rc.flow)?;
    Ok(gaussian_log_likelihood(ssd, ik.geometry().voxel_count(), rc.sigma))
}

/// `-V log sigma - (V/2) log 2 pi - ssd / (2 sigma^2)`.
pub fn gaussian_log_likelihood(ssd: f64, voxels: usize, sigma: f64) -> f64 {
    let v = voxels as f64;
    -v * sigma.ln() - 0.5 * v * LN_2PI - ssd / (2.0 * sigma * sigma)
}

pub fn log_prior(v: &KernelVelocityField, prior: &GaussianPrior) -> f64 {
    prior.log_density(&v.to_flat())
}

pub fn log_posterior(
    ik: &ScalarVolume,
    v: &KernelVelocityField,
    it: &ScalarVolume,
    rc: &RegistrationConfig,
    prior: &GaussianPrior,
) -> Result<f64> {
    Ok(log_likelihood(ik, v, it, rc)? + log_prior(v, prior))
}

/// Gradient of [`log_posterior`] with respect to the flat coefficients.
pub fn grad_log_posterior(
    ik: &ScalarVolume,
    v: &KernelVelocityField,
    it: &ScalarVolume,
    rc: &RegistrationConfig,
    prior: &GaussianPrior,
) -> Result<Vec<f64>> {
    let post = Posterior::new(ik, it, prior, *rc)?;
    let mut grad = vec![0.0; post.dim()];
    post.log_density_and_gradient(&v.to_flat(), &mut grad);
    Ok(grad)
}

/// Log posterior of one observation against a template, as an HMC target.
pub struct Posterior<'a> {
    moving: &'a ScalarVolume,
    template: &'a ScalarVolume,
    prior: &'a GaussianPrior,
    rc: RegistrationConfig,
}

impl<'a> Posterior<'a> {
    pub fn new(
        moving: &'a ScalarVolume,
        template: &'a ScalarVolume,
        prior: &'a GaussianPrior,
        rc: RegistrationConfig,
    ) -> Result<Self> {
        rc.validate()?;
        moving.geometry().ensure_same(template.geometry(), "posterior images")?;
        moving
            .geometry()
            .ensure_same(prior.basis().grid().geometry(), "posterior kernel grid")?;
        Ok(Posterior {
            moving,
            template,
            prior,
            rc,
        })
    }

    fn field(&self, flat: &[f64]) -> KernelVelocityField {
        KernelVelocityField::from_flat(self.prior.basis().clone(), flat)
            .expect("coefficient vector has the posterior dimension")
    }

    /// Log-likelihood and its gradient over the flat coefficients.
    pub fn likelihood_and_gradient(&self, v: &KernelVelocityField) -> (f64, Vec<f64>) {
        let g = self.moving.geometry();
        let nd = g.ndim();
        let sp = g.spacing3();
        let n_flat = v.basis().flat_len();
        let fc = self.rc.flow;
        let steps = fc.steps;
        let h = fc.step_length();
        let inv_var = 1.0 / (self.rc.sigma * self.rc.sigma);
        let nvox = g.voxel_count();
        let chunks: Vec<(f64, Vec<f64>)> = (0..nvox.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut ssd = 0.0;
                let mut grad = vec![0.0; n_flat];
                let mut traj = vec![[0.0; 3]; steps + 1];
                for lin in c * CHUNK..((c + 1) * CHUNK).min(nvox) {
                    let x = g.voxel_center(lin);
                    traj[0] = x;
                    for s in 0..steps {
                        let y = traj[s];
                        let vel = if h == 0.0 { [0.0; 3] } else { v.velocity_at(y) };
                        traj[s + 1] = [y[0] + h * vel[0], y[1] + h * vel[1], y[2] + h * vel[2]];
                    }
                    let end = traj[steps];
                    let idx = g.voxel_index(lin);
                    let mut u = [idx[0] as f64, idx[1] as f64, idx[2] as f64];
                    for a in 0..nd {
                        u[a] += (end[a] - x[a]) / sp[a];
                    }
                    let (val, dimg) = self.moving.sample_index_with_gradient(u);
                    let r = self.template.values()[lin] - val;
                    ssd += r * r;
                    if h == 0.0 {
                        continue;
                    }
                    // Adjoint of the end point: d(-r^2 / 2 sigma^2) / dy = (r / sigma^2) grad I_k.
                    let mut lam = [r * inv_var * dimg[0], r * inv_var * dimg[1], r * inv_var * dimg[2]];
                    if lam == [0.0; 3] {
                        continue;
                    }
                    let support = v.basis().kernel().support_radius;
                    let inv_r2 = 1.0 / (support * support);
                    for s in (0..steps).rev() {
                        let y = traj[s];
                        let mut jt_lam = [0.0; 3];
                        v.basis().for_each_neighbor(y, |i, uu, d| {
                            let w = crate::kernel::wendland_c2(uu);
                            let one = 1.0 - uu;
                            let gscale = -20.0 * one * one * one * inv_r2;
                            let a = v.coeffs()[i];
                            for c in 0..nd {
                                grad[i * nd + c] += h * w * lam[c];
                            }
                            let la = lam[0] * a[0] + lam[1] * a[1] + lam[2] * a[2];
                            for b in 0..nd {
                                jt_lam[b] += la * gscale * d[b];
                            }
                        });
                        for b in 0..nd {
                            lam[b] += h * jt_lam[b];
                        }
                    }
                }
                (ssd, grad)
            })
            .collect();
        let mut ssd = 0.0;
        let mut grad = vec![0.0; n_flat];
        for (s, gchunk) in chunks {
            ssd += s;
            for (acc, x) in grad.iter_mut().zip(gchunk) {
                *acc += x;
            }
        }
        (gaussian_log_likelihood(ssd, nvox, self.rc.sigma), grad)
    }
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let v = self.field(x);
        let (ll, gl) = self.likelihood_and_gradient(&v);
        let (lp, gp) = self.prior.log_density_and_gradient(x);
        for ((out, a), b) in grad.iter_mut().zip(gl).zip(gp) {
            *out = a + b;
        }
        ll + lp
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        let v = self.field(x);
        let ssd = residual_sum_sq(self.moving, &v, self.template, &self.rc.flow)
            .expect("geometries validated at construction");
        gaussian_log_likelihood(ssd, self.moving.geometry().voxel_count(), self.rc.sigma)
            + self.prior.log_density(x)
    }
}

/// Prior-only target (the posterior with zero likelihood weight).
pub struct PriorTarget<'a>(pub &'a GaussianPrior);

impl LogDensity for PriorTarget<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn log_density_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (lp, g) = self.0.log_density_and_gradient(x);
        grad.copy_from_slice(&g);
        lp
    }
}
