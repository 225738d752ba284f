//! Monte-Carlo EM estimation of the template `I_T` and noise level `sigma`.
//!
//! E-step: HMC draws of velocity coefficients for every observation given the
//! current template. M-step: closed-form mean of the warped observations and
//! the pooled residual variance.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{exponentiate, FlowConfig};
use crate::grid::{warp_image, GridGeometry, ScalarVolume};
use crate::hmc::{run_chain, ChainDiagnostics, HmcConfig};
use crate::kernel::{GaussianPrior, KernelBasis, KernelConfig, KernelVelocityField};
use crate::posterior::{gaussian_log_likelihood, Posterior, RegistrationConfig};
use crate::rng::chain_seed;

/// Relative noise floor: `sigma >= SIGMA_FLOOR_FRACTION * intensity range`.
pub const SIGMA_FLOOR_FRACTION: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub iterations: usize,
    pub hmc: HmcConfig,
    /// Start each chain from the previous iteration's final state and step size.
    pub warm_start: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            iterations: 10,
            hmc: HmcConfig::default(),
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTraceEntry {
    pub iteration: usize,
    /// Complete-data negative log posterior per Monte-Carlo sample, after the M-step.
    pub neg_log_posterior: f64,
    pub sigma: f64,
    pub acceptance_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateModel {
    pub template: ScalarVolume,
    pub sigma: f64,
    pub sigma_floor: f64,
    pub kernel: KernelConfig,
    pub flow: FlowConfig,
    pub em_trace: Vec<EmTraceEntry>,
}

impl TemplateModel {
    pub fn geometry(&self) -> &GridGeometry {
        self.template.geometry()
    }

    pub fn basis(&self) -> Result<Arc<KernelBasis>> {
        Ok(Arc::new(KernelBasis::new(self.geometry(), self.kernel.clone())?))
    }

    pub fn registration_config(&self) -> RegistrationConfig {
        RegistrationConfig {
            lambda: 1.0,
            sigma: self.sigma,
            flow: self.flow,
        }
    }
}

/// Chain state carried between EM iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmState {
    pub position: Vec<f64>,
    pub step_size: f64,
}

/// Everything needed to resume an interrupted estimation bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: TemplateModel,
    /// Completed EM iterations.
    pub iteration: usize,
    pub warm: Vec<WarmState>,
    /// Last E-step samples, flat coefficients per image.
    pub samples: Vec<Vec<Vec<f64>>>,
}

fn check_images(images: &[ScalarVolume]) -> Result<&GridGeometry> {
    if images.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "template estimation needs at least 2 images, got {}",
            images.len()
        )));
    }
    let g = images[0].geometry();
    for (k, im) in images.iter().enumerate().skip(1) {
        g.ensure_same(im.geometry(), &format!("image {k}"))?;
    }
    Ok(g)
}

pub fn sigma_floor(images: &[ScalarVolume]) -> f64 {
    let (lo, hi) = images.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), im| {
        let (a, b) = im.range();
        (lo.min(a), hi.max(b))
    });
    let range = hi - lo;
    // Degenerate all-constant data: treat the range as one intensity unit.
    SIGMA_FLOOR_FRACTION * if range > 0.0 { range } else { 1.0 }
}

/// Voxelwise mean template; sigma from the pooled voxelwise variance.
pub fn initialize_template(images: &[ScalarVolume], kernel: KernelConfig, flow: FlowConfig) -> Result<TemplateModel> {
    let g = check_images(images)?.clone();
    kernel.validate()?;
    let n = images.len() as f64;
    let nvox = g.voxel_count();
    let mut mean = vec![0.0; nvox];
    for im in images {
        for (m, v) in mean.iter_mut().zip(im.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut ss = 0.0;
    for im in images {
        for (m, v) in mean.iter().zip(im.values()) {
            ss += (v - m) * (v - m);
        }
    }
    let floor = sigma_floor(images);
    let sigma = (ss / (n * nvox as f64)).sqrt().max(floor);
    Ok(TemplateModel {
        template: ScalarVolume::new(g, mean)?,
        sigma,
        sigma_floor: floor,
        kernel,
        flow,
        em_trace: Vec::new(),
    })
}

#[derive(Debug, Clone)]
pub struct EStepResult {
    pub samples: Vec<Vec<KernelVelocityField>>,
    pub diagnostics: Vec<ChainDiagnostics>,
    pub warm: Vec<WarmState>,
}

/// Draws `cfg.hmc.samples` posterior fields per image against the current template.
pub fn e_step(
    images: &[ScalarVolume],
    model: &TemplateModel,
    prior: &GaussianPrior,
    cfg: &EmConfig,
    iteration: usize,
    warm: Option<&[WarmState]>,
) -> Result<EStepResult> {
    check_images(images)?;
    let rc = model.registration_config();
    let dim = prior.dim();
    let per_image: Vec<Result<(Vec<KernelVelocityField>, ChainDiagnostics, WarmState)>> = images
        .par_iter()
        .enumerate()
        .map(|(k, im)| {
            let target = Posterior::new(im, &model.template, prior, rc)?;
            let (init, step_size) = match warm.filter(|_| cfg.warm_start).and_then(|w| w.get(k)) {
                Some(w) => (w.position.clone(), w.step_size),
                None => (vec![0.0; dim], cfg.hmc.step_size),
            };
            let hmc = HmcConfig {
                step_size,
                seed: chain_seed(cfg.hmc.seed, k as u64, iteration as u64),
                ..cfg.hmc
            };
            let chain = run_chain(&target, init, &hmc).map_err(|e| match e {
                Error::DegenerateChain { acceptance, floor, .. } => Error::DegenerateChain {
                    acceptance,
                    floor,
                    subject: Some(k),
                },
                other => other,
            })?;
            let fields = chain
                .samples
                .iter()
                .map(|s| KernelVelocityField::from_flat(prior.basis().clone(), s))
                .collect::<Result<Vec<_>>>()?;
            let warm = WarmState {
                position: chain.last.position,
                step_size: chain.diagnostics.tuned_step_size,
            };
            Ok((fields, chain.diagnostics, warm))
        })
        .collect();
    let mut out = EStepResult {
        samples: Vec::with_capacity(images.len()),
        diagnostics: Vec::with_capacity(images.len()),
        warm: Vec::with_capacity(images.len()),
    };
    for r in per_image {
        let (f, d, w) = r?;
        out.samples.push(f);
        out.diagnostics.push(d);
        out.warm.push(w);
    }
    Ok(out)
}

/// `I_k o Exp(v_ks)` for every image and sample, in (k, s) order.
pub fn warped_observations(
    images: &[ScalarVolume],
    samples: &[Vec<KernelVelocityField>],
    flow: &FlowConfig,
) -> Result<Vec<Vec<ScalarVolume>>> {
    if samples.len() != images.len() {
        return Err(Error::InvalidInput(format!(
            "{} sample lists for {} images",
            samples.len(),
            images.len()
        )));
    }
    images
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(k, (im, ss))| {
            if ss.is_empty() {
                return Err(Error::InvalidInput(format!("no samples for image {k}")));
            }
            ss.iter()
                .map(|v| warp_image(im, &exponentiate(v, im.geometry(), flow)?))
                .collect()
        })
        .collect()
}

/// Closed-form template and sigma given warped observations.
pub fn m_step_from_warped(warped: &[Vec<ScalarVolume>], sigma_floor: f64) -> Result<(ScalarVolume, f64)> {
    let first = warped
        .first()
        .and_then(|w| w.first())
        .ok_or_else(|| Error::InvalidInput("M-step needs at least one sample".into()))?;
    let g = first.geometry().clone();
    let nvox = g.voxel_count();
    let count = warped.iter().map(|w| w.len()).sum::<usize>() as f64;
    let mut mean = vec![0.0; nvox];
    for w in warped.iter().flatten() {
        g.ensure_same(w.geometry(), "m_step")?;
        for (m, v) in mean.iter_mut().zip(w.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut ss = 0.0;
    for w in warped.iter().flatten() {
        for (m, v) in mean.iter().zip(w.values()) {
            ss += (m - v) * (m - v);
        }
    }
    let sigma = (ss / (count * nvox as f64)).sqrt().max(sigma_floor);
    Ok((ScalarVolume::new(g, mean)?, sigma))
}

pub fn m_step(
    images: &[ScalarVolume],
    samples: &[Vec<KernelVelocityField>],
    model: &TemplateModel,
) -> Result<TemplateModel> {
    let warped = warped_observations(images, samples, &model.flow)?;
    let (template, sigma) = m_step_from_warped(&warped, model.sigma_floor)?;
    Ok(TemplateModel {
        template,
        sigma,
        ..model.clone()
    })
}

/// `sum_{k,s} -log p(I_k | v_ks, I_T, sigma)` over precomputed warped observations.
pub fn complete_data_nll(warped: &[Vec<ScalarVolume>], template: &ScalarVolume, sigma: f64) -> Result<f64> {
    let nvox = template.geometry().voxel_count();
    let mut total = 0.0;
    for w in warped.iter().flatten() {
        total -= gaussian_log_likelihood(template.sum_sq_diff(w)?, nvox, sigma);
    }
    Ok(total)
}

/// Runs the full estimation, calling `on_iteration` with a checkpoint after every iteration.
pub fn estimate_template_with(
    images: &[ScalarVolume],
    kernel_cfg: KernelConfig,
    em_cfg: &EmConfig,
    rc: &RegistrationConfig,
    resume: Option<Checkpoint>,
    mut on_iteration: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TemplateModel> {
    if em_cfg.iterations < 1 {
        return Err(Error::InvalidInput("EM needs at least one iteration".into()));
    }
    em_cfg.hmc.validate()?;
    rc.flow.validate()?;
    let (mut model, start, mut warm) = match resume {
        Some(c) => {
            check_images(images)?.ensure_same(c.model.geometry(), "checkpoint template")?;
            (c.model, c.iteration, Some(c.warm))
        }
        None => (initialize_template(images, kernel_cfg, rc.flow)?, 0, None),
    };
    let prior = GaussianPrior::new(model.basis()?)?;
    for it in start..em_cfg.iterations {
        let es = e_step(images, &model, &prior, em_cfg, it, warm.as_deref())?;
        let warped = warped_observations(images, &es.samples, &model.flow)?;
        let (template, sigma) = m_step_from_warped(&warped, model.sigma_floor)?;
        let s_total = es.samples.iter().map(|s| s.len()).sum::<usize>() as f64;
        let nll = complete_data_nll(&warped, &template, sigma)?;
        let neg_prior: f64 = es
            .samples
            .iter()
            .flatten()
            .map(|v| -prior.log_density(&v.to_flat()))
            .sum();
        let per_image_s = s_total / images.len() as f64;
        model.template = template;
        model.sigma = sigma;
        model.em_trace.push(EmTraceEntry {
            iteration: it,
            neg_log_posterior: (nll + neg_prior) / per_image_s,
            sigma,
            acceptance_rates: es.diagnostics.iter().map(|d| d.acceptance_rate).collect(),
        });
        log::info!(
            "EM iteration {}: sigma {:.5}, mean acceptance {:.3}",
            it + 1,
            sigma,
            es.diagnostics.iter().map(|d| d.acceptance_rate).sum::<f64>() / images.len() as f64
        );
        let ckpt = Checkpoint {
            model: model.clone(),
            iteration: it + 1,
            warm: es.warm.clone(),
            samples: es
                .samples
                .iter()
                .map(|ss| ss.iter().map(|v| v.to_flat()).collect())
                .collect(),
        };
        on_iteration(&ckpt)?;
        warm = Some(es.warm);
    }
    Ok(model)
}

pub fn estimate_template(
    images: &[ScalarVolume],
    kernel_cfg: KernelConfig,
    em_cfg: &EmConfig,
    rc: &RegistrationConfig,
) -> Result<TemplateModel> {
    estimate_template_with(images, kernel_cfg, em_cfg, rc, None, |_| Ok(()))
}
