//! Synthetic 2D populations with known ground truth.
//!
//! A smooth base image (two overlapping ellipses of tissue plus a bright
//! round lesion) is deformed by prior-drawn kernel velocity fields, one per
//! subject, and corrupted with additive Gaussian noise. The lesion mask is
//! deformed with the same field to give the labels. All subject intensities
//! are rounded to `f32` so that stored and in-memory volumes agree exactly.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{exponentiate, min_jacobian, FlowConfig};
use crate::grid::{warp_image, warp_labels, GridGeometry, LabelVolume, Point, ScalarVolume};
use crate::io::{save_labels, save_scalar, write_json, VolumeFormat};
use crate::kernel::{GaussianPrior, KernelBasis, KernelConfig, KernelVelocityField, DEFAULT_CONTROL_SPACING};
use crate::pipeline::{DatasetManifest, SubjectEntry};
use crate::rng::{mix_seed, rng_from_seed};

const TISSUE_INTENSITY: f64 = 0.5;
const LESION_INTENSITY: f64 = 1.0;
/// Width (in voxels) of the logistic edge ramp.
const EDGE_WIDTH: f64 = 0.75;
const FIELD_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PopulationConfig {
    pub subjects: usize,
    pub dims: [usize; 2],
    pub spacing: [f64; 2],
    /// Multiplier applied to every prior-drawn velocity field; 0 disables deformation.
    pub deformation_scale: f64,
    /// Standard deviation of additive intensity noise; 0 gives noiseless subjects.
    pub noise_sd: f64,
    pub control_spacing: usize,
    /// Defaults to twice the physical control spacing.
    pub support_radius: Option<f64>,
    pub flow_steps: usize,
    pub seed: u64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            subjects: 10,
            dims: [32, 32],
            spacing: [1.0, 1.0],
            deformation_scale: 1.0,
            noise_sd: 0.02,
            control_spacing: DEFAULT_CONTROL_SPACING,
            support_radius: None,
            flow_steps: crate::flow::DEFAULT_FLOW_STEPS,
            seed: 0,
        }
    }
}

impl PopulationConfig {
    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(&self.dims, &self.spacing, &[0.0, 0.0])
    }

    pub fn kernel(&self) -> Result<KernelConfig> {
        let g = self.geometry()?;
        match self.support_radius {
            Some(r) => KernelConfig::new(r, self.control_spacing),
            None => KernelConfig::for_geometry(&g, self.control_spacing),
        }
    }

    pub fn flow(&self) -> Result<FlowConfig> {
        FlowConfig::new(self.flow_steps, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects < 1 {
            return Err(Error::InvalidInput("population needs at least one subject".into()));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::InvalidInput(format!(
                "synthetic images need at least 8 voxels per axis, got {:?}",
                self.dims
            )));
        }
        if !(self.deformation_scale.is_finite() && self.deformation_scale >= 0.0) {
            return Err(Error::InvalidInput("deformation scale must be non-negative".into()));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::InvalidInput("noise sd must be non-negative".into()));
        }
        self.kernel()?;
        self.flow()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub id: String,
    pub field_seed: u64,
    pub noise_seed: u64,
    /// Flat velocity coefficients after scaling, point-major.
    pub coefficients: Vec<f64>,
    pub min_jacobian: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: PopulationConfig,
    pub kernel: KernelConfig,
    pub flow: FlowConfig,
    /// Template intensities above this value belong to the mean shape.
    pub shape_threshold: f64,
    pub subjects: Vec<SubjectTruth>,
}

#[derive(Debug, Clone)]
pub struct Population {
    /// Noiseless, undeformed base image: the population mean image.
    pub mean_image: ScalarVolume,
    /// Foreground mask of the base image.
    pub mean_shape: LabelVolume,
    pub base_labels: LabelVolume,
    pub images: Vec<ScalarVolume>,
    pub labels: Vec<LabelVolume>,
    pub truth: GroundTruth,
}

fn logistic_inside(signed_dist: f64) -> f64 {
    1.0 / (1.0 + (signed_dist / EDGE_WIDTH).exp())
}

/// Approximate signed distance (in voxels) to an axis-aligned ellipse.
fn ellipse_distance(p: [f64; 2], c: [f64; 2], r: [f64; 2]) -> f64 {
    let q = [(p[0] - c[0]) / r[0], (p[1] - c[1]) / r[1]];
    let rho = (q[0] * q[0] + q[1] * q[1]).sqrt();
    (rho - 1.0) * r[0].min(r[1])
}

struct Shape {
    tissue: [([f64; 2], [f64; 2]); 2],
    lesion: ([f64; 2], f64),
}

impl Shape {
    fn for_dims(dims: [usize; 2]) -> Shape {
        let (w, h) = (dims[0] as f64 - 1.0, dims[1] as f64 - 1.0);
        Shape {
            tissue: [
                ([0.45 * w, 0.5 * h], [0.3 * w, 0.34 * h]),
                ([0.6 * w, 0.52 * h], [0.24 * w, 0.22 * h]),
            ],
            lesion: ([0.58 * w, 0.42 * h], 0.1 * w.min(h)),
        }
    }

    fn tissue(&self, p: [f64; 2]) -> f64 {
        self.tissue
            .iter()
            .map(|&(c, r)| logistic_inside(ellipse_distance(p, c, r)))
            .fold(0.0, f64::max)
    }

    fn lesion(&self, p: [f64; 2]) -> f64 {
        let (c, r) = self.lesion;
        logistic_inside(ellipse_distance(p, c, [r, r]))
    }

    fn intensity(&self, p: [f64; 2]) -> f64 {
        TISSUE_INTENSITY * self.tissue(p) + (LESION_INTENSITY - TISSUE_INTENSITY) * self.lesion(p)
    }
}

fn voxel_coords(g: &GridGeometry, p: Point) -> [f64; 2] {
    let u = g.physical_to_index(p);
    [u[0], u[1]]
}

/// Noiseless base image, its foreground mask and its lesion labels.
pub fn base_volumes(cfg: &PopulationConfig) -> Result<(ScalarVolume, LabelVolume, LabelVolume)> {
    let g = cfg.geometry()?;
    let shape = Shape::for_dims(cfg.dims);
    let image = ScalarVolume::from_fn(g.clone(), |p| shape.intensity(voxel_coords(&g, p)) as f32 as f64)?;
    let threshold = 0.5 * TISSUE_INTENSITY;
    let fg = image.values().iter().map(|&v| (v > threshold) as u32).collect();
    let lesion = (0..g.voxel_count())
        .map(|lin| (shape.lesion(voxel_coords(&g, g.voxel_center(lin))) > 0.5) as u32)
        .collect();
    Ok((image, LabelVolume::new(g.clone(), fg)?, LabelVolume::new(g, lesion)?))
}

/// Builds subject `k` from its recorded coefficients and noise seed.
pub fn render_subject(
    truth: &GroundTruth,
    k: usize,
    base_image: &ScalarVolume,
    base_labels: &LabelVolume,
    basis: &Arc<KernelBasis>,
) -> Result<(ScalarVolume, LabelVolume)> {
    let st = truth
        .subjects
        .get(k)
        .ok_or_else(|| Error::InvalidInput(format!("no subject {k} in ground truth")))?;
    let v = KernelVelocityField::from_flat(basis.clone(), &st.coefficients)?;
    let d = exponentiate(&v, base_image.geometry(), &truth.flow)?;
    let warped = warp_image(base_image, &d)?;
    let labels = warp_labels(base_labels, &d)?;
    let sd = truth.config.noise_sd;
    let mut rng = rng_from_seed(st.noise_seed);
    let values = warped
        .values()
        .iter()
        .map(|&x| {
            let n = if sd > 0.0 { sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            (x + n) as f32 as f64
        })
        .collect();
    Ok((ScalarVolume::new(warped.geometry().clone(), values)?, labels))
}

pub fn subject_id(k: usize) -> String {
    format!("sub-{k:03}")
}

pub fn synthesize(cfg: &PopulationConfig) -> Result<Population> {
    cfg.validate()?;
    let g = cfg.geometry()?;
    let kernel = cfg.kernel()?;
    let flow = cfg.flow()?;
    let basis = Arc::new(KernelBasis::new(&g, kernel.clone())?);
    let prior = GaussianPrior::new(basis.clone())?;
    let (mean_image, mean_shape, base_labels) = base_volumes(cfg)?;

    let mut subjects = Vec::with_capacity(cfg.subjects);
    for k in 0..cfg.subjects {
        let field_seed = mix_seed(&[cfg.seed, k as u64, FIELD_STREAM]);
        let noise_seed = mix_seed(&[cfg.seed, k as u64, NOISE_STREAM]);
        let v = prior.sample(&mut rng_from_seed(field_seed)).scaled(cfg.deformation_scale);
        let d = exponentiate(&v, &g, &flow)?;
        subjects.push(SubjectTruth {
            id: subject_id(k),
            field_seed,
            noise_seed,
            coefficients: v.to_flat(),
            min_jacobian: min_jacobian(&d),
        });
    }
    let truth = GroundTruth {
        config: cfg.clone(),
        kernel,
        flow,
        shape_threshold: 0.5 * TISSUE_INTENSITY,
        subjects,
    };
    let mut images = Vec::with_capacity(cfg.subjects);
    let mut labels = Vec::with_capacity(cfg.subjects);
    for k in 0..cfg.subjects {
        let (im, lb) = render_subject(&truth, k, &mean_image, &base_labels, &basis)?;
        images.push(im);
        labels.push(lb);
    }
    Ok(Population {
        mean_image,
        mean_shape,
        base_labels,
        images,
        labels,
        truth,
    })
}

/// Paths written by [`write_population`].
#[derive(Debug, Clone)]
pub struct PopulationFiles {
    pub manifest: PathBuf,
    pub ground_truth: PathBuf,
    pub mean_image: PathBuf,
    pub mean_shape: PathBuf,
}

/// Writes subjects, a dataset manifest, the ground-truth record and the mean volumes.
pub fn write_population(pop: &Population, out: &Path, format: VolumeFormat) -> Result<PopulationFiles> {
    let ext = format.suffix();
    let mut entries = Vec::with_capacity(pop.images.len());
    for (k, (im, lb)) in pop.images.iter().zip(&pop.labels).enumerate() {
        let id = subject_id(k);
        let img_name = format!("{id}_image{ext}");
        let lbl_name = format!("{id}_label{ext}");
        save_scalar(im, &out.join(&img_name))?;
        save_labels(lb, &out.join(&lbl_name))?;
        entries.push(SubjectEntry {
            id,
            images: vec![PathBuf::from(img_name)],
            label: PathBuf::from(lbl_name),
        });
    }
    let files = PopulationFiles {
        manifest: out.join("manifest.json"),
        ground_truth: out.join("ground_truth.json"),
        mean_image: out.join(format!("mean_image{ext}")),
        mean_shape: out.join(format!("mean_shape{ext}")),
    };
    save_scalar(&pop.mean_image, &files.mean_image)?;
    save_labels(&pop.mean_shape, &files.mean_shape)?;
    write_json(&pop.truth, &files.ground_truth)?;
    let manifest = DatasetManifest {
        subjects: entries,
        dims: Some(pop.mean_image.geometry().dims().to_vec()),
        spacing: Some(pop.mean_image.geometry().spacing().to_vec()),
    };
    write_json(&manifest, &files.manifest)?;
    Ok(files)
}
