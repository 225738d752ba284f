//! Dataset manifests and the end-to-end augmentation pipelines.
//!
//! Both pipelines write, for every subject `n` and augmentation `a`, the
//! warped channels and label next to a provenance record, then an output
//! manifest listing every emitted pair (and the copied originals when asked).
//! Every random draw is keyed by `(seed, subject, augmentation)`, so outputs do
//! not depend on the number of worker threads.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{sample_bspline_field, BsplineConfig};
use crate::em::{Checkpoint, TemplateModel};
use crate::error::{Error, Result};
use crate::flow::{exponentiate, min_jacobian};
use crate::grid::{warp_image, warp_labels, DisplacementField, GridGeometry, LabelVolume, ScalarVolume};
use crate::hmc::{run_chain, ChainDiagnostics, HmcConfig};
use crate::io::{load_labels, load_scalar, save_labels, save_scalar, volume_files, write_json, VolumeFormat};
use crate::kernel::GaussianPrior;
use crate::posterior::Posterior;
use crate::rng::{mix_seed, rng_from_seed};

const CHAIN_STREAM: u64 = 0x70;
const TIME_STREAM: u64 = 0x71;
const BSPLINE_STREAM: u64 = 0x72;

/// Control-point counts of the baseline parameter grid.
pub const BASELINE_GRID_CP: [usize; 3] = [4, 8, 16];
/// Control-displacement standard deviations (voxels) of the baseline parameter grid.
pub const BASELINE_GRID_SD: [f64; 3] = [2.0, 4.0, 6.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    /// One path per channel, relative to the manifest's directory.
    pub images: Vec<PathBuf>,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectEntry>,
    /// Expected grid size; checked at load when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LoadedSubject {
    pub id: String,
    pub images: Vec<ScalarVolume>,
    pub label: LabelVolume,
    pub entry: SubjectEntry,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// Directory the manifest paths are relative to.
    pub root: PathBuf,
    pub geometry: GridGeometry,
    pub subjects: Vec<LoadedSubject>,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.subjects[0].images.len()
    }

    /// Channel `c` of every subject, for template estimation.
    pub fn channel_images(&self, c: usize) -> Result<Vec<ScalarVolume>> {
        if c >= self.channels() {
            return Err(Error::InvalidInput(format!(
                "channel {c} requested but subjects have {} channel(s)",
                self.channels()
            )));
        }
        Ok(self.subjects.iter().map(|s| s.images[c].clone()).collect())
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Loads every subject named in the manifest and checks they share one grid.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = crate::io::read_json(manifest_path)?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    if manifest.subjects.is_empty() {
        return Err(Error::format(manifest_path, "manifest lists no subjects"));
    }
    let mut ids = HashSet::new();
    for s in &manifest.subjects {
        if !ids.insert(s.id.as_str()) {
            return Err(Error::format(manifest_path, format!("duplicate subject id {:?}", s.id)));
        }
        if s.images.is_empty() {
            return Err(Error::format(manifest_path, format!("subject {:?} has no images", s.id)));
        }
        if s.images.len() != manifest.subjects[0].images.len() {
            return Err(Error::format(
                manifest_path,
                format!("subject {:?} has a different number of channels", s.id),
            ));
        }
        for p in s.images.iter().chain(std::iter::once(&s.label)) {
            let full = resolve(&root, p);
            for f in volume_files(&full)? {
                if !f.exists() {
                    return Err(Error::format(manifest_path, format!("missing file {}", f.display())));
                }
            }
        }
    }
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for s in &manifest.subjects {
        let images = s
            .images
            .iter()
            .map(|p| load_scalar(&resolve(&root, p)))
            .collect::<Result<Vec<_>>>()?;
        let label = load_labels(&resolve(&root, &s.label))?;
        subjects.push(LoadedSubject {
            id: s.id.clone(),
            images,
            label,
            entry: s.clone(),
        });
    }
    let geometry = subjects[0].label.geometry().clone();
    for s in &subjects {
        for (c, im) in s.images.iter().enumerate() {
            geometry.ensure_same(im.geometry(), &format!("subject {} channel {c}", s.id))?;
        }
        geometry.ensure_same(s.label.geometry(), &format!("subject {} label", s.id))?;
    }
    if let Some(d) = &manifest.dims {
        if d.as_slice() != geometry.dims() {
            return Err(Error::GeometryMismatch(format!(
                "manifest expects dims {d:?}, volumes have {:?}",
                geometry.dims()
            )));
        }
    }
    if let Some(sp) = &manifest.spacing {
        let ok = sp.len() == geometry.ndim()
            && sp.iter().zip(geometry.spacing()).all(|(a, b)| (a - b).abs() <= 1e-6 * b.abs());
        if !ok {
            return Err(Error::GeometryMismatch(format!(
                "manifest expects spacing {sp:?}, volumes have {:?}",
                geometry.spacing()
            )));
        }
    }
    Ok(Dataset {
        root,
        geometry,
        subjects,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Paddit,
    Bspline,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Paddit => "paddit",
            Method::Bspline => "bspline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationSpec {
    pub method: Method,
    /// Augmentations per subject `A`.
    pub augmentations: usize,
    pub seed: u64,
    pub include_originals: bool,
    /// Replaces the uniform draw of the integration time (testing aid).
    pub force_time: Option<f64>,
    /// Use the estimation checkpoint's last E-step samples instead of fresh chains.
    pub reuse_samples: bool,
    /// Channel the posterior chains register against the template.
    pub channel: usize,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            method: Method::Paddit,
            augmentations: 2,
            seed: 0,
            include_originals: false,
            force_time: None,
            reuse_samples: false,
            channel: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.augmentations < 1 {
            return Err(Error::InvalidInput("need at least one augmentation per subject".into()));
        }
        if let Some(t) = self.force_time {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidInput(format!("forced time {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairProvenance {
    pub subject: String,
    pub augmentation: usize,
    pub method: Method,
    /// Seed of the chain (PADDIT) or of the control lattice (B-spline).
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<ChainDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reused_sample: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cp: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    pub min_jacobian: f64,
    pub max_displacement_mm: f64,
    pub image_field_checksum: String,
    pub label_field_checksum: String,
    pub source_images: Vec<PathBuf>,
    pub source_label: PathBuf,
    pub images: Vec<PathBuf>,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFailure {
    pub subject: String,
    pub message: String,
    pub numerical: bool,
}

#[derive(Debug, Clone)]
pub struct AugmentReport {
    pub pairs: Vec<PairProvenance>,
    pub originals: usize,
    pub failures: Vec<SubjectFailure>,
    pub manifest: PathBuf,
}

/// One augmented pair before it is written.
struct PairOutput {
    images: Vec<ScalarVolume>,
    label: LabelVolume,
    prov: PairProvenance,
}

fn warp_subject(s: &LoadedSubject, d: &DisplacementField) -> Result<(Vec<ScalarVolume>, LabelVolume, String, String)> {
    let images = s.images.iter().map(|im| warp_image(im, d)).collect::<Result<Vec<_>>>()?;
    let image_sum = d.checksum();
    let label = warp_labels(&s.label, d)?;
    let label_sum = d.checksum();
    Ok((images, label, image_sum, label_sum))
}

fn suffix_of(p: &Path) -> Result<&'static str> {
    Ok(VolumeFormat::from_path(p)?.suffix())
}

fn write_pair(out: &Path, s: &LoadedSubject, mut pair: PairOutput) -> Result<(SubjectEntry, PairProvenance)> {
    let stem = format!("{}_aug{}", s.id, pair.prov.augmentation);
    let mut names = Vec::with_capacity(pair.images.len());
    for (c, im) in pair.images.iter().enumerate() {
        let name = PathBuf::from(format!("{stem}_img{c}{}", suffix_of(&s.entry.images[c])?));
        save_scalar(im, &out.join(&name))?;
        names.push(name);
    }
    let label = PathBuf::from(format!("{stem}_label{}", suffix_of(&s.entry.label)?));
    save_labels(&pair.label, &out.join(&label))?;
    pair.prov.images = names.clone();
    pair.prov.label = label.clone();
    write_json(&pair.prov, &out.join(format!("{stem}_provenance.json")))?;
    Ok((
        SubjectEntry {
            id: stem,
            images: names,
            label,
        },
        pair.prov,
    ))
}

fn copy_volume(src: &Path, dst: &Path) -> Result<()> {
    for (a, b) in volume_files(src)?.iter().zip(volume_files(dst)?) {
        fs::copy(a, &b).map_err(|e| Error::io(&b, e))?;
    }
    Ok(())
}

fn copy_originals(ds: &Dataset, s: &LoadedSubject, out: &Path) -> Result<SubjectEntry> {
    let mut names = Vec::with_capacity(s.entry.images.len());
    for (c, p) in s.entry.images.iter().enumerate() {
        let name = PathBuf::from(format!("{}_orig_img{c}{}", s.id, suffix_of(p)?));
        copy_volume(&resolve(&ds.root, p), &out.join(&name))?;
        names.push(name);
    }
    let label = PathBuf::from(format!("{}_orig_label{}", s.id, suffix_of(&s.entry.label)?));
    copy_volume(&resolve(&ds.root, &s.entry.label), &out.join(&label))?;
    Ok(SubjectEntry {
        id: s.id.clone(),
        images: names,
        label,
    })
}

type SubjectResult = std::result::Result<(Option<SubjectEntry>, Vec<(SubjectEntry, PairProvenance)>), SubjectFailure>;

/// Shared driver: runs `make_pairs` per subject in parallel, writes its output,
/// and assembles the output manifest in subject order.
fn run_pipeline(
    ds: &Dataset,
    spec: &AugmentationSpec,
    out: &Path,
    make_pairs: impl Fn(usize, &LoadedSubject) -> Result<Vec<PairOutput>> + Sync,
) -> Result<AugmentReport> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let results: Vec<Result<SubjectResult>> = ds
        .subjects
        .par_iter()
        .enumerate()
        .map(|(n, s)| {
            let pairs = match make_pairs(n, s) {
                Ok(p) => p,
                Err(e) if e.is_numerical() => {
                    log::error!("subject {} skipped: {e}", s.id);
                    return Ok(Err(SubjectFailure {
                        subject: s.id.clone(),
                        message: e.to_string(),
                        numerical: true,
                    }));
                }
                Err(e) => return Err(e),
            };
            let original = if spec.include_originals {
                Some(copy_originals(ds, s, out)?)
            } else {
                None
            };
            let written = pairs
                .into_iter()
                .map(|p| write_pair(out, s, p))
                .collect::<Result<Vec<_>>>()?;
            Ok(Ok((original, written)))
        })
        .collect();

    let mut entries = Vec::new();
    let mut report = AugmentReport {
        pairs: Vec::new(),
        originals: 0,
        failures: Vec::new(),
        manifest: out.join("manifest.json"),
    };
    for r in results {
        match r? {
            Ok((original, written)) => {
                if let Some(o) = original {
                    entries.push(o);
                    report.originals += 1;
                }
                for (e, p) in written {
                    entries.push(e);
                    report.pairs.push(p);
                }
            }
            Err(f) => report.failures.push(f),
        }
    }
    let manifest = DatasetManifest {
        subjects: entries,
        dims: Some(ds.geometry.dims().to_vec()),
        spacing: Some(ds.geometry.spacing().to_vec()),
    };
    write_json(&manifest, &report.manifest)?;
    Ok(report)
}

fn source_provenance(s: &LoadedSubject) -> (Vec<PathBuf>, PathBuf) {
    (s.entry.images.clone(), s.entry.label.clone())
}

/// Posterior-sampled augmentation: `A` fields per subject from an HMC chain
/// against the template, each integrated to a uniform random time.
pub fn run_paddit(
    ds: &Dataset,
    spec: &AugmentationSpec,
    model: &TemplateModel,
    hmc: &HmcConfig,
    checkpoint: Option<&Checkpoint>,
    out: &Path,
) -> Result<AugmentReport> {
    spec.validate()?;
    ds.geometry.ensure_same(model.geometry(), "template")?;
    if spec.channel >= ds.channels() {
        return Err(Error::InvalidInput(format!(
            "channel {} requested but subjects have {} channel(s)",
            spec.channel,
            ds.channels()
        )));
    }
    let reuse = if spec.reuse_samples {
        let ck = checkpoint.ok_or_else(|| {
            Error::InvalidInput("sample reuse needs the estimation checkpoint".into())
        })?;
        if ck.samples.len() != ds.subjects.len() || ck.samples.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidInput(format!(
                "checkpoint holds samples for {} subjects, dataset has {}",
                ck.samples.len(),
                ds.subjects.len()
            )));
        }
        Some(&ck.samples)
    } else {
        None
    };
    let prior = GaussianPrior::new(model.basis()?)?;
    let rc = model.registration_config();
    run_pipeline(ds, spec, out, |n, s| {
        let seed = mix_seed(&[spec.seed, n as u64, CHAIN_STREAM]);
        let (flats, chain): (Vec<Vec<f64>>, Option<ChainDiagnostics>) = match reuse {
            Some(samples) => {
                let own = &samples[n];
                ((0..spec.augmentations).map(|a| own[a % own.len()].clone()).collect(), None)
            }
            None => {
                let target = Posterior::new(&s.images[spec.channel], &model.template, &prior, rc)?;
                let cfg = HmcConfig {
                    samples: spec.augmentations,
                    seed,
                    ..*hmc
                };
                let c = run_chain(&target, vec![0.0; prior.dim()], &cfg).map_err(|e| match e {
                    Error::DegenerateChain { acceptance, floor, .. } => Error::DegenerateChain {
                        acceptance,
                        floor,
                        subject: Some(n),
                    },
                    other => other,
                })?;
                (c.samples, Some(c.diagnostics))
            }
        };
        let (source_images, source_label) = source_provenance(s);
        flats
            .iter()
            .enumerate()
            .map(|(a, flat)| {
                let time_seed = mix_seed(&[spec.seed, n as u64, a as u64, TIME_STREAM]);
                let t = match spec.force_time {
                    Some(t) => t,
                    None => rng_from_seed(time_seed).random::<f64>(),
                };
                let v = crate::kernel::KernelVelocityField::from_flat(prior.basis().clone(), flat)?;
                let d = exponentiate(&v, &ds.geometry, &model.flow.with_time(t))?;
                let (images, label, image_sum, label_sum) = warp_subject(s, &d)?;
                Ok(PairOutput {
                    images,
                    label,
                    prov: PairProvenance {
                        subject: s.id.clone(),
                        augmentation: a,
                        method: Method::Paddit,
                        seed,
                        t: Some(t),
                        time_seed: spec.force_time.is_none().then_some(time_seed),
                        chain,
                        reused_sample: reuse.map(|r| a % r[n].len()),
                        cp: None,
                        sd: None,
                        min_jacobian: min_jacobian(&d),
                        max_displacement_mm: d.max_norm(),
                        image_field_checksum: image_sum,
                        label_field_checksum: label_sum,
                        source_images: source_images.clone(),
                        source_label: source_label.clone(),
                        images: Vec::new(),
                        label: PathBuf::new(),
                    },
                })
            })
            .collect()
    })
}

/// Random B-spline free-form deformation augmentation.
pub fn run_baseline(
    ds: &Dataset,
    spec: &AugmentationSpec,
    cp: usize,
    sd: f64,
    out: &Path,
) -> Result<AugmentReport> {
    BsplineConfig { cp, sd, seed: 0 }.validate()?;
    run_pipeline(ds, spec, out, |n, s| {
        let (source_images, source_label) = source_provenance(s);
        (0..spec.augmentations)
            .map(|a| {
                let seed = mix_seed(&[spec.seed, n as u64, a as u64, BSPLINE_STREAM]);
                let cfg = BsplineConfig { cp, sd, seed };
                let d = sample_bspline_field(&cfg, &ds.geometry, &mut rng_from_seed(seed))?;
                let (images, label, image_sum, label_sum) = warp_subject(s, &d)?;
                Ok(PairOutput {
                    images,
                    label,
                    prov: PairProvenance {
                        subject: s.id.clone(),
                        augmentation: a,
                        method: Method::Bspline,
                        seed,
                        t: None,
                        time_seed: None,
                        chain: None,
                        reused_sample: None,
                        cp: Some(cp),
                        sd: Some(sd),
                        min_jacobian: min_jacobian(&d),
                        max_displacement_mm: d.max_norm(),
                        image_field_checksum: image_sum,
                        label_field_checksum: label_sum,
                        source_images: source_images.clone(),
                        source_label: source_label.clone(),
                        images: Vec::new(),
                        label: PathBuf::new(),
                    },
                })
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub cp: usize,
    pub sd: f64,
    pub directory: PathBuf,
    pub pairs: usize,
    pub min_jacobian: f64,
    pub mean_min_jacobian: f64,
    /// Pairs whose field folds somewhere (min Jacobian determinant <= 0).
    pub folded_pairs: usize,
}

/// Runs the B-spline baseline for every `(cp, sd)` combination.
pub fn baseline_grid(
    ds: &Dataset,
    spec: &AugmentationSpec,
    cps: &[usize],
    sds: &[f64],
    out: &Path,
) -> Result<Vec<GridCell>> {
    let mut cells = Vec::with_capacity(cps.len() * sds.len());
    for &cp in cps {
        for &sd in sds {
            let dir = PathBuf::from(format!("cp{cp}_sd{sd}"));
            let report = run_baseline(ds, spec, cp, sd, &out.join(&dir))?;
            let mins: Vec<f64> = report.pairs.iter().map(|p| p.min_jacobian).collect();
            let cell = GridCell {
                cp,
                sd,
                directory: dir,
                pairs: mins.len(),
                min_jacobian: mins.iter().cloned().fold(f64::INFINITY, f64::min),
                mean_min_jacobian: mins.iter().sum::<f64>() / mins.len().max(1) as f64,
                folded_pairs: mins.iter().filter(|&&m| m <= 0.0).count(),
            };
            log::info!(
                "baseline cp={cp} sd={sd}: min Jacobian {:.4}, {} folded of {}",
                cell.min_jacobian,
                cell.folded_pairs,
                cell.pairs
            );
            cells.push(cell);
        }
    }
    write_json(&cells, &out.join("grid_summary.json"))?;
    Ok(cells)
}
