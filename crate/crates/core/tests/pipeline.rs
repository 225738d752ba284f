mod common;

use std::fs;
use std::path::Path;

use diffaug_core::em::{initialize_template, Checkpoint, TemplateModel};
use diffaug_core::flow::FlowConfig;
use diffaug_core::hmc::HmcConfig;
use diffaug_core::kernel::KernelConfig;
use diffaug_core::pipeline::{baseline_grid, load_dataset, run_baseline, run_paddit, Dataset, DatasetManifest};
use diffaug_core::{AugmentationSpec, Error, Method, VolumeFormat};

use common::{small_population, tree};

fn quick_hmc() -> HmcConfig {
    HmcConfig {
        step_size: 0.05,
        leapfrog_steps: 5,
        burn_in: 10,
        samples: 2,
        thin: 1,
        seed: 0,
    }
}

fn mean_model(ds: &Dataset) -> TemplateModel {
    let kernel = KernelConfig::for_geometry(&ds.geometry, 8).unwrap();
    initialize_template(&ds.channel_images(0).unwrap(), kernel, FlowConfig::default()).unwrap()
}

fn setup(dir: &Path, format: VolumeFormat) -> (Dataset, TemplateModel) {
    let files = small_population(&dir.join("data"), 3, [16, 16], format);
    let ds = load_dataset(&files.manifest).unwrap();
    let model = mean_model(&ds);
    (ds, model)
}

fn spec(method: Method) -> AugmentationSpec {
    AugmentationSpec {
        method,
        augmentations: 2,
        seed: 5,
        ..AugmentationSpec::default()
    }
}

#[test]
fn zero_time_reproduces_inputs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, model) = setup(dir.path(), VolumeFormat::NiftiGz);
    let spec = AugmentationSpec {
        force_time: Some(0.0),
        include_originals: true,
        ..spec(Method::Paddit)
    };
    let out = dir.path().join("out");
    let report = run_paddit(&ds, &spec, &model, &quick_hmc(), None, &out).unwrap();
    assert_eq!(report.pairs.len(), 6);
    for s in &ds.subjects {
        let orig_img = fs::read(out.join(format!("{}_orig_img0.nii.gz", s.id))).unwrap();
        let orig_lbl = fs::read(out.join(format!("{}_orig_label.nii.gz", s.id))).unwrap();
        for a in 0..2 {
            assert_eq!(fs::read(out.join(format!("{}_aug{a}_img0.nii.gz", s.id))).unwrap(), orig_img);
            assert_eq!(fs::read(out.join(format!("{}_aug{a}_label.nii.gz", s.id))).unwrap(), orig_lbl);
        }
    }
    assert!(report.pairs.iter().all(|p| p.min_jacobian == 1.0 && p.max_displacement_mm == 0.0));
}

#[test]
fn output_counts_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, model) = setup(dir.path(), VolumeFormat::Raw);
    for include in [false, true] {
        let spec = AugmentationSpec {
            include_originals: include,
            ..spec(Method::Paddit)
        };
        let out = dir.path().join(format!("out{include}"));
        let report = run_paddit(&ds, &spec, &model, &quick_hmc(), None, &out).unwrap();
        assert_eq!(report.pairs.len(), 2 * ds.subjects.len());
        assert_eq!(report.originals, if include { 3 } else { 0 });
        // The output manifest is itself a loadable dataset.
        let again = load_dataset(&report.manifest).unwrap();
        assert_eq!(again.subjects.len(), if include { 9 } else { 6 });
        assert_eq!(again.subjects[0].id, if include { "sub-000" } else { "sub-000_aug0" });
        for p in &report.pairs {
            let t = p.t.unwrap();
            assert!((0.0..=1.0).contains(&t));
            assert!(p.chain.is_some() && p.time_seed.is_some());
            assert!(p.min_jacobian > 0.0);
            assert!(out.join(format!("{}_aug{}_provenance.json", p.subject, p.augmentation)).exists());
        }
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, model) = setup(dir.path(), VolumeFormat::Nifti);
    let run = |threads: usize, method: Method| {
        let out = dir.path().join(format!("{method:?}{threads}"));
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| match method {
            Method::Paddit => run_paddit(&ds, &spec(method), &model, &quick_hmc(), None, &out).unwrap(),
            Method::Bspline => run_baseline(&ds, &spec(method), 4, 3.0, &out).unwrap(),
        });
        tree(&out)
    };
    for method in [Method::Paddit, Method::Bspline] {
        let one = run(1, method);
        let two = run(2, method);
        assert_eq!(one.len(), two.len());
        assert!(one == two, "{method:?} outputs differ between thread counts");
    }
}

#[test]
fn baseline_fields_are_shared_between_image_and_label() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = setup(dir.path(), VolumeFormat::Raw);
    let report = run_baseline(&ds, &spec(Method::Bspline), 8, 4.0, &dir.path().join("b")).unwrap();
    assert_eq!(report.pairs.len(), 6);
    for p in &report.pairs {
        assert_eq!(p.image_field_checksum, p.label_field_checksum);
        assert_eq!((p.cp, p.sd), (Some(8), Some(4.0)));
    }
    let sums: std::collections::BTreeSet<_> = report.pairs.iter().map(|p| &p.image_field_checksum).collect();
    assert_eq!(sums.len(), 6, "each pair draws its own field");
}

#[test]
fn zero_sd_baseline_reproduces_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = setup(dir.path(), VolumeFormat::Raw);
    let spec = AugmentationSpec {
        include_originals: true,
        ..spec(Method::Bspline)
    };
    let out = dir.path().join("b");
    run_baseline(&ds, &spec, 4, 0.0, &out).unwrap();
    for s in &ds.subjects {
        for (orig, aug) in [("orig_img0.raw", "aug1_img0.raw"), ("orig_label.raw", "aug0_label.raw")] {
            let a = fs::read(out.join(format!("{}_{orig}", s.id))).unwrap();
            let b = fs::read(out.join(format!("{}_{aug}", s.id))).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn baseline_grid_reports_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, _) = setup(dir.path(), VolumeFormat::Raw);
    let spec = AugmentationSpec {
        augmentations: 1,
        ..spec(Method::Bspline)
    };
    let out = dir.path().join("grid");
    let cells = baseline_grid(&ds, &spec, &[4, 8], &[0.0, 6.0], &out).unwrap();
    assert_eq!(cells.len(), 4);
    for c in &cells {
        assert_eq!(c.pairs, 3);
        assert!(c.min_jacobian.is_finite());
        assert!(out.join(&c.directory).join("manifest.json").exists());
        if c.sd == 0.0 {
            assert_eq!(c.min_jacobian, 1.0);
        }
    }
    assert!(out.join("grid_summary.json").exists());
}

#[test]
fn reused_samples_cycle_through_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, model) = setup(dir.path(), VolumeFormat::Raw);
    let dim = model.basis().unwrap().flat_len();
    let checkpoint = Checkpoint {
        model: model.clone(),
        iteration: 1,
        warm: Vec::new(),
        samples: (0..3)
            .map(|n| (0..2).map(|s| vec![0.1 * (n + s) as f64; dim]).collect())
            .collect(),
    };
    let spec = AugmentationSpec {
        augmentations: 3,
        reuse_samples: true,
        ..spec(Method::Paddit)
    };
    let report = run_paddit(&ds, &spec, &model, &quick_hmc(), Some(&checkpoint), &dir.path().join("r")).unwrap();
    let idx: Vec<_> = report.pairs.iter().map(|p| p.reused_sample.unwrap()).collect();
    assert_eq!(idx, [0, 1, 0, 0, 1, 0, 0, 1, 0]);
    assert!(report.pairs.iter().all(|p| p.chain.is_none()));
    // Reuse without a checkpoint is an input error.
    let err = run_paddit(&ds, &spec, &model, &quick_hmc(), None, &dir.path().join("r2")).unwrap_err();
    assert!(!err.is_numerical());
}

#[test]
fn degenerate_chains_are_reported_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, model) = setup(dir.path(), VolumeFormat::Raw);
    let hmc = HmcConfig {
        step_size: 1e3,
        burn_in: 0,
        ..quick_hmc()
    };
    let report = run_paddit(&ds, &spec(Method::Paddit), &model, &hmc, None, &dir.path().join("d")).unwrap();
    assert_eq!(report.failures.len(), 3);
    assert!(report.failures.iter().all(|f| f.numerical && f.message.contains("degenerate")));
    assert!(report.pairs.is_empty());
}

#[test]
fn manifest_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let files = small_population(&dir.path().join("data"), 2, [16, 16], VolumeFormat::Raw);
    let good: DatasetManifest = serde_json::from_str(&fs::read_to_string(&files.manifest).unwrap()).unwrap();
    let write = |name: &str, m: &DatasetManifest| {
        let p = dir.path().join("data").join(name);
        fs::write(&p, serde_json::to_string(m).unwrap()).unwrap();
        p
    };

    let mut m = good.clone();
    m.subjects.clear();
    assert!(load_dataset(&write("empty.json", &m)).is_err());

    let mut m = good.clone();
    m.subjects[1].id = m.subjects[0].id.clone();
    assert!(load_dataset(&write("dup.json", &m)).unwrap_err().to_string().contains("sub-000"));

    let mut m = good.clone();
    m.subjects[0].label = "missing_label.json".into();
    assert!(load_dataset(&write("missing.json", &m)).unwrap_err().to_string().contains("missing_label"));

    let mut m = good.clone();
    m.dims = Some(vec![16, 17]);
    assert!(load_dataset(&write("dims.json", &m)).is_err());

    let mut m = good.clone();
    let extra = m.subjects[1].images[0].clone();
    m.subjects[1].images.push(extra);
    assert!(load_dataset(&write("channels.json", &m)).is_err());

    assert!(load_dataset(&write("ok.json", &good)).is_ok());
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    assert!(matches!(load_dataset(&dir.path().join("bad.json")), Err(Error::Json { .. })));
}

#[test]
fn invalid_specs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, model) = setup(dir.path(), VolumeFormat::Raw);
    let bad = [
        AugmentationSpec { augmentations: 0, ..spec(Method::Paddit) },
        AugmentationSpec { force_time: Some(1.5), ..spec(Method::Paddit) },
        AugmentationSpec { channel: 1, ..spec(Method::Paddit) },
    ];
    for s in bad {
        assert!(run_paddit(&ds, &s, &model, &quick_hmc(), None, &dir.path().join("x")).is_err());
    }
    assert!(run_baseline(&ds, &spec(Method::Bspline), 0, 1.0, &dir.path().join("y")).is_err());
    assert!(run_baseline(&ds, &spec(Method::Bspline), 4, -1.0, &dir.path().join("y")).is_err());
}
