use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn diffaug(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffaug"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = diffaug(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Settings small enough for a test run.
const QUICK: &str = r#"{
  "em": { "iterations": 2, "hmc": { "step_size": 0.01, "leapfrog_steps": 5, "burn_in": 10, "samples": 2, "thin": 1, "seed": 0 } },
  "augment_hmc": { "step_size": 0.01, "leapfrog_steps": 5, "burn_in": 10, "samples": 2, "thin": 1, "seed": 0 }
}"#;

#[test]
fn synthgen_estimate_augment_inspect_preview() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let config = d.join("quick.json");
    fs::write(&config, QUICK).unwrap();

    ok(&["synthgen", "--out", p(&data), "--subjects", "3", "--dims", "16x16", "--seed", "4"]);
    for f in ["manifest.json", "ground_truth.json", "mean_image.nii.gz", "mean_shape.nii.gz", "sub-002_label.nii.gz"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let manifest = data.join("manifest.json");

    let est = d.join("est");
    ok(&[
        "estimate-template",
        "--manifest",
        p(&manifest),
        "--out",
        p(&est),
        "--config",
        p(&config),
        "--jobs",
        "1",
    ]);
    let model: serde_json::Value = serde_json::from_str(&fs::read_to_string(est.join("model.json")).unwrap()).unwrap();
    assert_eq!(model["em_trace"].as_array().unwrap().len(), 2);
    assert!(est.join("template.nii.gz").exists());
    let ckpt: serde_json::Value = serde_json::from_str(&fs::read_to_string(est.join("checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ckpt["iteration"], 2);

    let aug = d.join("aug");
    let model_path = est.join("model.json");
    let common = [
        "--manifest",
        p(&manifest),
        "--model",
        p(&model_path),
        "--config",
        p(&config),
        "--seed",
        "3",
    ];
    let mut args = vec!["augment", "--out", p(&aug), "--include-originals"];
    args.extend(common);
    ok(&args);
    let out_manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(aug.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(out_manifest["subjects"].as_array().unwrap().len(), 9);

    // Same seed with a different thread count gives the same files.
    let aug1 = d.join("aug1");
    let mut args = vec!["augment", "--out", p(&aug1), "--include-originals", "--jobs", "1"];
    args.extend(common);
    ok(&args);
    for f in ["sub-001_aug1_img0.nii.gz", "sub-001_aug1_label.nii.gz", "sub-001_aug1_provenance.json"] {
        assert_eq!(fs::read(aug.join(f)).unwrap(), fs::read(aug1.join(f)).unwrap(), "{f}");
    }

    let shown = ok(&["inspect", aug.join("sub-000_aug0_provenance.json").to_str().unwrap()]);
    assert!(shown.contains("paddit"), "{shown}");
    let shown = ok(&["inspect", aug.join("sub-000_aug0_img0.nii.gz").to_str().unwrap()]);
    assert!(shown.contains("16") && shown.contains("float32"), "{shown}");
    let shown = ok(&["inspect", aug.join("sub-000_aug0_label.nii.gz").to_str().unwrap()]);
    assert!(shown.contains("uint16"), "{shown}");

    let png = d.join("prev.png");
    ok(&["preview", aug.join("sub-000_aug0_label.nii.gz").to_str().unwrap(), "--out", p(&png)]);
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");

    // Baseline augmentation and reuse of estimation samples.
    let b = d.join("bspline");
    ok(&["augment", "--manifest", p(&manifest), "--out", p(&b), "--method", "bspline", "--cp", "4", "--sd", "2"]);
    assert!(b.join("sub-002_aug1_label.nii.gz").exists());
    let r = d.join("reuse");
    let mut args = vec!["augment", "--out", p(&r), "--reuse-samples", "--checkpoint"];
    let ck = est.join("checkpoint.json");
    args.push(ck.to_str().unwrap());
    args.extend(common);
    ok(&args);
    assert!(r.join("sub-000_aug1_provenance.json").exists());
}

#[test]
fn baseline_grid_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synthgen", "--out", p(&data), "--subjects", "2", "--dims", "16x16", "--format", "raw"]);
    assert!(data.join("sub-000_image.json").exists() && data.join("sub-000_image.raw").exists());
    let grid = dir.path().join("grid");
    let table = ok(&[
        "baseline-grid",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        p(&grid),
        "--augmentations",
        "1",
    ]);
    assert!(grid.join("grid_summary.json").exists());
    assert!(grid.join("cp16_sd6").join("manifest.json").exists());
    assert!(table.lines().count() >= 9, "{table}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    // Usage errors.
    assert_eq!(diffaug(&[]).status.code(), Some(1));
    assert_eq!(diffaug(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(diffaug(&["augment", "--manifest", "m.json"]).status.code(), Some(1));
    assert_eq!(
        diffaug(&["augment", "--manifest", "m.json", "--out", "o", "--augmentations", "0"]).status.code(),
        Some(1)
    );
    assert_eq!(diffaug(&["synthgen", "--out", "o", "--dims", "16by16"]).status.code(), Some(1));
    // Data errors.
    let missing = dir.path().join("missing.json");
    let out = diffaug(&["augment", "--manifest", p(&missing), "--out", p(dir.path()), "--method", "bspline"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
    let garbage = dir.path().join("garbage.nii");
    fs::write(&garbage, b"not a volume").unwrap();
    assert_eq!(diffaug(&["inspect", p(&garbage)]).status.code(), Some(2));
    // Numerical failure: chains that cannot accept anything.
    let data = dir.path().join("data");
    ok(&["synthgen", "--out", p(&data), "--subjects", "2", "--dims", "16x16"]);
    let est = dir.path().join("est");
    let broken = dir.path().join("broken.json");
    fs::write(
        &broken,
        r#"{"em": {"iterations": 1, "hmc": {"step_size": 1000.0, "leapfrog_steps": 5, "burn_in": 0, "samples": 1, "thin": 1}}}"#,
    )
    .unwrap();
    let out = diffaug(&[
        "estimate-template",
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        p(&est),
        "--config",
        p(&broken),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
