mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use config::RunConfig;
use diffaug_core::em::{estimate_template_with, Checkpoint, TemplateModel};
use diffaug_core::flow::FlowConfig;
use diffaug_core::io::{inspect_volume, load_volume, read_json, save_scalar, write_json, VolumeData, VolumeFormat};
use diffaug_core::kernel::KernelConfig;
use diffaug_core::pipeline::{
    baseline_grid, load_dataset, run_baseline, run_paddit, AugmentReport, AugmentationSpec, Method,
    PairProvenance, BASELINE_GRID_CP, BASELINE_GRID_SD,
};
use diffaug_core::posterior::RegistrationConfig;
use diffaug_core::preview::render_preview;
use diffaug_core::synth::{synthesize, write_population};
use diffaug_core::GridGeometry;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "diffaug", version, about = "Diffeomorphic template estimation and data augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON settings file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (0 = one per core). Results do not depend on this.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate a template and noise level from a dataset with Monte-Carlo EM.
    EstimateTemplate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        control_spacing: Option<usize>,
        #[arg(long)]
        support_radius: Option<f64>,
        /// Posterior samples per image and EM iteration.
        #[arg(long)]
        hmc_samples: Option<usize>,
        #[arg(long)]
        em_iters: Option<usize>,
        /// Image channel the template is estimated on.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write augmented image/label pairs for every subject.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Paddit)]
        method: MethodArg,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        augmentations: Option<u64>,
        /// Template model (`model.json`) for posterior-sampled augmentation.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Estimation checkpoint, needed with `--reuse-samples`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        reuse_samples: bool,
        #[arg(long)]
        include_originals: bool,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Leapfrog steps per HMC transition of the augmentation chains.
        #[arg(long)]
        hmc_steps: Option<usize>,
        /// Control points per axis (B-spline).
        #[arg(long)]
        cp: Option<usize>,
        /// Control displacement standard deviation in voxels (B-spline).
        #[arg(long)]
        sd: Option<f64>,
        /// Use this integration time instead of a uniform draw.
        #[arg(long, hide = true)]
        force_time: Option<f64>,
    },
    /// Run the B-spline baseline over the full control-point / deviation grid.
    BaselineGrid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        augmentations: Option<u64>,
    },
    /// Generate a synthetic 2D population with known ground truth.
    Synthgen {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subjects: Option<usize>,
        /// Image size as WIDTHxHEIGHT.
        #[arg(long, value_parser = parse_dims)]
        dims: Option<[usize; 2]>,
        #[arg(long)]
        deformation_scale: Option<f64>,
        #[arg(long)]
        noise_sd: Option<f64>,
        #[arg(long)]
        control_spacing: Option<usize>,
        #[arg(long)]
        support_radius: Option<f64>,
        #[arg(long, value_enum, default_value_t = FormatArg::NiiGz)]
        format: FormatArg,
    },
    /// Render one slice of a volume to PNG.
    Preview {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Axis held fixed (2 for 2D volumes).
        #[arg(long, default_value_t = 2)]
        axis: usize,
        /// Slice index along `axis`; the middle slice by default.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Print the geometry of a volume, or summarise a provenance / model JSON file.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Paddit,
    Bspline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    #[value(name = "nii.gz")]
    NiiGz,
    Nii,
    Raw,
}

impl FormatArg {
    fn format(self) -> VolumeFormat {
        match self {
            FormatArg::NiiGz => VolumeFormat::NiftiGz,
            FormatArg::Nii => VolumeFormat::Nifti,
            FormatArg::Raw => VolumeFormat::Raw,
        }
    }
}

fn parse_dims(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok([p(w)?, p(h)?])
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(diffaug_core::Error),
    /// Some subjects failed numerically; outputs for the rest were written.
    Partial(usize),
}

impl From<diffaug_core::Error> for Failure {
    fn from(e: diffaug_core::Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    match &common.config {
        Some(p) => Ok(read_json(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn kernel_for(g: &GridGeometry, spacing: usize, radius: Option<f64>) -> CliResult<KernelConfig> {
    Ok(match radius {
        Some(r) => KernelConfig::new(r, spacing)?,
        None => KernelConfig::for_geometry(g, spacing)?,
    })
}

fn estimate(
    manifest: &Path,
    out: &Path,
    common: &Common,
    overrides: (Option<usize>, Option<f64>, Option<usize>, Option<usize>),
    channel: usize,
    resume: Option<&Path>,
) -> CliResult<()> {
    let mut cfg = load_config(common)?;
    let (cs, r, samples, iters) = overrides;
    cfg.control_spacing = cs.unwrap_or(cfg.control_spacing);
    cfg.support_radius = r.or(cfg.support_radius);
    cfg.em.hmc.samples = samples.unwrap_or(cfg.em.hmc.samples);
    cfg.em.iterations = iters.unwrap_or(cfg.em.iterations);
    cfg.em.hmc.seed = common.seed;

    let ds = load_dataset(manifest)?;
    let images = ds.channel_images(channel)?;
    let kernel = kernel_for(&ds.geometry, cfg.control_spacing, cfg.support_radius)?;
    let rc = RegistrationConfig {
        flow: FlowConfig::new(cfg.flow_steps, 1.0)?,
        ..RegistrationConfig::default()
    };
    let resume = match resume {
        Some(p) => Some(read_json::<Checkpoint>(p)?),
        None => None,
    };
    let ckpt_path = out.join("checkpoint.json");
    let model = estimate_template_with(&images, kernel, &cfg.em, &rc, resume, |c| {
        write_json(c, &ckpt_path)
    })?;
    write_json(&model, &out.join("model.json"))?;
    let suffix = VolumeFormat::from_path(&ds.subjects[0].entry.images[channel])?.suffix();
    save_scalar(&model.template, &out.join(format!("template{suffix}")))?;
    log::info!("template written to {}", out.display());
    Ok(())
}

fn finish_report(report: &AugmentReport) -> CliResult<()> {
    println!(
        "wrote {} augmented pairs ({} originals) to {}",
        report.pairs.len(),
        report.originals,
        report.manifest.display()
    );
    for f in &report.failures {
        eprintln!("subject {} failed: {}", f.subject, f.message);
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial(report.failures.len()))
    }
}

fn inspect(path: &Path) -> CliResult<()> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        let value: Value = read_json(path)?;
        if value.get("dtype").is_none() {
            return inspect_json(value);
        }
    }
    let info = inspect_volume(path)?;
    let g = &info.geometry;
    println!("format:  {:?}", info.format);
    println!("dtype:   {}", info.dtype.name());
    println!("dims:    {:?}", g.dims());
    println!("spacing: {:?}", g.spacing());
    println!("origin:  {:?}", g.origin());
    match load_volume(path)? {
        VolumeData::Scalar(s) => {
            let (lo, hi) = s.range();
            println!("range:   [{lo}, {hi}]");
        }
        VolumeData::Labels(l) => println!("labels:  {:?}", l.label_set()),
    }
    Ok(())
}

fn inspect_json(value: Value) -> CliResult<()> {
    if let Ok(p) = serde_json::from_value::<PairProvenance>(value.clone()) {
        println!("subject:      {} (augmentation {})", p.subject, p.augmentation);
        println!("method:       {}", p.method);
        println!("seed:         {}", p.seed);
        if let Some(t) = p.t {
            println!("t:            {t}");
        }
        if let Some(c) = p.chain {
            println!(
                "chain:        acceptance {:.3}, step size {:.4}, divergences {}",
                c.acceptance_rate, c.tuned_step_size, c.divergences
            );
        }
        if let (Some(cp), Some(sd)) = (p.cp, p.sd) {
            println!("lattice:      cp {cp}, sd {sd}");
        }
        println!("min jacobian: {}", p.min_jacobian);
        println!("max disp:     {} mm", p.max_displacement_mm);
        println!("field sum:    {}", p.image_field_checksum);
        println!("shared field: {}", p.image_field_checksum == p.label_field_checksum);
        return Ok(());
    }
    let model = serde_json::from_value::<TemplateModel>(value.clone())
        .ok()
        .or_else(|| serde_json::from_value::<Checkpoint>(value.clone()).ok().map(|c| c.model));
    if let Some(m) = model {
        let g = m.geometry();
        println!("template dims:    {:?}", g.dims());
        println!("template spacing: {:?}", g.spacing());
        println!("sigma:            {}", m.sigma);
        println!("support radius:   {}", m.kernel.support_radius);
        println!("EM iterations:    {}", m.em_trace.len());
        for e in &m.em_trace {
            println!("  {:>3}  -log p {:.4}  sigma {:.5}", e.iteration, e.neg_log_posterior, e.sigma);
        }
        return Ok(());
    }
    println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
    Ok(())
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::EstimateTemplate {
            manifest,
            out,
            common,
            control_spacing,
            support_radius,
            hmc_samples,
            em_iters,
            channel,
            resume,
        } => estimate(
            &manifest,
            &out,
            &common,
            (control_spacing, support_radius, hmc_samples, em_iters),
            channel,
            resume.as_deref(),
        ),
        Command::Augment {
            manifest,
            out,
            method,
            common,
            augmentations,
            model,
            checkpoint,
            reuse_samples,
            include_originals,
            channel,
            hmc_steps,
            cp,
            sd,
            force_time,
        } => {
            let mut cfg = load_config(&common)?;
            let spec = AugmentationSpec {
                method: match method {
                    MethodArg::Paddit => Method::Paddit,
                    MethodArg::Bspline => Method::Bspline,
                },
                augmentations: augmentations.map_or(cfg.augmentations, |a| a as usize),
                seed: common.seed,
                include_originals,
                force_time,
                reuse_samples,
                channel,
            };
            let ds = load_dataset(&manifest)?;
            let report = match spec.method {
                Method::Paddit => {
                    let model_path = model.ok_or_else(|| {
                        Failure::Usage("--model is required with --method paddit".into())
                    })?;
                    let model: TemplateModel = read_json(&model_path)?;
                    let ckpt = match checkpoint {
                        Some(p) => Some(read_json::<Checkpoint>(&p)?),
                        None if reuse_samples => {
                            return Err(Failure::Usage("--reuse-samples needs --checkpoint".into()))
                        }
                        None => None,
                    };
                    cfg.augment_hmc.leapfrog_steps = hmc_steps.unwrap_or(cfg.augment_hmc.leapfrog_steps);
                    run_paddit(&ds, &spec, &model, &cfg.augment_hmc, ckpt.as_ref(), &out)?
                }
                Method::Bspline => run_baseline(&ds, &spec, cp.unwrap_or(cfg.cp), sd.unwrap_or(cfg.sd), &out)?,
            };
            finish_report(&report)
        }
        Command::BaselineGrid {
            manifest,
            out,
            common,
            augmentations,
        } => {
            let cfg = load_config(&common)?;
            let spec = AugmentationSpec {
                method: Method::Bspline,
                augmentations: augmentations.map_or(cfg.augmentations, |a| a as usize),
                seed: common.seed,
                ..AugmentationSpec::default()
            };
            let ds = load_dataset(&manifest)?;
            let cells = baseline_grid(&ds, &spec, &BASELINE_GRID_CP, &BASELINE_GRID_SD, &out)?;
            println!("{:>4} {:>5} {:>6} {:>12} {:>7}", "cp", "sd", "pairs", "min |J|", "folded");
            for c in &cells {
                println!(
                    "{:>4} {:>5} {:>6} {:>12.5} {:>7}",
                    c.cp, c.sd, c.pairs, c.min_jacobian, c.folded_pairs
                );
            }
            Ok(())
        }
        Command::Synthgen {
            out,
            common,
            subjects,
            dims,
            deformation_scale,
            noise_sd,
            control_spacing,
            support_radius,
            format,
        } => {
            let mut pc = load_config(&common)?.population;
            pc.seed = common.seed;
            pc.subjects = subjects.unwrap_or(pc.subjects);
            pc.dims = dims.unwrap_or(pc.dims);
            pc.deformation_scale = deformation_scale.unwrap_or(pc.deformation_scale);
            pc.noise_sd = noise_sd.unwrap_or(pc.noise_sd);
            pc.control_spacing = control_spacing.unwrap_or(pc.control_spacing);
            pc.support_radius = support_radius.or(pc.support_radius);
            let pop = synthesize(&pc)?;
            let files = write_population(&pop, &out, format.format())?;
            println!("wrote {} subjects; manifest {}", pc.subjects, files.manifest.display());
            Ok(())
        }
        Command::Preview {
            input,
            out,
            axis,
            index,
        } => {
            let vol = load_volume(&input)?;
            let g = match &vol {
                VolumeData::Scalar(s) => s.geometry(),
                VolumeData::Labels(l) => l.geometry(),
            };
            if axis > 2 {
                return Err(Failure::Usage(format!("axis must be 0, 1 or 2, got {axis}")));
            }
            let index = index.unwrap_or(g.dim(axis) / 2);
            render_preview(&vol, axis, index, &out)?;
            Ok(())
        }
        Command::Inspect { path } => inspect(&path),
    }
}

fn jobs_of(command: &Command) -> usize {
    match command {
        Command::EstimateTemplate { common, .. }
        | Command::Augment { common, .. }
        | Command::BaselineGrid { common, .. }
        | Command::Synthgen { common, .. } => common.jobs,
        Command::Preview { .. } | Command::Inspect { .. } => 0,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(jobs_of(&cli.command))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match pool.install(|| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Partial(n)) => {
            eprintln!("error: {n} subject(s) failed with degenerate chains");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA })
        }
    }
}
