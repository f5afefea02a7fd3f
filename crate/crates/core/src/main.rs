use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use davsr::adapt::{adapt, adapt_dataset, AdaptPlan};
use davsr::data::AccessAudit;
use davsr::experiment::{
    evaluate, stage1_label, train_stage1, DataManifest, ExperimentConfig, Reconstruction, TrainedBundles,
};
use davsr::figure::{metric_caption, write_comparison_png};
use davsr::infer::{sr_full, InferOptions, MethodVariant, VariantKind};
use davsr::metrics::{volume_metrics, Protocol};
use davsr::model::{load_bundle, save_bundle, ModelBundle, NetConfig};
use davsr::train::{train_main, TrainPlan};
use davsr::volume::io::{read_vol, write_vol};
use davsr::volume::{extract_slices, Axis, Plane, Volume};

#[derive(Parser)]
#[command(name = "davsr", version, about = "Slice-ensemble volumetric super-resolution with test-time adaptation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["paper", "desk"])]
    profile: Option<String>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(2..=6))]
    scale: Option<u32>,
    /// Method variant; repeat to select several.
    #[arg(long = "variant", global = true)]
    variants: Vec<VariantKind>,
    #[arg(long, global = true)]
    deterministic: bool,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write train, validation and test phantoms with a manifest.
    GenData,
    /// Supervised training of the bundles the selected variants need.
    Train {
        #[arg(long, value_enum, default_value_t = TrainStage::Full)]
        stage: TrainStage,
    },
    /// Adapt a trained bundle to one test dataset using only its sparse inputs.
    Adapt {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Also update the in-plane head.
        #[arg(long)]
        nofro: bool,
        /// Adapt once over the whole dataset instead of once per volume.
        #[arg(long)]
        per_dataset: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Super-resolve one sparse volume.
    Infer {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Dense volume used for metrics and the comparison image.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Write a sagittal comparison image.
        #[arg(long)]
        png: Option<PathBuf>,
        /// Sagittal slice index; defaults to the middle slice.
        #[arg(long)]
        slice: Option<usize>,
    },
    /// Evaluate every selected variant on the generated test sets.
    Eval,
    /// gen-data, train and eval in one run.
    Ablate,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainStage {
    Main,
    Full,
}

/// Misuse of the command line or of existing outputs.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// The run finished but its outputs are incomplete.
#[derive(Debug)]
struct IncompleteError(String);

impl fmt::Display for IncompleteError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for IncompleteError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<davsr::Error>() {
            return match e {
                davsr::Error::NonFinite { .. } => 3,
                davsr::Error::Contract(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(out) = std::env::var_os("DAVSR_OUT") {
        cfg.out_root = PathBuf::from(out);
    }
    let ab = &mut cfg.ablation;
    if let Some(seed) = common.seed {
        ab.seeds = vec![seed];
    }
    if let Some(profile) = &common.profile {
        ab.profile = profile.clone();
    }
    if let Some(scale) = common.scale {
        ab.scales = vec![scale as usize];
    }
    if !common.variants.is_empty() {
        ab.variants = common.variants.clone();
    }
    cfg.deterministic |= common.deterministic;
    ab.validate()?;
    Ok(cfg)
}

/// Creates `dir` empty, refusing to touch existing contents without `force`.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(UsageError(format!("{} already exists; pass --force to replace it", dir.display())).into());
        }
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_log<T: serde::Serialize>(path: &Path, log: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for rec in log {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn train_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_root.join("train")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let force = cli.common.force;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, force),
        Command::Train { stage } => cmd_train(&cfg, stage, force),
        Command::Adapt {
            bundle,
            dataset,
            nofro,
            per_dataset,
            epochs,
        } => cmd_adapt(&cfg, &bundle, &dataset, nofro, per_dataset, epochs, force),
        Command::Infer {
            input,
            output,
            bundle,
            reference,
            png,
            slice,
        } => cmd_infer(&cfg, &cli.common, &input, &output, bundle.as_deref(), reference.as_deref(), png.as_deref(), slice),
        Command::Eval => cmd_eval(&cfg, force),
        Command::Ablate => {
            cmd_gen_data(&cfg, force)?;
            cmd_train(&cfg, TrainStage::Full, force)?;
            cmd_eval(&cfg, force)
        }
    }
}

fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let dir = cfg.data_dir();
    fresh_dir(&dir, force)?;
    let manifest = DataManifest::generate(&cfg.ablation, &dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    println!("wrote {} volumes to {}", manifest.entries.len(), dir.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, stage: TrainStage, force: bool) -> Result<()> {
    let data_dir = cfg.data_dir();
    let data = DataManifest::load(&data_dir)?.training_set(&data_dir)?;
    let dir = train_dir(cfg);
    fresh_dir(&dir, force)?;
    let trained = match stage {
        TrainStage::Full => train_stage1(&cfg.ablation, &data)?,
        TrainStage::Main => {
            let ab = &cfg.ablation;
            let mut out = TrainedBundles::default();
            for &scale in &ab.scales {
                let net = NetConfig::profile(&ab.profile, scale)?;
                for &seed in &ab.seeds {
                    let label = stage1_label(scale, seed, VariantKind::DavsrNa);
                    let main = train_main(&data, &TrainPlan { seed, ..ab.main_plan.clone() }, &net)?;
                    out.logs.insert(format!("{label}/main"), main.log);
                    out.bundles.insert(label, main.bundle);
                }
            }
            out
        }
    };
    fs::create_dir_all(dir.join("logs"))?;
    for (label, log) in &trained.logs {
        write_log(&dir.join("logs").join(format!("{}.jsonl", label.replace('/', "_"))), log)?;
    }
    for (label, bundle) in &trained.bundles {
        save_bundle(bundle, dir.join("bundles").join(label))?;
        println!("bundle {label}");
    }
    write_json(&dir.join("config.json"), cfg)
}

fn cmd_adapt(
    cfg: &ExperimentConfig,
    bundle_dir: &Path,
    dataset: &str,
    nofro: bool,
    per_dataset: bool,
    epochs: Option<usize>,
    force: bool,
) -> Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    let data_dir = cfg.data_dir();
    let manifest = DataManifest::load(&data_dir)?;
    for e in manifest.entries.iter().filter(|e| e.dataset == dataset) {
        eprintln!("ignoring dense volume {} (never read during adaptation)", e.path);
    }
    let inputs = manifest.test_inputs(&data_dir, dataset, bundle.config.upscale)?;
    let plan = AdaptPlan {
        freeze_ipu: !nofro,
        epochs: epochs.unwrap_or(cfg.ablation.adapt_plan.epochs),
        seed: cfg.ablation.seeds[0],
        audit: true,
        ..cfg.ablation.adapt_plan.clone()
    };
    let variant = if nofro { VariantKind::DavsrNofro } else { VariantKind::Davsr };
    let dir = cfg.out_root.join("adapt").join(dataset).join(variant.name());
    fresh_dir(&dir, force)?;
    let runs: Vec<(PathBuf, Vec<&Volume>)> = if per_dataset {
        vec![(dir.clone(), inputs.iter().map(|(_, v)| v).collect())]
    } else {
        inputs.iter().map(|(id, v)| (dir.join(id), vec![v])).collect()
    };
    for (out, vols) in runs {
        let outcome = if vols.len() == 1 {
            adapt(&bundle, vols[0], &plan)?
        } else {
            adapt_dataset(&bundle, &vols, &plan)?
        };
        save_bundle(&outcome.bundle, &out)?;
        write_log(&out.join("adapt_log.jsonl"), &outcome.log)?;
        println!("adapted bundle {}", out.display());
    }
    Ok(())
}

fn middle_sagittal(v: &Volume, index: Option<usize>) -> Result<Plane> {
    let stack = extract_slices(v, Axis::X);
    let i = index.unwrap_or(stack.len() / 2);
    let plane = stack
        .slices
        .get(i)
        .ok_or_else(|| UsageError(format!("sagittal slice {i} out of range 0..{}", stack.len())))?;
    Ok(plane.transpose())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: &ExperimentConfig,
    common: &Common,
    input: &Path,
    output: &Path,
    bundle_dir: Option<&Path>,
    reference: Option<&Path>,
    png: Option<&Path>,
    slice: Option<usize>,
) -> Result<()> {
    if output.exists() && !common.force {
        return Err(UsageError(format!("{} already exists; pass --force to replace it", output.display())).into());
    }
    let lr = read_vol(input)?;
    let bundle: Option<ModelBundle> = bundle_dir.map(load_bundle).transpose()?;
    let kind = common.variants.first().copied().unwrap_or(if bundle.is_some() {
        VariantKind::DavsrNa
    } else {
        VariantKind::Bicubic
    });
    let scale = match &bundle {
        Some(b) => b.config.upscale,
        None => cfg.ablation.scales[0],
    };
    let ab = &cfg.ablation;
    let seed = ab.seeds[0];
    let variant = match (kind, bundle) {
        (VariantKind::Bicubic, _) => MethodVariant::bicubic(),
        (VariantKind::SmoreMode, Some(b)) => MethodVariant::with_bundle(kind, b),
        (VariantKind::SmoreMode, None) => MethodVariant::smore(
            NetConfig::profile(&ab.profile, scale)?,
            AdaptPlan { seed, ..ab.smore_plan.clone() },
        ),
        (VariantKind::Davsr | VariantKind::DavsrNofro, Some(b)) if davsr::adapt::adaptation_mode(&b).is_none() => {
            let plan = AdaptPlan {
                seed,
                freeze_ipu: kind == VariantKind::Davsr,
                ..ab.adapt_plan.clone()
            };
            MethodVariant::adapting(kind, b, plan)
        }
        (_, Some(b)) => MethodVariant::with_bundle(kind, b),
        (_, None) => return Err(UsageError(format!("variant {kind} needs --bundle")).into()),
    };
    let opts = InferOptions {
        keep_intermediates: false,
        ..InferOptions::new(scale)
    };
    let res = sr_full(&variant, &lr, &opts)?;
    let gt = reference.map(read_vol).transpose()?;
    let sr = match &gt {
        Some(gt) => res.volume.crop_axis(Axis::Z, gt.extent(Axis::Z))?,
        None => res.volume.clone(),
    };
    write_vol(output, &sr)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "wrote {} ({kind}, x{scale})", output.display())?;
    let mut caption = String::new();
    if let Some(gt) = &gt {
        let (p, s) = volume_metrics(&sr, gt, Protocol::Volume)?;
        writeln!(stdout, "psnr {p:.4} ssim {s:.4}")?;
        caption = metric_caption(p, s);
    }
    if let Some(png) = png {
        let mut panels = Vec::new();
        if let Some(gt) = &gt {
            panels.push((middle_sagittal(gt, slice)?, "HR".to_string()));
            if kind != VariantKind::Bicubic {
                let bic = sr_full(&MethodVariant::bicubic(), &lr, &InferOptions::new(scale))?
                    .volume
                    .crop_axis(Axis::Z, gt.extent(Axis::Z))?;
                let (p, s) = volume_metrics(&bic, gt, Protocol::Volume)?;
                panels.push((middle_sagittal(&bic, slice)?, metric_caption(p, s)));
            }
        }
        panels.push((middle_sagittal(&sr, slice)?, caption));
        write_comparison_png(png, &panels)?;
        writeln!(stdout, "wrote {}", png.display())?;
    }
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let ab = &cfg.ablation;
    let data_dir = cfg.data_dir();
    let manifest = DataManifest::load(&data_dir)?;
    let tests = manifest.test_sets(&data_dir)?;
    let bundle_root = train_dir(cfg).join("bundles");
    let mut trained = BTreeMap::new();
    for &scale in &ab.scales {
        for &seed in &ab.seeds {
            for kind in [VariantKind::DavsrNa, VariantKind::SaintMode] {
                let label = stage1_label(scale, seed, kind);
                let dir = bundle_root.join(&label);
                if dir.exists() {
                    trained.insert(label, load_bundle(&dir)?);
                }
            }
        }
    }
    let dir = cfg.out_root.join("eval");
    fresh_dir(&dir, force)?;

    // first volume of each dataset at the first seed, HR panel first
    let first_ids: Vec<String> = tests.iter().map(|(_, v)| v[0].id.clone()).collect();
    let mut figures: BTreeMap<(String, usize), Vec<(Plane, String)>> = BTreeMap::new();
    let audit = AccessAudit::new();
    let eval = evaluate(ab, &tests, &trained, &audit, |rec: Reconstruction<'_>| {
        if rec.key.seed != ab.seeds[0] || !first_ids.contains(&rec.key.volume_id) {
            return Ok(());
        }
        let gt = rec.case.hr.read();
        let panels = figures.entry((rec.key.dataset.clone(), rec.key.scale)).or_insert_with(|| {
            let hr = extract_slices(gt, Axis::X).slices.swap_remove(gt.extent(Axis::X) / 2).transpose();
            vec![(hr, "HR".to_string())]
        });
        let sr = rec.result.volume.crop_axis(Axis::Z, gt.extent(Axis::Z))?;
        let plane = extract_slices(&sr, Axis::X).slices.swap_remove(sr.extent(Axis::X) / 2).transpose();
        panels.push((plane, metric_caption(rec.psnr, rec.ssim)));
        println!("{} x{} {}: psnr {:.3} ssim {:.4}", rec.key.dataset, rec.key.scale, rec.key.variant, rec.psnr, rec.ssim);
        Ok(())
    })?;
    eval.report.write(&dir)?;
    fs::create_dir_all(dir.join("figures"))?;
    for ((dataset, scale), panels) in &figures {
        write_comparison_png(dir.join("figures").join(format!("{dataset}_x{scale}.png")), panels)?;
    }
    for (label, bundle) in &eval.bundles {
        save_bundle(bundle, dir.join("bundles").join(label))?;
    }
    write_json(&dir.join("config.json"), cfg)?;
    println!("report written to {}", dir.display());
    if !eval.report.absent.is_empty() {
        return Err(IncompleteError(format!("variants absent from the report: {}", eval.report.absent.join("; "))).into());
    }
    Ok(())
}
