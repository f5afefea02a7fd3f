//! Phantom datasets and the ablation suite tying training, adaptation,
//! inference and evaluation together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_dataset, AdaptPlan};
use crate::data::{generate_phantom, AccessAudit, GroundTruth, PhantomSpec, TestCase};
use crate::error::{ensure, Error, Result};
use crate::infer::{smore_fit, sr_full, InferOptions, MethodVariant, SRResult, VariantKind};
use crate::metrics::{volume_hash, volume_metrics, EvalReport, Protocol, ReportProvenance, ReportRow};
use crate::model::{ModelBundle, NetConfig};
use crate::train::{train_main, train_srn, NamedVolume, TrainLogRecord, TrainPlan, TrainingSet};
use crate::volume::io::{read_vol, write_vol};
use crate::volume::{subsample_axis, Axis, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub count: usize,
    pub shift_level: f32,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(name: &str, count: usize, shift_level: f32, seed: u64) -> Self {
        DatasetSpec {
            name: name.to_string(),
            count,
            shift_level,
            seed,
        }
    }
}

/// Phantom specs of a dataset; volume `i` uses structure seed
/// `seed * 1_000_003 + i`.
pub fn dataset_specs(spec: &DatasetSpec, shape: [usize; 3]) -> Vec<(String, PhantomSpec)> {
    (0..spec.count)
        .map(|i| {
            let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            (format!("{}_{i:03}", spec.name), PhantomSpec::new(shape, seed, spec.shift_level))
        })
        .collect()
}

pub fn generate_dataset(spec: &DatasetSpec, shape: [usize; 3]) -> Result<Vec<NamedVolume>> {
    dataset_specs(spec, shape)
        .into_iter()
        .map(|(id, p)| Ok(NamedVolume::new(id, generate_phantom(&p)?)))
        .collect()
}

/// Axially decimated inputs with audited access to the dense volumes.
pub fn test_cases(volumes: &[NamedVolume], scale: usize, audit: &Arc<AccessAudit>) -> Result<Vec<TestCase>> {
    volumes
        .iter()
        .map(|v| {
            Ok(TestCase {
                id: v.id.clone(),
                lr: subsample_axis(&v.volume, Axis::Z, scale)?,
                hr: GroundTruth::new(v.volume.clone(), audit.clone()),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub profile: String,
    pub shape: [usize; 3],
    pub scales: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train: DatasetSpec,
    pub validation: DatasetSpec,
    pub test_sets: Vec<DatasetSpec>,
    pub variants: Vec<VariantKind>,
    pub main_plan: TrainPlan,
    pub srn_plan: TrainPlan,
    pub adapt_plan: AdaptPlan,
    pub smore_plan: AdaptPlan,
    /// Adapt once per test dataset rather than once per volume.
    pub per_dataset: bool,
    pub batch: usize,
}

impl AblationConfig {
    /// 64^3 phantoms at x4 with the desk network.
    pub fn desk() -> Self {
        let main_plan = TrainPlan {
            lr: 2e-3,
            epochs: 220,
            steps_per_epoch: 50,
            ..TrainPlan::main(0)
        };
        AblationConfig {
            profile: "desk".to_string(),
            shape: [64, 64, 64],
            scales: vec![4],
            seeds: vec![0, 1, 2],
            train: DatasetSpec::new("train", 6, 0.0, 1),
            validation: DatasetSpec::new("val", 2, 0.0, 2),
            test_sets: vec![
                DatasetSpec::new("in_dist", 4, 0.0, 3),
                DatasetSpec::new("shift0.8", 4, 0.8, 4),
            ],
            variants: VariantKind::ALL.to_vec(),
            adapt_plan: AdaptPlan {
                lr: 1e-4,
                ..AdaptPlan::new(main_plan.lr, 0)
            },
            smore_plan: AdaptPlan {
                epochs: 30,
                lr: main_plan.lr,
                ..AdaptPlan::new(main_plan.lr, 0)
            },
            srn_plan: TrainPlan {
                epochs: 30,
                steps_per_epoch: 50,
                ..TrainPlan::srn(0)
            },
            main_plan,
            per_dataset: false,
            batch: crate::infer::DEFAULT_BATCH,
        }
    }

    /// A seconds-scale configuration exercising every stage.
    pub fn tiny() -> Self {
        let base = AblationConfig::desk();
        AblationConfig {
            shape: [16, 16, 16],
            seeds: vec![0],
            train: DatasetSpec::new("train", 2, 0.0, 1),
            validation: DatasetSpec::new("val", 1, 0.0, 2),
            test_sets: vec![DatasetSpec::new("shift0.8", 2, 0.8, 4)],
            main_plan: TrainPlan {
                epochs: 2,
                steps_per_epoch: 3,
                batch: 2,
                patch: (8, 4),
                ..base.main_plan.clone()
            },
            srn_plan: TrainPlan {
                epochs: 1,
                steps_per_epoch: 3,
                batch: 2,
                patch: (8, 8),
                ..base.srn_plan.clone()
            },
            adapt_plan: AdaptPlan {
                epochs: 2,
                ..base.adapt_plan.clone()
            },
            smore_plan: AdaptPlan {
                epochs: 2,
                ..base.smore_plan.clone()
            },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.scales.is_empty() && !self.seeds.is_empty(), "need at least one scale and one seed");
        ensure!(!self.variants.is_empty(), "need at least one variant");
        ensure!(self.shape.iter().all(|&n| n >= 11), "volumes must be at least 11 voxels along each axis");
        self.main_plan.validate()?;
        self.srn_plan.validate()?;
        self.adapt_plan.validate()?;
        self.smore_plan.validate()
    }

    fn needs_stage1(&self) -> bool {
        self.variants.iter().any(|v| {
            matches!(v, VariantKind::Davsr | VariantKind::DavsrNa | VariantKind::DavsrNofro)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRole {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dataset: String,
    pub role: DataRole,
    pub id: String,
    /// Dense volume, relative to the manifest directory.
    pub path: String,
    /// Axially decimated copies of test volumes keyed by scale.
    pub lr_paths: BTreeMap<usize, String>,
    pub spec: PhantomSpec,
}

/// Index of a generated data directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub entries: Vec<ManifestEntry>,
}

pub const DATA_MANIFEST: &str = "manifest.json";

impl DataManifest {
    /// Generates every dataset of `cfg` into `dir` as `.vol` files: dense
    /// volumes for all roles plus decimated inputs for test sets.
    pub fn generate(cfg: &AblationConfig, dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let roles = [(&cfg.train, DataRole::Train), (&cfg.validation, DataRole::Validation)]
            .into_iter()
            .chain(cfg.test_sets.iter().map(|s| (s, DataRole::Test)));
        for (set, role) in roles {
            let sub = dir.join(&set.name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (id, spec) in dataset_specs(set, cfg.shape) {
                let volume = generate_phantom(&spec)?;
                let path = format!("{}/{id}.vol", set.name);
                write_vol(dir.join(&path), &volume)?;
                let mut lr_paths = BTreeMap::new();
                if role == DataRole::Test {
                    for &r in &cfg.scales {
                        let lr_path = format!("{}/{id}_lr_x{r}.vol", set.name);
                        write_vol(dir.join(&lr_path), &subsample_axis(&volume, Axis::Z, r)?)?;
                        lr_paths.insert(r, lr_path);
                    }
                }
                entries.push(ManifestEntry {
                    dataset: set.name.clone(),
                    role,
                    id,
                    path,
                    lr_paths,
                    spec,
                });
            }
        }
        let manifest = DataManifest { entries };
        let path = dir.join(DATA_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DATA_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "data manifest",
            reason: e.to_string(),
        })
    }

    fn dense(&self, dir: &Path, keep: impl Fn(&ManifestEntry) -> bool) -> Result<Vec<NamedVolume>> {
        self.entries
            .iter()
            .filter(|e| keep(e))
            .map(|e| Ok(NamedVolume::new(e.id.clone(), read_vol(dir.join(&e.path))?)))
            .collect()
    }

    pub fn training_set(&self, dir: &Path) -> Result<TrainingSet> {
        Ok(TrainingSet {
            train: self.dense(dir, |e| e.role == DataRole::Train)?,
            validation: self.dense(dir, |e| e.role == DataRole::Validation)?,
        })
    }

    pub fn test_dataset_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for e in self.entries.iter().filter(|e| e.role == DataRole::Test) {
            if !names.contains(&e.dataset) {
                names.push(e.dataset.clone());
            }
        }
        names
    }

    /// Dense test volumes grouped by dataset in manifest order.
    pub fn test_sets(&self, dir: &Path) -> Result<Vec<(String, Vec<NamedVolume>)>> {
        self.test_dataset_names()
            .into_iter()
            .map(|name| {
                let vols = self.dense(dir, |e| e.role == DataRole::Test && e.dataset == name)?;
                Ok((name, vols))
            })
            .collect()
    }

    /// Decimated inputs of one test dataset; dense files are not opened.
    pub fn test_inputs(&self, dir: &Path, dataset: &str, scale: usize) -> Result<Vec<(String, Volume)>> {
        let entries: Vec<&ManifestEntry> =
            self.entries.iter().filter(|e| e.role == DataRole::Test && e.dataset == dataset).collect();
        if entries.is_empty() {
            return Err(Error::EmptyDataset(format!("no test volumes named {dataset}")));
        }
        entries
            .into_iter()
            .map(|e| {
                let path = e.lr_paths.get(&scale).ok_or_else(|| Error::MissingInput {
                    variant: e.id.clone(),
                    what: format!("a x{scale} input file"),
                })?;
                Ok((e.id.clone(), read_vol(dir.join(path))?))
            })
            .collect()
    }
}

/// Everything a CLI run needs; flags override individual fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub out_root: PathBuf,
    /// Resolved against `out_root` when relative.
    pub data_root: PathBuf,
    /// Engine reductions are always serial; the flag is recorded for provenance.
    pub deterministic: bool,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            out_root: PathBuf::from("davsr_out"),
            data_root: PathBuf::from("data"),
            deterministic: true,
            ablation: AblationConfig::desk(),
        }
    }
}

impl ExperimentConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.out_root.join(&self.data_root)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "experiment config",
            reason: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Identifies one reconstructed test volume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputKey {
    pub dataset: String,
    pub scale: usize,
    pub seed: u64,
    pub variant: VariantKind,
    pub volume_id: String,
}

/// One reconstruction handed to the evaluation sink.
pub struct Reconstruction<'a> {
    pub key: OutputKey,
    pub result: &'a SRResult,
    pub case: &'a TestCase,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn stage1_label(scale: usize, seed: u64, kind: VariantKind) -> String {
    let family = if kind == VariantKind::SaintMode { "saint" } else { "davsr" };
    format!("x{scale}/seed{seed}/{family}")
}

#[derive(Clone, Debug, Default)]
pub struct TrainedBundles {
    /// Keyed by [`stage1_label`].
    pub bundles: BTreeMap<String, ModelBundle>,
    pub logs: BTreeMap<String, Vec<TrainLogRecord>>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Adapted or fitted bundles keyed by `x{scale}/seed{seed}/{dataset}/{variant}`.
    pub bundles: BTreeMap<String, ModelBundle>,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub report: EvalReport,
    /// Every trained, adapted or fitted bundle.
    pub bundles: BTreeMap<String, ModelBundle>,
    pub train_logs: BTreeMap<String, Vec<TrainLogRecord>>,
}

pub fn training_set(cfg: &AblationConfig) -> Result<TrainingSet> {
    Ok(TrainingSet {
        train: generate_dataset(&cfg.train, cfg.shape)?,
        validation: generate_dataset(&cfg.validation, cfg.shape)?,
    })
}

pub fn test_sets(cfg: &AblationConfig) -> Result<Vec<(String, Vec<NamedVolume>)>> {
    cfg.test_sets
        .iter()
        .map(|s| Ok((s.name.clone(), generate_dataset(s, cfg.shape)?)))
        .collect()
}

/// Supervised training of every bundle the configured variants need: the
/// full model per scale and seed, plus an IPU-free model for `saint_mode`.
pub fn train_stage1(cfg: &AblationConfig, data: &TrainingSet) -> Result<TrainedBundles> {
    cfg.validate()?;
    let mut out = TrainedBundles::default();
    let mut families = Vec::new();
    if cfg.needs_stage1() {
        families.push((VariantKind::DavsrNa, cfg.main_plan.lambda_ipu));
    }
    if cfg.variants.contains(&VariantKind::SaintMode) {
        families.push((VariantKind::SaintMode, 0.0));
    }
    for &scale in &cfg.scales {
        let net = NetConfig::profile(&cfg.profile, scale)?;
        for &seed in &cfg.seeds {
            for &(kind, lambda_ipu) in &families {
                let label = stage1_label(scale, seed, kind);
                let main_plan = TrainPlan {
                    seed,
                    lambda_ipu,
                    ..cfg.main_plan.clone()
                };
                let main = train_main(data, &main_plan, &net)?;
                out.logs.insert(format!("{label}/main"), main.log);
                let srn = train_srn(data, &main.bundle, &TrainPlan { seed, ..cfg.srn_plan.clone() })?;
                out.logs.insert(format!("{label}/srn"), srn.log);
                out.bundles.insert(label, srn.bundle);
            }
        }
    }
    Ok(out)
}

fn build_variant(
    cfg: &AblationConfig,
    kind: VariantKind,
    net: &NetConfig,
    stage1: Option<&ModelBundle>,
    seed: u64,
    lrs: &[&Volume],
) -> Result<(MethodVariant, Option<ModelBundle>)> {
    let need = || stage1.cloned().expect("stage-1 bundle checked by caller");
    Ok(match kind {
        VariantKind::Bicubic => (MethodVariant::bicubic(), None),
        VariantKind::DavsrNa | VariantKind::SaintMode => (MethodVariant::with_bundle(kind, need()), None),
        VariantKind::Davsr | VariantKind::DavsrNofro => {
            let plan = AdaptPlan {
                seed,
                freeze_ipu: kind == VariantKind::Davsr,
                ..cfg.adapt_plan.clone()
            };
            if cfg.per_dataset {
                let adapted = adapt_dataset(&need(), lrs, &plan)?.bundle;
                (MethodVariant::with_bundle(kind, adapted.clone()), Some(adapted))
            } else {
                (MethodVariant::adapting(kind, need(), plan), None)
            }
        }
        VariantKind::SmoreMode => {
            let plan = AdaptPlan {
                seed,
                ..cfg.smore_plan.clone()
            };
            if cfg.per_dataset {
                let fitted = smore_fit(net, lrs, &plan)?;
                (MethodVariant::with_bundle(kind, fitted.clone()), Some(fitted))
            } else {
                (MethodVariant::smore(net.clone(), plan), None)
            }
        }
    })
}

/// Adapts and evaluates every configured variant on every test set. Ground
/// truth is read only to score finished reconstructions. `sink` receives
/// each reconstruction, e.g. to save volumes or images.
pub fn evaluate(
    cfg: &AblationConfig,
    tests: &[(String, Vec<NamedVolume>)],
    trained: &BTreeMap<String, ModelBundle>,
    audit: &Arc<AccessAudit>,
    mut sink: impl FnMut(Reconstruction<'_>) -> Result<()>,
) -> Result<Evaluation> {
    cfg.validate()?;
    let mut provenance = ReportProvenance::default();
    for (_, vols) in tests {
        provenance.data.extend(vols.iter().map(|v| (v.id.clone(), volume_hash(&v.volume))));
    }
    // (dataset, scale, variant, protocol) -> per-volume psnr, ssim, hash
    type Cell = (Vec<f64>, Vec<f64>, Vec<String>);
    let mut cells: BTreeMap<(usize, usize, usize, Protocol), Cell> = BTreeMap::new();
    let mut bundles = BTreeMap::new();
    let mut absent = Vec::new();

    for (si, &scale) in cfg.scales.iter().enumerate() {
        let net = NetConfig::profile(&cfg.profile, scale)?;
        for &seed in &cfg.seeds {
            for (di, (name, vols)) in tests.iter().enumerate() {
                let cases = test_cases(vols, scale, audit)?;
                let lrs: Vec<&Volume> = cases.iter().map(|c| &c.lr).collect();
                for (vi, &kind) in cfg.variants.iter().enumerate() {
                    let stage1 = trained.get(&stage1_label(scale, seed, kind));
                    let learned = !matches!(kind, VariantKind::Bicubic | VariantKind::SmoreMode);
                    if learned && stage1.is_none() {
                        let label = format!("{}: no bundle {}", kind.name(), stage1_label(scale, seed, kind));
                        if !absent.contains(&label) {
                            absent.push(label);
                        }
                        continue;
                    }
                    let (variant, fitted) = build_variant(cfg, kind, &net, stage1, seed, &lrs)?;
                    if let Some(b) = fitted {
                        bundles.insert(format!("x{scale}/seed{seed}/{name}/{}", kind.name()), b);
                    }
                    let opts = InferOptions {
                        batch: cfg.batch,
                        keep_intermediates: true,
                        ..InferOptions::new(scale)
                    };
                    for case in &cases {
                        let res = sr_full(&variant, &case.lr, &opts)?;
                        let z = case.hr.shape()[2];
                        let final_vol = res.volume.crop_axis(Axis::Z, z)?;
                        let sagittal = match &res.intermediates {
                            Some(im) => im.vol_x.crop_axis(Axis::Z, z)?,
                            None => final_vol.clone(),
                        };
                        let gt = case.hr.read();
                        let mut scores = (0.0, 0.0);
                        for (protocol, vol) in [(Protocol::Volume, &final_vol), (Protocol::Sagittal, &sagittal)] {
                            let (p, s) = volume_metrics(vol, gt, protocol)?;
                            if protocol == Protocol::Volume {
                                scores = (p, s);
                            }
                            let cell = cells.entry((di, si, vi, protocol)).or_default();
                            cell.0.push(p);
                            cell.1.push(s);
                            cell.2.push(volume_hash(vol));
                        }
                        sink(Reconstruction {
                            key: OutputKey {
                                dataset: name.clone(),
                                scale,
                                seed,
                                variant: kind,
                                volume_id: case.id.clone(),
                            },
                            result: &res,
                            case,
                            psnr: scores.0,
                            ssim: scores.1,
                        })?;
                    }
                }
            }
        }
    }

    for (label, b) in trained.iter().chain(&bundles) {
        provenance.bundles.insert(label.clone(), b.checksums());
    }
    let mut rows = Vec::with_capacity(cells.len());
    for ((di, si, vi, protocol), (psnr, ssim, hashes)) in cells {
        rows.push(ReportRow::new(
            &tests[di].0,
            cfg.scales[si],
            cfg.variants[vi].name(),
            protocol,
            psnr,
            ssim,
            cfg.seeds.clone(),
            hashes,
        )?);
    }
    Ok(Evaluation {
        report: EvalReport {
            rows,
            provenance,
            absent,
        },
        bundles,
    })
}

/// Data generation, training and evaluation in one pass.
pub fn run_ablation_suite(
    cfg: &AblationConfig,
    sink: impl FnMut(Reconstruction<'_>) -> Result<()>,
) -> Result<AblationOutcome> {
    let data = training_set(cfg)?;
    let tests = test_sets(cfg)?;
    let trained = train_stage1(cfg, &data)?;
    let eval = evaluate(cfg, &tests, &trained.bundles, &AccessAudit::new(), sink)?;
    let mut report = eval.report;
    report.provenance.data.extend(data.manifest());
    let mut bundles = trained.bundles;
    bundles.extend(eval.bundles);
    Ok(AblationOutcome {
        report,
        bundles,
        train_logs: trained.logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn datasets_are_seeded_and_named() {
        let spec = DatasetSpec::new("t", 2, 0.5, 9);
        let a = generate_dataset(&spec, [12, 12, 12]).unwrap();
        let b = generate_dataset(&spec, [12, 12, 12]).unwrap();
        assert_eq!(a[1].id, "t_001");
        assert_eq!(a[0].volume, b[0].volume);
        assert_ne!(a[0].volume, a[1].volume);
    }

    #[test]
    fn manifest_round_trips_generated_data() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AblationConfig::tiny();
        let m = DataManifest::generate(&cfg, dir.path()).unwrap();
        assert_eq!(DataManifest::load(dir.path()).unwrap(), m);
        let data = m.training_set(dir.path()).unwrap();
        assert_eq!(data.train.len(), cfg.train.count);
        assert_eq!(data.validation.len(), cfg.validation.count);
        assert_eq!(data.train, training_set(&cfg).unwrap().train);
        let inputs = m.test_inputs(dir.path(), "shift0.8", 4).unwrap();
        let tests = m.test_sets(dir.path()).unwrap();
        assert_eq!(inputs.len(), tests[0].1.len());
        assert_eq!(inputs[1].1, subsample_axis(&tests[0].1[1].volume, Axis::Z, 4).unwrap());
        assert!(m.test_inputs(dir.path(), "nope", 4).is_err());
        assert!(m.test_inputs(dir.path(), "shift0.8", 2).is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let cfg = ExperimentConfig {
            ablation: AblationConfig::tiny(),
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(ExperimentConfig::from_json("{").is_err());
    }

    #[test]
    fn test_cases_hide_ground_truth_behind_audit() {
        let audit = AccessAudit::new();
        let vols = generate_dataset(&DatasetSpec::new("t", 1, 0.0, 1), [12, 12, 12]).unwrap();
        let cases = test_cases(&vols, 4, &audit).unwrap();
        assert_eq!(cases[0].lr.shape(), [12, 12, 3]);
        assert_eq!(audit.hr_reads(), 0);
        assert_eq!(cases[0].hr.read(), &vols[0].volume);
        assert_eq!(audit.hr_reads(), 1);
    }
}
