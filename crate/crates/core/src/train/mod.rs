//! Supervised stage-1 training: the joint backbone/upsampling objective,
//! then the refinement head on top of the frozen backbone.

mod adam;
mod gradcheck;
mod step;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamSettings};
pub use gradcheck::{fd_check, grad_check, GradCheckReport, LossId, FD_STEP};
pub use step::{l1_mean, refine_stream, upsample_stream, Pair};

use crate::data::{make_in_plane_pairs, make_refine_pairs, make_through_plane_pairs, sample_patches, PairedSample};
use crate::error::{ensure, Error, Result};
use crate::infer::{sr_through_plane, through_plane_psnr};
use crate::metrics::volume_hash;
use crate::model::{freeze, Component, ModelBundle, NetConfig};
use crate::nn::Tensor;
use crate::volume::{combine_average, subsample_axis, Axis, DegradeSpec, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Main,
    Srn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Optimizer {
    Adam(AdamSettings),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stage: Stage,
    pub lambda_tpu: f64,
    pub lambda_ipu: f64,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Patches drawn per stream per step.
    pub batch: usize,
    /// Input patch `(rows, cols)`; targets cover `cols * scale` columns.
    pub patch: (usize, usize),
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Validation evaluates every `validation_stride`-th through-plane slice.
    pub validation_stride: usize,
}

impl TrainPlan {
    pub fn main(seed: u64) -> Self {
        TrainPlan {
            stage: Stage::Main,
            lambda_tpu: 2.0,
            lambda_ipu: 1.0,
            lr: 1e-3,
            epochs: 30,
            steps_per_epoch: 20,
            batch: 4,
            patch: (32, 8),
            seed,
            optimizer: Optimizer::Adam(AdamSettings::default()),
            validation_stride: 4,
        }
    }

    pub fn srn(seed: u64) -> Self {
        TrainPlan {
            stage: Stage::Srn,
            epochs: 10,
            patch: (24, 24),
            ..TrainPlan::main(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "learning rate must be positive");
        ensure!(self.batch >= 1 && self.steps_per_epoch >= 1, "batch and steps_per_epoch must be >= 1");
        ensure!(self.patch.0 >= 1 && self.patch.1 >= 1, "patch extents must be >= 1");
        ensure!(self.lambda_tpu >= 0.0 && self.lambda_ipu >= 0.0, "loss weights must be non-negative");
        ensure!(self.validation_stride >= 1, "validation_stride must be >= 1");
        Ok(())
    }

    fn adam(&self) -> AdamSettings {
        match self.optimizer {
            Optimizer::Adam(s) => s,
        }
    }
}

/// Epoch-mean losses. For the main stage `l_main` is recombined from the
/// stored `l_tpu` and `l_ipu`, so the weighted identity holds exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub l_tpu: Option<f64>,
    pub l_ipu: Option<f64>,
    pub l_main: Option<f64>,
    pub l_ref: Option<f64>,
}

impl LossBreakdown {
    pub fn main(epoch: usize, l_tpu: f64, l_ipu: f64, lambda_tpu: f64, lambda_ipu: f64) -> Self {
        LossBreakdown {
            epoch,
            l_tpu: Some(l_tpu),
            l_ipu: Some(l_ipu),
            l_main: Some(lambda_tpu * l_tpu + lambda_ipu * l_ipu),
            l_ref: None,
        }
    }

    pub fn refine(epoch: usize, l_ref: f64) -> Self {
        LossBreakdown {
            epoch,
            l_tpu: None,
            l_ipu: None,
            l_main: None,
            l_ref: Some(l_ref),
        }
    }
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub val_psnr: Option<f64>,
    pub wall_seconds: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedVolume {
    pub id: String,
    pub volume: Volume,
}

impl NamedVolume {
    pub fn new(id: impl Into<String>, volume: Volume) -> Self {
        NamedVolume { id: id.into(), volume }
    }
}

/// Dense training volumes plus held-out volumes for checkpoint selection.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub train: Vec<NamedVolume>,
    pub validation: Vec<NamedVolume>,
}

impl TrainingSet {
    pub fn manifest(&self) -> BTreeMap<String, String> {
        self.train
            .iter()
            .chain(&self.validation)
            .map(|v| (v.id.clone(), volume_hash(&v.volume)))
            .collect()
    }

    fn check(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::EmptyDataset("training set has no volumes".into()));
        }
        for v in self.train.iter().chain(&self.validation) {
            ensure!(v.volume.is_normalized(), "volume `{}` is not normalized to [0, 1]", v.id);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<TrainLogRecord>,
}

pub fn loss_tpu(pred_x: &Tensor<f32>, gt_x: &Tensor<f32>, pred_y: &Tensor<f32>, gt_y: &Tensor<f32>) -> Result<f64> {
    ensure!(pred_x.same_dims(gt_x) && pred_y.same_dims(gt_y), "loss_tpu: extent mismatch");
    Ok(l1_mean(&pred_x.data, &gt_x.data)? + l1_mean(&pred_y.data, &gt_y.data)?)
}

pub fn loss_ipu(pred_sx: &Tensor<f32>, pred_sy: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    ensure!(pred_sx.data.len() == target.data.len(), "loss_ipu: extent mismatch");
    ensure!(pred_sy.same_dims(target), "loss_ipu: extent mismatch");
    Ok(l1_mean(&pred_sx.data, &target.data)? + l1_mean(&pred_sy.data, &target.data)?)
}

fn pairs_of(samples: &[PairedSample]) -> Vec<Pair<'_, f32>> {
    samples.iter().map(|s| (&s.lr_input, &s.hr_target)).collect()
}

fn non_finite(epoch: usize, batch: usize, parts: &[(&str, f64)]) -> Error {
    let detail = parts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ");
    Error::NonFinite { epoch, batch, detail }
}

struct Streams {
    sagittal: Vec<PairedSample>,
    coronal: Vec<PairedSample>,
    ipu_y: Vec<PairedSample>,
    ipu_x: Vec<PairedSample>,
}

fn build_streams(data: &TrainingSet, spec: &DegradeSpec) -> Result<Streams> {
    let mut s = Streams {
        sagittal: Vec::new(),
        coronal: Vec::new(),
        ipu_y: Vec::new(),
        ipu_x: Vec::new(),
    };
    for v in &data.train {
        for p in make_through_plane_pairs(&v.volume, spec, &v.id)? {
            match p.meta.axis {
                Axis::X => s.sagittal.push(p),
                _ => s.coronal.push(p),
            }
        }
        let lr = subsample_axis(&v.volume, Axis::Z, spec.r_z)?;
        for p in make_in_plane_pairs(&lr, spec, &v.id)? {
            match p.meta.degraded_axis {
                Some(Axis::Y) => s.ipu_y.push(p),
                _ => s.ipu_x.push(p),
            }
        }
    }
    Ok(s)
}

/// Mean through-plane PSNR of the `G_T ∘ G_F` path over the held-out volumes.
fn validation_psnr(bundle: &ModelBundle, data: &TrainingSet, stride: usize) -> Result<Option<f64>> {
    if data.validation.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for v in &data.validation {
        total += through_plane_psnr(bundle, &v.volume, stride)?;
    }
    Ok(Some(total / data.validation.len() as f64))
}

/// Jointly optimizes backbone, through-plane and in-plane heads under
/// `lambda_tpu * L_tpu + lambda_ipu * L_ipu`. Returns the validation-best
/// checkpoint (the last one without validation data) with backbone and both
/// heads frozen. With `lambda_ipu == 0` the in-plane head is left out of the
/// optimizer and keeps its initial values.
pub fn train_main(data: &TrainingSet, plan: &TrainPlan, config: &NetConfig) -> Result<TrainOutcome> {
    ensure!(plan.stage == Stage::Main, "train_main requires a main-stage plan");
    plan.validate()?;
    config.validate()?;
    data.check()?;
    let spec = DegradeSpec::new(config.upscale)?;
    let streams = build_streams(data, &spec)?;

    let mut bundle = ModelBundle::init(config.clone(), plan.seed)?;
    let mut trainable: BTreeSet<Component> = [Component::Ufe, Component::Tpu].into();
    if plan.lambda_ipu > 0.0 {
        trainable.insert(Component::Ipu);
    }
    let components: Vec<Component> = trainable.iter().copied().collect();
    let mut adam = Adam::new(plan.adam(), plan.lr, &bundle.params, &components);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5EED_0001);
    let mut log = Vec::with_capacity(plan.epochs);
    let mut best: Option<(f64, usize, crate::model::ModelParams<f32>)> = None;
    let started = Instant::now();

    for epoch in 1..=plan.epochs {
        let (mut sum_tpu, mut sum_ipu) = (0.0, 0.0);
        for step in 0..plan.steps_per_epoch {
            let mut draw = |pairs: &[PairedSample]| sample_patches(pairs, plan.patch, plan.batch, rng.random());
            let (sag, cor, ipy, ipx) = (
                draw(&streams.sagittal)?,
                draw(&streams.coronal)?,
                draw(&streams.ipu_y)?,
                draw(&streams.ipu_x)?,
            );
            let mut grads = bundle.params.zeros_like();
            let p = &bundle.params;
            let l_sag = upsample_stream(p, config, Component::Tpu, &pairs_of(&sag), plan.lambda_tpu, Some(&mut grads), &trainable)?;
            let l_cor = upsample_stream(p, config, Component::Tpu, &pairs_of(&cor), plan.lambda_tpu, Some(&mut grads), &trainable)?;
            let ipu_grads = (plan.lambda_ipu > 0.0).then_some(&mut grads);
            let l_ipy = upsample_stream(p, config, Component::Ipu, &pairs_of(&ipy), plan.lambda_ipu, ipu_grads, &trainable)?;
            let ipu_grads = (plan.lambda_ipu > 0.0).then_some(&mut grads);
            let l_ipx = upsample_stream(p, config, Component::Ipu, &pairs_of(&ipx), plan.lambda_ipu, ipu_grads, &trainable)?;
            let parts = [("l_sag", l_sag), ("l_cor", l_cor), ("l_ipu_y", l_ipy), ("l_ipu_x", l_ipx)];
            if parts.iter().any(|(_, v)| !v.is_finite()) {
                return Err(non_finite(epoch, step, &parts));
            }
            adam.step(&mut bundle.params, &grads);
            sum_tpu += l_sag + l_cor;
            sum_ipu += l_ipy + l_ipx;
        }
        let steps = plan.steps_per_epoch as f64;
        let losses = LossBreakdown::main(epoch, sum_tpu / steps, sum_ipu / steps, plan.lambda_tpu, plan.lambda_ipu);
        let val_psnr = validation_psnr(&bundle, data, plan.validation_stride)?;
        if let Some(v) = val_psnr {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, bundle.params.clone()));
            }
        }
        log.push(TrainLogRecord {
            losses,
            val_psnr,
            wall_seconds: started.elapsed().as_secs_f64(),
            seed: plan.seed,
        });
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            bundle.params = params;
            Some(epoch)
        }
        None => None,
    };
    let mut bundle = freeze(&bundle, &[Component::Ufe, Component::Tpu, Component::Ipu]);
    bundle.record_stage(
        "train_main",
        plan.seed,
        serde_json::json!({
            "plan": plan,
            "optimized": components,
            "best_epoch": best_epoch,
            "data": data.manifest(),
        }),
    );
    Ok(TrainOutcome { bundle, log })
}

/// Axial refinement pairs for one dense volume: the averaged through-plane
/// reconstruction of its decimated version against the dense volume.
pub fn refine_pairs_for(bundle: &ModelBundle, v: &NamedVolume) -> Result<Vec<PairedSample>> {
    let lr = subsample_axis(&v.volume, Axis::Z, bundle.config.upscale)?;
    let (vx, vy) = sr_through_plane(bundle, &lr, 8)?;
    let comb = combine_average(&vx, &vy)?.crop_axis(Axis::Z, v.volume.extent(Axis::Z))?;
    make_refine_pairs(&comb, &v.volume, &v.id)
}

/// Mean L1 of the refinement path over full slices, without updates.
pub fn refine_loss(bundle: &ModelBundle, pairs: &[PairedSample]) -> Result<f64> {
    refine_stream(&bundle.params, &bundle.config, &pairs_of(pairs), 1.0, None, &BTreeSet::new())
}

/// Optimizes only the refinement head under `L_ref`; every other component
/// stays bit-identical. The result has all four components frozen.
pub fn train_srn(data: &TrainingSet, bundle: &ModelBundle, plan: &TrainPlan) -> Result<TrainOutcome> {
    ensure!(plan.stage == Stage::Srn, "train_srn requires an srn-stage plan");
    for c in [Component::Ufe, Component::Tpu, Component::Ipu] {
        ensure!(bundle.is_frozen(c), "train_srn needs a frozen {} from stage-1 training", c.name());
    }
    plan.validate()?;
    data.check()?;
    let config = bundle.config.clone();
    let mut pairs = Vec::new();
    for v in &data.train {
        pairs.extend(refine_pairs_for(bundle, v)?);
    }

    let mut out = bundle.clone();
    out.frozen.remove(&Component::Srn);
    let trainable: BTreeSet<Component> = [Component::Srn].into();
    let mut adam = Adam::new(plan.adam(), plan.lr, &out.params, &[Component::Srn]);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5EED_0002);
    let mut log = Vec::with_capacity(plan.epochs);
    let started = Instant::now();
    for epoch in 1..=plan.epochs {
        let mut sum = 0.0;
        for step in 0..plan.steps_per_epoch {
            let batch = sample_patches(&pairs, plan.patch, plan.batch, rng.random())?;
            let mut grads = out.params.zeros_like();
            let l = refine_stream(&out.params, &config, &pairs_of(&batch), 1.0, Some(&mut grads), &trainable)?;
            if !l.is_finite() {
                return Err(non_finite(epoch, step, &[("l_ref", l)]));
            }
            adam.step(&mut out.params, &grads);
            sum += l;
        }
        log.push(TrainLogRecord {
            losses: LossBreakdown::refine(epoch, sum / plan.steps_per_epoch as f64),
            val_psnr: None,
            wall_seconds: started.elapsed().as_secs_f64(),
            seed: plan.seed,
        });
    }
    let mut out = freeze(&out, &[Component::Srn]);
    out.record_stage(
        "train_srn",
        plan.seed,
        serde_json::json!({ "plan": plan, "data": data.manifest() }),
    );
    Ok(TrainOutcome { bundle: out, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};

    fn tiny_plan(seed: u64) -> TrainPlan {
        TrainPlan {
            epochs: 1,
            steps_per_epoch: 2,
            batch: 1,
            patch: (8, 2),
            ..TrainPlan::main(seed)
        }
    }

    fn constant_set(n: usize) -> TrainingSet {
        TrainingSet {
            train: (0..n)
                .map(|i| NamedVolume::new(format!("c{i}"), Volume::filled([8, 8, 8], 0.25 + 0.1 * i as f32).unwrap()))
                .collect(),
            validation: vec![],
        }
    }

    #[test]
    fn loss_closed_forms() {
        let a = Tensor::from_vec(1, 2, 3, vec![0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(loss_tpu(&a, &a, &a, &a).unwrap(), 0.0);
        let b = Tensor::from_vec(1, 2, 3, vec![0.0f32, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = Tensor::from_vec(1, 2, 3, vec![0.5f32; 6]);
        assert_eq!(loss_tpu(&c, &b, &c, &b).unwrap(), 1.0);
        assert_eq!(loss_ipu(&c, &c, &b).unwrap(), 1.0);
        assert!(loss_ipu(&c, &Tensor::zeros(1, 3, 2), &b).is_err());
    }

    #[test]
    fn losses_match_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = || Tensor::from_vec(1, 5, 7, (0..35).map(|_| rng.random::<f32>()).collect());
        let (px, gx, py, gy) = (t(), t(), t(), t());
        let oracle = |p: &Tensor<f32>, g: &Tensor<f32>| {
            let mut s = 0.0f64;
            for i in 0..p.data.len() {
                s += (p.data[i] as f64 - g.data[i] as f64).abs();
            }
            s / p.data.len() as f64
        };
        let got = loss_tpu(&px, &gx, &py, &gy).unwrap();
        assert!((got - (oracle(&px, &gx) + oracle(&py, &gy))).abs() < 1e-7);
        let got = loss_ipu(&px, &py, &gx).unwrap();
        assert!((got - (oracle(&px, &gx) + oracle(&py, &gx))).abs() < 1e-7);
    }

    #[test]
    fn one_epoch_on_constants_freezes_backbone_and_heads() {
        let cfg = NetConfig::desk(4);
        let out = train_main(&constant_set(2), &tiny_plan(3), &cfg).unwrap();
        let rec = &out.log[0].losses;
        assert!(rec.l_tpu.unwrap().is_finite() && rec.l_ipu.unwrap().is_finite());
        assert_eq!(rec.l_main.unwrap(), 2.0 * rec.l_tpu.unwrap() + rec.l_ipu.unwrap());
        let expected: BTreeSet<_> = [Component::Ufe, Component::Tpu, Component::Ipu].into();
        assert_eq!(out.bundle.frozen, expected);
        assert!(out.bundle.provenance.has_stage("train_main"));
    }

    #[test]
    fn training_is_deterministic_and_audited() {
        let cfg = NetConfig::desk(4);
        let data = constant_set(1);
        let a = train_main(&data, &tiny_plan(5), &cfg).unwrap();
        let b = train_main(&data, &tiny_plan(5), &cfg).unwrap();
        assert_eq!(a.bundle, b.bundle);
        let init = ModelBundle::init(cfg, 5).unwrap();
        assert_ne!(a.bundle.params.ufe, init.params.ufe);
        assert_ne!(a.bundle.params.tpu, init.params.tpu);
        assert_ne!(a.bundle.params.ipu, init.params.ipu);
        assert_eq!(a.bundle.params.srn, init.params.srn);
    }

    #[test]
    fn zero_ipu_weight_leaves_ipu_at_init() {
        let cfg = NetConfig::desk(4);
        let plan = TrainPlan {
            lambda_ipu: 0.0,
            ..tiny_plan(6)
        };
        let out = train_main(&constant_set(1), &plan, &cfg).unwrap();
        let init = ModelBundle::init(cfg, 6).unwrap();
        assert_eq!(out.bundle.params.ipu.checksum(), init.params.ipu.checksum());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let err = train_main(&TrainingSet::default(), &tiny_plan(0), &NetConfig::desk(4)).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn diverging_run_aborts_with_diagnostic() {
        let plan = TrainPlan {
            lr: 1e38,
            steps_per_epoch: 3,
            ..tiny_plan(0)
        };
        let err = train_main(&constant_set(1), &plan, &NetConfig::desk(4)).unwrap_err();
        match err {
            Error::NonFinite { epoch, detail, .. } => {
                assert_eq!(epoch, 1);
                assert!(detail.contains("l_sag="));
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn srn_stage_changes_only_srn() {
        let cfg = NetConfig::desk(4);
        let data = TrainingSet {
            train: vec![NamedVolume::new(
                "p",
                generate_phantom(&PhantomSpec::new([12, 12, 12], 1, 0.0)).unwrap(),
            )],
            validation: vec![],
        };
        let main = train_main(&data, &tiny_plan(7), &cfg).unwrap().bundle;
        let pairs = refine_pairs_for(&main, &data.train[0]).unwrap();
        // zero final conv: the initial loss is the plain residual of I_comb
        let direct = {
            let mut s = 0.0;
            let mut n = 0;
            for p in &pairs {
                for (a, b) in p.lr_input.channel(1).iter().zip(&p.hr_target.data) {
                    s += (*a as f64 - *b as f64).abs();
                    n += 1;
                }
            }
            s / n as f64
        };
        assert!((refine_loss(&main, &pairs).unwrap() - direct).abs() < 1e-9);

        let plan = TrainPlan {
            patch: (6, 6),
            ..TrainPlan::srn(7)
        };
        let plan = TrainPlan {
            epochs: 1,
            steps_per_epoch: 2,
            batch: 1,
            ..plan
        };
        let a = train_srn(&data, &main, &plan).unwrap().bundle;
        for c in [Component::Ufe, Component::Tpu, Component::Ipu] {
            assert_eq!(a.params.get(c), main.params.get(c));
        }
        assert_ne!(a.params.srn, main.params.srn);
        assert_eq!(a.frozen.len(), 4);
        assert_eq!(a, train_srn(&data, &main, &plan).unwrap().bundle);
        let unfrozen = crate::model::thaw(&main, &[Component::Ufe]);
        assert!(train_srn(&data, &unfrozen, &plan).is_err());
    }
}
