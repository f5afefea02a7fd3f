//! Inference for the full method, its ablation variants and the bicubic
//! baseline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt, adaptation_mode, fit_in_plane, AdaptPlan};
use crate::error::{ensure, Error, Result};
use crate::metrics::DATA_RANGE;
use crate::model::{
    freeze, head_forward_srn, ufe_forward, upsample_forward, Component, ModelBundle, ModelParams, NetConfig,
};
use crate::nn::Tensor;
use crate::volume::{
    bicubic_upsample_axis, combine_average, extract_slices, make_triplets, reformat_volume, subsample_axis, Axis,
    Plane, SliceStack, Volume,
};

pub const DEFAULT_BATCH: usize = 8;

/// `head ∘ G_F` over every triplet of `stack`, processed in chunks of
/// `batch` slices and reassembled in slice order.
fn upsample_stack(
    params: &ModelParams<f32>,
    cfg: &NetConfig,
    head: Component,
    stack: &SliceStack,
    batch: usize,
) -> Result<SliceStack> {
    ensure!(batch >= 1, "inference batch must be >= 1");
    let triplets = make_triplets(stack)?;
    let mut slices = Vec::with_capacity(triplets.len());
    for chunk in triplets.chunks(batch) {
        for t in chunk {
            let f = ufe_forward(&params.ufe, cfg, t)?;
            let out = upsample_forward(params.get(head), cfg, &f);
            slices.push(Plane::new(out.height, out.width, out.data)?);
        }
    }
    let mut spacing = stack.spacing;
    spacing[2] /= cfg.upscale as f32;
    Ok(SliceStack {
        slices,
        source_axis: stack.source_axis,
        index_origin: stack.index_origin,
        spacing,
    })
}

fn upsample_both(
    params: &ModelParams<f32>,
    cfg: &NetConfig,
    head: Component,
    v_lr: &Volume,
    batch: usize,
) -> Result<(Volume, Volume)> {
    let along = |axis: Axis| -> Result<Volume> {
        let mut v = reformat_volume(&upsample_stack(params, cfg, head, &extract_slices(v_lr, axis), batch)?)?;
        v.clamp_unit();
        Ok(v)
    };
    Ok((along(Axis::X)?, along(Axis::Y)?))
}

/// Sagittal and coronal reconstructions `G_T ∘ G_F` of the sparse volume,
/// each `(X, Y, r * Z_lr)` and clamped to `[0, 1]`.
pub fn sr_through_plane(bundle: &ModelBundle, v_lr: &Volume, batch: usize) -> Result<(Volume, Volume)> {
    upsample_both(&bundle.params, &bundle.config, Component::Tpu, v_lr, batch)
}

/// Residual axial refinement of `comb` through `G_S ∘ G_F`.
pub fn refine_volume(bundle: &ModelBundle, comb: &Volume, batch: usize) -> Result<Volume> {
    ensure!(batch >= 1, "inference batch must be >= 1");
    let stack = extract_slices(comb, Axis::Z);
    let triplets = make_triplets(&stack)?;
    let mut slices = Vec::with_capacity(triplets.len());
    for chunk in triplets.chunks(batch) {
        for t in chunk {
            let f = ufe_forward(&bundle.params.ufe, &bundle.config, t)?;
            let center = Tensor::from_vec(1, t.height, t.width, t.channel(1).to_vec());
            let out = head_forward_srn(&bundle.params, &bundle.config, &f, &center)?;
            slices.push(Plane::new(out.height, out.width, out.data)?);
        }
    }
    let mut v = reformat_volume(&SliceStack { slices, ..stack })?;
    v.clamp_unit();
    Ok(v)
}

/// Through-plane PSNR of the `G_T ∘ G_F` path on every `stride`-th sagittal
/// and coronal slice of the decimated `hr` volume, against `hr` itself.
pub fn through_plane_psnr(bundle: &ModelBundle, hr: &Volume, stride: usize) -> Result<f64> {
    ensure!(stride >= 1, "stride must be >= 1");
    let cfg = &bundle.config;
    let r = cfg.upscale;
    let lr = subsample_axis(hr, Axis::Z, r)?;
    let z = hr.extent(Axis::Z);
    let (mut sse, mut n) = (0.0f64, 0usize);
    for axis in [Axis::X, Axis::Y] {
        let lr_stack = extract_slices(&lr, axis);
        let hr_stack = extract_slices(hr, axis);
        let triplets = make_triplets(&lr_stack)?;
        for i in (0..triplets.len()).step_by(stride) {
            let f = ufe_forward(&bundle.params.ufe, cfg, &triplets[i])?;
            let out = upsample_forward(&bundle.params.tpu, cfg, &f);
            let gt = &hr_stack.slices[i];
            for row in 0..gt.rows() {
                for col in 0..z {
                    let p = out.data[row * out.width + col].clamp(0.0, 1.0) as f64;
                    sse += (p - gt.get(row, col) as f64).powi(2);
                    n += 1;
                }
            }
        }
    }
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / (sse / n as f64)).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Davsr,
    DavsrNa,
    DavsrNofro,
    SaintMode,
    SmoreMode,
    Bicubic,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Bicubic,
        VariantKind::SmoreMode,
        VariantKind::SaintMode,
        VariantKind::DavsrNa,
        VariantKind::DavsrNofro,
        VariantKind::Davsr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Davsr => "davsr",
            VariantKind::DavsrNa => "davsr_na",
            VariantKind::DavsrNofro => "davsr_nofro",
            VariantKind::SaintMode => "saint_mode",
            VariantKind::SmoreMode => "smore_mode",
            VariantKind::Bicubic => "bicubic",
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown method variant `{s}`")))
    }
}

/// A method variant with the inputs it needs.
///
/// `davsr` and `davsr_nofro` take either an already adapted bundle or a
/// stage-1 bundle plus an adaptation plan (adapted per volume). `smore_mode`
/// takes either a bundle from [`smore_fit`] or no bundle, in which case a
/// fresh network of `smore_config` is fitted to the test volume's in-plane
/// pairs under `adapt_plan`.
#[derive(Clone, Debug)]
pub struct MethodVariant {
    pub kind: VariantKind,
    pub bundle: Option<ModelBundle>,
    pub adapt_plan: Option<AdaptPlan>,
    pub smore_config: Option<NetConfig>,
}

impl MethodVariant {
    pub fn bicubic() -> Self {
        MethodVariant {
            kind: VariantKind::Bicubic,
            bundle: None,
            adapt_plan: None,
            smore_config: None,
        }
    }

    pub fn with_bundle(kind: VariantKind, bundle: ModelBundle) -> Self {
        MethodVariant {
            kind,
            bundle: Some(bundle),
            adapt_plan: None,
            smore_config: None,
        }
    }

    pub fn adapting(kind: VariantKind, bundle: ModelBundle, plan: AdaptPlan) -> Self {
        MethodVariant {
            kind,
            bundle: Some(bundle),
            adapt_plan: Some(plan),
            smore_config: None,
        }
    }

    pub fn smore(config: NetConfig, plan: AdaptPlan) -> Self {
        MethodVariant {
            kind: VariantKind::SmoreMode,
            bundle: None,
            adapt_plan: Some(plan),
            smore_config: Some(config),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intermediates {
    pub vol_x: Volume,
    pub vol_y: Volume,
    pub comb: Volume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SRResult {
    pub volume: Volume,
    pub intermediates: Option<Intermediates>,
    /// Wall seconds per stage.
    pub timing: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InferOptions {
    /// Axial upsampling factor the input was degraded with.
    pub scale: usize,
    pub batch: usize,
    pub keep_intermediates: bool,
}

impl InferOptions {
    pub fn new(scale: usize) -> Self {
        InferOptions {
            scale,
            batch: DEFAULT_BATCH,
            keep_intermediates: false,
        }
    }
}

pub const SMORE_STAGE: &str = "smore_fit";

/// Fits a freshly initialized backbone and in-plane head to the in-plane
/// pairs of the given sparse volumes only.
pub fn smore_fit(config: &NetConfig, volumes: &[&Volume], plan: &AdaptPlan) -> Result<ModelBundle> {
    let mut bundle = ModelBundle::init(config.clone(), plan.seed)?;
    let trainable = [Component::Ufe, Component::Ipu];
    fit_in_plane(&mut bundle, volumes, plan, &trainable, |_, _| Ok(()))?;
    let mut bundle = freeze(&bundle, &Component::ALL);
    bundle.record_stage(SMORE_STAGE, plan.seed, serde_json::json!({ "plan": plan }));
    Ok(bundle)
}

fn missing(kind: VariantKind, what: &str) -> Error {
    Error::MissingInput {
        variant: kind.name().to_string(),
        what: what.to_string(),
    }
}

/// Whether the bundle's stage-1 training ran with a zero in-plane weight.
fn trained_without_ipu(bundle: &ModelBundle) -> bool {
    bundle
        .provenance
        .history
        .iter()
        .find(|r| r.stage == "train_main")
        .and_then(|r| r.details.get("plan")?.get("lambda_ipu")?.as_f64())
        == Some(0.0)
}

fn learned_bundle(variant: &MethodVariant, v_lr: &Volume, scale: usize) -> Result<ModelBundle> {
    let kind = variant.kind;
    let bundle = variant.bundle.as_ref().ok_or_else(|| missing(kind, "model bundle"))?;
    ensure!(
        bundle.config.upscale == scale,
        "bundle upsamples by {} but the input was degraded by {scale}",
        bundle.config.upscale
    );
    ensure!(
        bundle.provenance.has_stage("train_srn"),
        "{kind} needs a bundle with a trained refinement head"
    );
    let mode = adaptation_mode(bundle);
    match kind {
        VariantKind::DavsrNa => {
            ensure!(mode.is_none(), "davsr_na needs a non-adapted bundle");
            ensure!(!trained_without_ipu(bundle), "davsr_na needs a bundle trained with the in-plane loss");
            Ok(bundle.clone())
        }
        VariantKind::SaintMode => {
            ensure!(mode.is_none(), "saint_mode bundles are never adapted");
            ensure!(trained_without_ipu(bundle), "saint_mode needs a bundle trained with lambda_ipu = 0");
            Ok(bundle.clone())
        }
        VariantKind::Davsr | VariantKind::DavsrNofro => {
            let freeze_ipu = kind == VariantKind::Davsr;
            match (mode, &variant.adapt_plan) {
                (Some(m), _) => {
                    ensure!(m == freeze_ipu, "{kind} got a bundle adapted with freeze_ipu = {m}");
                    Ok(bundle.clone())
                }
                (None, Some(plan)) => {
                    ensure!(
                        plan.freeze_ipu == freeze_ipu,
                        "{kind} needs an adaptation plan with freeze_ipu = {freeze_ipu}"
                    );
                    Ok(adapt(bundle, v_lr, plan)?.bundle)
                }
                (None, None) => Err(missing(kind, "adapted bundle or adaptation plan")),
            }
        }
        VariantKind::SmoreMode | VariantKind::Bicubic => unreachable!("not a stage-1 variant"),
    }
}

pub fn sr_full(variant: &MethodVariant, v_lr: &Volume, opts: &InferOptions) -> Result<SRResult> {
    ensure!(opts.scale >= 2, "scale must be >= 2");
    let mut timing = BTreeMap::new();
    let t0 = Instant::now();
    match variant.kind {
        VariantKind::Bicubic => {
            let volume = bicubic_upsample_axis(v_lr, Axis::Z, opts.scale)?;
            timing.insert("bicubic".to_string(), t0.elapsed().as_secs_f64());
            Ok(SRResult {
                volume,
                intermediates: None,
                timing,
            })
        }
        VariantKind::SmoreMode => {
            let bundle = match &variant.bundle {
                Some(b) => {
                    ensure!(
                        b.provenance.has_stage(SMORE_STAGE) && !b.provenance.has_stage("train_main"),
                        "smore_mode must not use stage-1 parameters"
                    );
                    b.clone()
                }
                None => {
                    let plan = variant.adapt_plan.as_ref().ok_or_else(|| missing(variant.kind, "fitting plan"))?;
                    let config = variant
                        .smore_config
                        .as_ref()
                        .ok_or_else(|| missing(variant.kind, "network config"))?;
                    smore_fit(config, &[v_lr], plan)?
                }
            };
            ensure!(bundle.config.upscale == opts.scale, "smore network upsamples by {}", bundle.config.upscale);
            timing.insert("fit".to_string(), t0.elapsed().as_secs_f64());
            let t1 = Instant::now();
            let (vx, vy) = upsample_both(&bundle.params, &bundle.config, Component::Ipu, v_lr, opts.batch)?;
            let comb = combine_average(&vx, &vy)?;
            timing.insert("through_plane".to_string(), t1.elapsed().as_secs_f64());
            Ok(SRResult {
                volume: comb.clone(),
                intermediates: opts.keep_intermediates.then_some(Intermediates {
                    vol_x: vx,
                    vol_y: vy,
                    comb,
                }),
                timing,
            })
        }
        _ => {
            let bundle = learned_bundle(variant, v_lr, opts.scale)?;
            timing.insert("adapt".to_string(), t0.elapsed().as_secs_f64());
            let t1 = Instant::now();
            let (vx, vy) = sr_through_plane(&bundle, v_lr, opts.batch)?;
            let comb = combine_average(&vx, &vy)?;
            timing.insert("through_plane".to_string(), t1.elapsed().as_secs_f64());
            let t2 = Instant::now();
            let volume = refine_volume(&bundle, &comb, opts.batch)?;
            timing.insert("refine".to_string(), t2.elapsed().as_secs_f64());
            Ok(SRResult {
                volume,
                intermediates: opts.keep_intermediates.then_some(Intermediates {
                    vol_x: vx,
                    vol_y: vy,
                    comb,
                }),
                timing,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stage1_bundle(lambda_ipu: f64) -> ModelBundle {
        let mut b = ModelBundle::init(NetConfig::desk(2), 11).unwrap();
        b.record_stage("train_main", 11, serde_json::json!({ "plan": { "lambda_ipu": lambda_ipu } }));
        b.record_stage("train_srn", 11, serde_json::Value::Null);
        freeze(&b, &Component::ALL)
    }

    fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(shape, |_, _, _| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn through_plane_shapes_and_determinism() {
        let b = stage1_bundle(1.0);
        let v = random_volume([5, 6, 4], 1);
        let (vx, vy) = sr_through_plane(&b, &v, 8).unwrap();
        assert_eq!(vx.shape(), [5, 6, 8]);
        assert_eq!(vy.shape(), [5, 6, 8]);
        assert_eq!(sr_through_plane(&b, &v, 8).unwrap(), (vx.clone(), vy));
        assert!(vx.is_normalized());
    }

    #[test]
    fn batch_size_does_not_change_output() {
        let b = stage1_bundle(1.0);
        let v = random_volume([9, 7, 5], 2);
        let variant = MethodVariant::with_bundle(VariantKind::DavsrNa, b);
        let one = sr_full(&variant, &v, &InferOptions { batch: 1, ..InferOptions::new(2) }).unwrap();
        let eight = sr_full(&variant, &v, &InferOptions { batch: 8, ..InferOptions::new(2) }).unwrap();
        assert_eq!(one.volume, eight.volume);
    }

    #[test]
    fn full_pipeline_keeps_average_and_range() {
        let b = stage1_bundle(1.0);
        let v = random_volume([6, 5, 4], 3);
        let opts = InferOptions {
            keep_intermediates: true,
            ..InferOptions::new(2)
        };
        let res = sr_full(&MethodVariant::with_bundle(VariantKind::DavsrNa, b), &v, &opts).unwrap();
        let im = res.intermediates.unwrap();
        assert_eq!(im.comb, combine_average(&im.vol_x, &im.vol_y).unwrap());
        assert_eq!(res.volume.shape(), [6, 5, 8]);
        assert!(res.volume.is_normalized());
        // zero-initialized refinement head: output equals the combination
        assert_eq!(res.volume, im.comb);
    }

    #[test]
    fn bicubic_delegates() {
        let v = Volume::from_fn([3, 3, 5], |x, y, z| (x + y + z) as f32 / 12.0).unwrap();
        let res = sr_full(&MethodVariant::bicubic(), &v, &InferOptions::new(4)).unwrap();
        assert_eq!(res.volume, bicubic_upsample_axis(&v, Axis::Z, 4).unwrap());
    }

    #[test]
    fn smore_mode_uses_only_test_data() {
        let v = random_volume([8, 8, 4], 5);
        let plan = AdaptPlan {
            epochs: 1,
            ..AdaptPlan::new(1e-3, 2)
        };
        let variant = MethodVariant::smore(NetConfig::desk(2), plan.clone());
        let res = sr_full(&variant, &v, &InferOptions::new(2)).unwrap();
        assert_eq!(res.volume.shape(), [8, 8, 8]);
        let fitted = smore_fit(&NetConfig::desk(2), &[&v], &plan).unwrap();
        let fresh = ModelBundle::init(NetConfig::desk(2), 2).unwrap();
        assert_eq!(fitted.params.tpu, fresh.params.tpu);
        assert_eq!(fitted.params.srn, fresh.params.srn);
        assert_ne!(fitted.params.ipu, fresh.params.ipu);
        let again = sr_full(&MethodVariant::with_bundle(VariantKind::SmoreMode, fitted), &v, &InferOptions::new(2));
        assert_eq!(again.unwrap().volume, res.volume);
        let stage1 = MethodVariant::with_bundle(VariantKind::SmoreMode, stage1_bundle(1.0));
        assert!(sr_full(&stage1, &v, &InferOptions::new(2)).is_err());
    }

    #[test]
    fn variant_preconditions() {
        let v = random_volume([4, 4, 3], 4);
        let opts = InferOptions::new(2);
        let no_bundle = MethodVariant {
            kind: VariantKind::DavsrNa,
            bundle: None,
            adapt_plan: None,
            smore_config: None,
        };
        assert!(matches!(sr_full(&no_bundle, &v, &opts), Err(Error::MissingInput { .. })));
        let davsr = MethodVariant::with_bundle(VariantKind::Davsr, stage1_bundle(1.0));
        assert!(matches!(sr_full(&davsr, &v, &opts), Err(Error::MissingInput { .. })));
        let saint = MethodVariant::with_bundle(VariantKind::SaintMode, stage1_bundle(1.0));
        assert!(sr_full(&saint, &v, &opts).is_err());
        let saint = MethodVariant::with_bundle(VariantKind::SaintMode, stage1_bundle(0.0));
        assert!(sr_full(&saint, &v, &opts).is_ok());
        let wrong_scale = MethodVariant::with_bundle(VariantKind::DavsrNa, stage1_bundle(1.0));
        assert!(sr_full(&wrong_scale, &v, &InferOptions::new(3)).is_err());
        assert_eq!("smore_mode".parse::<VariantKind>().unwrap(), VariantKind::SmoreMode);
        assert!("nope".parse::<VariantKind>().is_err());
    }
}
