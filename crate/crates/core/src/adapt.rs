//! Test-time adaptation on the in-plane task of sparse test volumes.
//!
//! Only sparse volumes enter this module, so ground truth cannot be read.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_in_plane_pairs, sample_patches, PairedSample};
use crate::error::{ensure, Error, Result};
use crate::metrics::volume_hash;
use crate::model::{freeze, Component, ModelBundle};
use crate::train::{upsample_stream, Adam, AdamSettings, Pair};
use crate::volume::{Axis, DegradeSpec, Volume};

pub const ADAPT_STAGE: &str = "adapt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptPlan {
    pub epochs: usize,
    pub lr: f64,
    pub freeze_ipu: bool,
    pub seed: u64,
    /// Record per-component checksums after every epoch.
    pub audit: bool,
    /// Axial slices per optimization step.
    pub batch: usize,
    /// Optional input crop `(rows, cols)`; full slices when absent.
    pub patch: Option<(usize, usize)>,
}

impl AdaptPlan {
    /// Defaults for a backbone trained at learning rate `train_lr`.
    pub fn new(train_lr: f64, seed: u64) -> Self {
        AdaptPlan {
            epochs: 10,
            lr: 0.1 * train_lr,
            freeze_ipu: true,
            seed,
            audit: false,
            batch: 4,
            patch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "adaptation learning rate must be positive");
        ensure!(self.batch >= 1, "adaptation batch must be >= 1");
        Ok(())
    }
}

/// One JSON-lines adaptation log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpochLog {
    pub epoch: usize,
    pub l_ipu: f64,
    pub changed_components: Vec<Component>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub param_checksums: Option<BTreeMap<String, String>>,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub bundle: ModelBundle,
    pub log: Vec<AdaptEpochLog>,
}

/// `Some(freeze_ipu)` of the most recent adaptation, `None` if never adapted.
pub fn adaptation_mode(bundle: &ModelBundle) -> Option<bool> {
    bundle
        .provenance
        .history
        .iter()
        .rev()
        .find(|r| r.stage == ADAPT_STAGE)
        .map(|r| r.details.get("freeze_ipu").and_then(|v| v.as_bool()).unwrap_or(true))
}

/// Per-slice in-plane samples: `(y-degraded, x-degraded)` for every axial
/// slice of every volume.
fn slice_samples(volumes: &[&Volume], r: usize) -> Result<Vec<(PairedSample, PairedSample)>> {
    let spec = DegradeSpec::new(r)?;
    let mut out = Vec::new();
    for (i, v) in volumes.iter().enumerate() {
        ensure!(
            v.extent(Axis::Z) >= 2,
            "test volume {i} has {} axial slices, adaptation needs at least 2",
            v.extent(Axis::Z)
        );
        let pairs = make_in_plane_pairs(v, &spec, &format!("test{i}"))?;
        let mut it = pairs.into_iter();
        while let (Some(y), Some(x)) = (it.next(), it.next()) {
            debug_assert_eq!(y.meta.degraded_axis, Some(Axis::Y));
            out.push((y, x));
        }
    }
    Ok(out)
}

/// Optimizes `trainable` of `bundle` under the in-plane loss
/// `mean|SR_x - I^z| + mean|SR_y - I^z|` over the given sparse volumes. One
/// epoch visits every axial slice once in a seeded order. `on_epoch` runs
/// after each epoch with the current parameters.
pub(crate) fn fit_in_plane(
    bundle: &mut ModelBundle,
    volumes: &[&Volume],
    plan: &AdaptPlan,
    trainable: &[Component],
    mut on_epoch: impl FnMut(usize, &ModelBundle) -> Result<()>,
) -> Result<Vec<AdaptEpochLog>> {
    plan.validate()?;
    if volumes.is_empty() {
        return Err(Error::EmptyDataset("no test volumes to adapt on".into()));
    }
    let samples = slice_samples(volumes, bundle.config.upscale)?;
    let cfg = bundle.config.clone();
    let trainable_set: BTreeSet<Component> = trainable.iter().copied().collect();
    let mut adam = Adam::new(AdamSettings::default(), plan.lr, &bundle.params, trainable);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xADA9_7000);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(plan.epochs);

    for epoch in 1..=plan.epochs {
        let before = bundle.checksums();
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0usize);
        for (step, chunk) in order.chunks(plan.batch).enumerate() {
            let mut ys: Vec<PairedSample> = chunk.iter().map(|&i| samples[i].0.clone()).collect();
            let mut xs: Vec<PairedSample> = chunk.iter().map(|&i| samples[i].1.clone()).collect();
            if let Some(patch) = plan.patch {
                use rand::Rng;
                ys = sample_patches(&ys, patch, ys.len(), rng.random())?;
                xs = sample_patches(&xs, patch, xs.len(), rng.random())?;
            }
            let y_pairs: Vec<Pair<'_, f32>> = ys.iter().map(|s| (&s.lr_input, &s.hr_target)).collect();
            let x_pairs: Vec<Pair<'_, f32>> = xs.iter().map(|s| (&s.lr_input, &s.hr_target)).collect();
            let mut grads = bundle.params.zeros_like();
            let p = &bundle.params;
            let ly = upsample_stream(p, &cfg, Component::Ipu, &y_pairs, 1.0, Some(&mut grads), &trainable_set)?;
            let lx = upsample_stream(p, &cfg, Component::Ipu, &x_pairs, 1.0, Some(&mut grads), &trainable_set)?;
            if !(ly.is_finite() && lx.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: step,
                    detail: format!("l_ipu_y={ly}, l_ipu_x={lx}"),
                });
            }
            adam.step(&mut bundle.params, &grads);
            sum += ly + lx;
            steps += 1;
        }
        let after = bundle.checksums();
        let changed = Component::ALL
            .into_iter()
            .filter(|c| before[c.name()] != after[c.name()])
            .collect();
        log.push(AdaptEpochLog {
            epoch,
            l_ipu: sum / steps as f64,
            changed_components: changed,
            param_checksums: plan.audit.then_some(after),
        });
        on_epoch(epoch, bundle)?;
    }
    Ok(log)
}

fn adapt_with(
    bundle: &ModelBundle,
    volumes: &[&Volume],
    plan: &AdaptPlan,
    on_epoch: impl FnMut(usize, &ModelBundle) -> Result<()>,
) -> Result<AdaptOutcome> {
    for c in [Component::Ufe, Component::Tpu, Component::Ipu] {
        ensure!(bundle.is_frozen(c), "adaptation needs a stage-1 trained bundle ({} is not frozen)", c.name());
    }
    if volumes.is_empty() {
        return Err(Error::EmptyDataset("no test volumes to adapt on".into()));
    }
    if plan.epochs == 0 {
        for (i, v) in volumes.iter().enumerate() {
            ensure!(v.extent(Axis::Z) >= 2, "test volume {i} has fewer than 2 axial slices");
        }
        return Ok(AdaptOutcome {
            bundle: bundle.clone(),
            log: Vec::new(),
        });
    }
    let trainable: &[Component] = if plan.freeze_ipu {
        &[Component::Ufe]
    } else {
        &[Component::Ufe, Component::Ipu]
    };
    let mut work = bundle.clone();
    for c in trainable {
        work.frozen.remove(c);
    }
    let log = fit_in_plane(&mut work, volumes, plan, trainable, on_epoch)?;
    let mut out = freeze(&work, trainable);
    let hashes: Vec<String> = volumes.iter().map(|v| volume_hash(v)).collect();
    out.record_stage(
        ADAPT_STAGE,
        plan.seed,
        serde_json::json!({
            "freeze_ipu": plan.freeze_ipu,
            "plan": plan,
            "volumes": hashes,
        }),
    );
    Ok(AdaptOutcome { bundle: out, log })
}

/// Adapts the backbone to one sparse test volume. With `freeze_ipu` false
/// the in-plane head is optimized as well.
pub fn adapt(bundle: &ModelBundle, test_lr: &Volume, plan: &AdaptPlan) -> Result<AdaptOutcome> {
    adapt_with(bundle, &[test_lr], plan, |_, _| Ok(()))
}

/// Adapts once over a whole test dataset.
pub fn adapt_dataset(bundle: &ModelBundle, test_lr: &[&Volume], plan: &AdaptPlan) -> Result<AdaptOutcome> {
    adapt_with(bundle, test_lr, plan, |_, _| Ok(()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Training loss per epoch, starting at epoch 1.
    pub loss: Vec<f64>,
    /// Probe value before adaptation (index 0) and after every epoch.
    pub probe: Vec<f64>,
}

impl Trajectory {
    /// Largest drop of the probe below its running maximum.
    pub fn max_drop_from_peak(&self) -> f64 {
        let mut peak = f64::NEG_INFINITY;
        let mut worst = 0.0f64;
        for &v in &self.probe {
            peak = peak.max(v);
            worst = worst.max(peak - v);
        }
        worst
    }
}

/// Runs `long_epochs` of dataset-level adaptation, recording the loss and,
/// after every epoch, `probe(bundle)`. Probes that use ground truth live in
/// the caller; this function only sees sparse volumes.
pub fn adapt_stability_probe(
    bundle: &ModelBundle,
    test_lr: &[&Volume],
    long_epochs: usize,
    plan: &AdaptPlan,
    mut probe: impl FnMut(&ModelBundle) -> Result<f64>,
) -> Result<(AdaptOutcome, Trajectory)> {
    let plan = AdaptPlan {
        epochs: long_epochs,
        ..plan.clone()
    };
    let mut values = vec![probe(bundle)?];
    let outcome = adapt_with(bundle, test_lr, &plan, |_, b| {
        values.push(probe(b)?);
        Ok(())
    })?;
    let trajectory = Trajectory {
        loss: outcome.log.iter().map(|l| l.l_ipu).collect(),
        probe: values,
    };
    Ok((outcome, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use rand::{Rng, SeedableRng};

    fn trained_like(cfg: NetConfig) -> ModelBundle {
        let b = ModelBundle::init(cfg, 21).unwrap();
        freeze(&b, &Component::ALL)
    }

    fn random_lr(seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn([8, 8, 3], |_, _, _| rng.random::<f32>()).unwrap()
    }

    fn plan(epochs: usize, freeze_ipu: bool) -> AdaptPlan {
        AdaptPlan {
            epochs,
            freeze_ipu,
            audit: true,
            ..AdaptPlan::new(1e-3, 4)
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let b = trained_like(NetConfig::desk(2));
        let out = adapt(&b, &random_lr(1), &plan(0, true)).unwrap();
        assert_eq!(out.bundle, b);
        assert!(out.log.is_empty());
    }

    #[test]
    fn frozen_adaptation_changes_only_backbone() {
        let b = trained_like(NetConfig::desk(2));
        let out = adapt(&b, &random_lr(2), &plan(2, true)).unwrap();
        assert_ne!(out.bundle.params.ufe, b.params.ufe);
        for c in [Component::Tpu, Component::Ipu, Component::Srn] {
            assert_eq!(out.bundle.params.get(c), b.params.get(c));
        }
        for rec in &out.log {
            assert_eq!(rec.changed_components, vec![Component::Ufe]);
            assert!(rec.param_checksums.is_some());
        }
        assert_eq!(out.bundle.frozen, b.frozen);
        assert_eq!(adaptation_mode(&out.bundle), Some(true));
        assert_eq!(adapt(&b, &random_lr(2), &plan(2, true)).unwrap().bundle, out.bundle);
    }

    #[test]
    fn unfrozen_adaptation_also_moves_ipu() {
        let b = trained_like(NetConfig::desk(2));
        let out = adapt(&b, &random_lr(3), &plan(1, false)).unwrap();
        assert_ne!(out.bundle.params.ipu, b.params.ipu);
        assert_eq!(out.bundle.params.tpu, b.params.tpu);
        assert_eq!(out.log[0].changed_components, vec![Component::Ufe, Component::Ipu]);
        assert_eq!(adaptation_mode(&out.bundle), Some(false));
    }

    #[test]
    fn rejects_single_slice_and_untrained_bundles() {
        let b = trained_like(NetConfig::desk(2));
        let thin = Volume::filled([8, 8, 1], 0.5).unwrap();
        assert!(adapt(&b, &thin, &plan(1, true)).is_err());
        assert!(adapt(&b, &thin, &plan(0, true)).is_err());
        let fresh = ModelBundle::init(NetConfig::desk(2), 0).unwrap();
        assert!(adapt(&fresh, &random_lr(1), &plan(1, true)).is_err());
    }

    #[test]
    fn constant_volume_has_nothing_to_learn() {
        let mut b = trained_like(NetConfig::desk(2));
        // a head whose output is its bias reproduces a constant exactly
        let ps = b.params.get_mut(Component::Ipu);
        let last = ps.tensors.len() - 2;
        ps.tensors[last].data.iter_mut().for_each(|w| *w = 0.0);
        ps.tensors[last + 1].data[0] = 0.5;
        let v = Volume::filled([8, 8, 3], 0.5).unwrap();
        let (_, traj) = adapt_stability_probe(&b, &[&v], 3, &plan(0, true), |_| Ok(0.0)).unwrap();
        assert_eq!(traj.loss, vec![0.0; 3]);
        assert_eq!(traj.probe.len(), 4);
        assert_eq!(traj.max_drop_from_peak(), 0.0);
    }

    #[test]
    fn drop_from_peak() {
        let t = Trajectory {
            loss: vec![],
            probe: vec![30.0, 31.0, 30.7, 31.2, 31.1],
        };
        assert!((t.max_drop_from_peak() - 0.3).abs() < 1e-12);
    }
}
