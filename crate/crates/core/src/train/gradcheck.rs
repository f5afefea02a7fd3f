//! Analytic gradients against central finite differences in `f64`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::step::{l1_mean, refine_stream, upsample_stream};
use crate::data::PairedSample;
use crate::error::{ensure, Result};
use crate::model::{
    srn_forward_cached, ufe_forward_cached, upsample_forward_cached, Component, ModelBundle, ModelParams, NetConfig,
};
use crate::nn::Tensor;

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for the relative error; both gradients below it count
/// as agreeing zeros.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    Tpu,
    Ipu,
    Ref,
}

impl LossId {
    pub fn components(self) -> [Component; 2] {
        match self {
            LossId::Tpu => [Component::Ufe, Component::Tpu],
            LossId::Ipu => [Component::Ufe, Component::Ipu],
            LossId::Ref => [Component::Ufe, Component::Srn],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: LossId,
    pub params_checked: usize,
    /// Draws rejected because their stencil crossed a kink.
    pub params_skipped: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between `grad[i]` and the central difference of
/// `loss` at `x[i]` over `indices`. `x` is restored afterwards.
pub fn fd_check(x: &mut [f64], grad: &[f64], indices: &[usize], step: f64, mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = x[i];
        x[i] = orig + step;
        let plus = loss(x);
        x[i] = orig - step;
        let minus = loss(x);
        x[i] = orig;
        worst = worst.max(relative_error(grad[i], (plus - minus) / (2.0 * step)));
    }
    worst
}

fn flatten(params: &ModelParams<f64>, components: &[Component]) -> Vec<f64> {
    components
        .iter()
        .flat_map(|&c| params.get(c).tensors.iter().flat_map(|t| t.data.iter().copied()))
        .collect()
}

fn unflatten(params: &mut ModelParams<f64>, components: &[Component], flat: &[f64]) {
    let mut k = 0;
    for &c in components {
        for t in &mut params.get_mut(c).tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[k..k + n]);
            k += n;
        }
    }
}

/// Loss on one sample together with the state of every ReLU and the sign of
/// every L1 residual. The loss is a smooth function of the parameters on any
/// segment along which this pattern stays constant.
fn loss_and_pattern(
    params: &ModelParams<f64>,
    cfg: &NetConfig,
    loss: LossId,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
) -> Result<(f64, Vec<bool>)> {
    let mut pattern = Vec::new();
    let (f, ucache) = ufe_forward_cached(&params.ufe, cfg, input)?;
    ucache.relu_mask(cfg, &mut pattern);
    let out = match loss {
        LossId::Tpu | LossId::Ipu => {
            let head = if loss == LossId::Tpu { &params.tpu } else { &params.ipu };
            let (out, cache) = upsample_forward_cached(head, cfg, &f);
            cache.relu_mask(&mut pattern);
            out
        }
        LossId::Ref => {
            let center = Tensor::from_vec(1, input.height, input.width, input.channel(1).to_vec());
            let (out, cache) = srn_forward_cached(&params.srn, cfg, &f, &center)?;
            cache.relu_mask(&mut pattern);
            out
        }
    };
    for (&p, &t) in out.data.iter().zip(&target.data) {
        pattern.push(p > t);
        pattern.push(p < t);
    }
    Ok((l1_mean(&out.data, &target.data)?, pattern))
}

/// Checks the gradient of the selected loss on one sample against central
/// differences for `n_params` randomly drawn parameters of the backbone and
/// the loss's head. A parameter whose stencil `x ± FD_STEP` crosses a ReLU or
/// L1 kink has no valid central difference; it is counted in
/// `params_skipped` and replaced by the next random draw.
pub fn grad_check(
    bundle: &ModelBundle,
    sample: &PairedSample,
    loss: LossId,
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let cfg = &bundle.config;
    let components = loss.components();
    let trainable: BTreeSet<Component> = components.into();
    let input = sample.lr_input.cast::<f64>();
    let target = sample.hr_target.cast::<f64>();
    let pairs = [(&input, &target)];

    let mut params: ModelParams<f64> = bundle.params.cast();
    let mut grads = params.zeros_like();
    match loss {
        LossId::Tpu => upsample_stream(&params, cfg, Component::Tpu, &pairs, 1.0, Some(&mut grads), &trainable)?,
        LossId::Ipu => upsample_stream(&params, cfg, Component::Ipu, &pairs, 1.0, Some(&mut grads), &trainable)?,
        LossId::Ref => refine_stream(&params, cfg, &pairs, 1.0, Some(&mut grads), &trainable)?,
    };
    let grad_flat = flatten(&grads, &components);
    let mut x = flatten(&params, &components);
    ensure!(n_params <= x.len(), "cannot check {n_params} of {} parameters", x.len());
    let (_, base_pattern) = loss_and_pattern(&params, cfg, loss, &input, &target)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut rng);
    let (mut checked, mut skipped, mut worst) = (0usize, 0usize, 0.0f64);
    for &i in &order {
        if checked == n_params {
            break;
        }
        let orig = x[i];
        let mut at = |value: f64| -> Result<(f64, Vec<bool>)> {
            x[i] = value;
            unflatten(&mut params, &components, &x);
            loss_and_pattern(&params, cfg, loss, &input, &target)
        };
        let (plus, p_plus) = at(orig + FD_STEP)?;
        let (minus, p_minus) = at(orig - FD_STEP)?;
        x[i] = orig;
        if p_plus != base_pattern || p_minus != base_pattern {
            skipped += 1;
            continue;
        }
        worst = worst.max(relative_error(grad_flat[i], (plus - minus) / (2.0 * FD_STEP)));
        checked += 1;
    }
    ensure!(
        checked == n_params,
        "only {checked} of {n_params} parameters have kink-free stencils ({skipped} skipped)"
    );
    Ok(GradCheckReport {
        loss,
        params_checked: checked,
        params_skipped: skipped,
        max_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_toy_is_exact() {
        // loss(x) = sum_i a_i x_i, an identity backbone feeding a linear head
        let a: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x: Vec<f64> = (0..64).map(|i| i as f64 / 64.0).collect();
        let loss = |x: &[f64]| x.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>();
        let idx: Vec<usize> = (0..64).collect();
        assert!(fd_check(&mut x, &a, &idx, FD_STEP, loss) < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut x = vec![1.0, 2.0];
        let err = fd_check(&mut x, &[2.0, 0.0], &[0, 1], FD_STEP, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!(err > 0.5);
        assert_eq!(x, vec![1.0, 2.0]);
    }
}
