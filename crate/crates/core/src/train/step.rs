//! Loss evaluation and gradient accumulation over one stream of samples.
//!
//! A stream is a list of `(input triplet, target)` pairs sharing one loss
//! term; the term is the mean absolute error over every target pixel of the
//! stream.

use std::collections::BTreeSet;

use crate::error::{ensure, Result};
use crate::model::{
    srn_backward, srn_forward_cached, ufe_backward, ufe_forward_cached, upsample_backward, upsample_forward_cached,
    Component, ModelParams, NetConfig,
};
use crate::nn::{Scalar, Tensor};

pub type Pair<'a, T> = (&'a Tensor<T>, &'a Tensor<T>);

/// Mean absolute error between equally sized slices.
pub fn l1_mean<T: Scalar>(pred: &[T], target: &[T]) -> Result<f64> {
    ensure!(
        pred.len() == target.len(),
        "l1: extent mismatch {} vs {}",
        pred.len(),
        target.len()
    );
    ensure!(!pred.is_empty(), "l1: empty input");
    let sum: f64 = pred.iter().zip(target).map(|(&p, &t)| (p - t).as_f64().abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// `scale * sign(pred - target)` elementwise.
fn l1_grad<T: Scalar>(pred: &[T], target: &[T], scale: T) -> Vec<T> {
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            if d > T::zero() {
                scale
            } else if d < T::zero() {
                -scale
            } else {
                T::zero()
            }
        })
        .collect()
}

fn check_extents<T>(pairs: &[Pair<'_, T>], scale: usize) -> Result<usize> {
    ensure!(!pairs.is_empty(), "empty loss stream");
    let mut n = 0;
    for (input, target) in pairs {
        ensure!(
            target.channels == 1 && target.height == input.height && target.width == scale * input.width,
            "target {}x{} does not match input {}x{} at scale {scale}",
            target.height,
            target.width,
            input.height,
            input.width
        );
        n += target.data.len();
    }
    Ok(n)
}

fn split_grads<T>(grads: &mut ModelParams<T>, head: Component) -> (&mut crate::model::ParamSet<T>, &mut crate::model::ParamSet<T>) {
    let ModelParams { ufe, tpu, ipu, srn } = grads;
    let head = match head {
        Component::Tpu => tpu,
        Component::Ipu => ipu,
        Component::Srn => srn,
        Component::Ufe => unreachable!("the backbone is not a head"),
    };
    (ufe, head)
}

/// `G_head ∘ G_F` over the stream. Returns the stream's mean L1 and, when
/// `grads` is given, adds `weight` times its gradient for every component in
/// `trainable`.
pub fn upsample_stream<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &NetConfig,
    head: Component,
    pairs: &[Pair<'_, T>],
    weight: f64,
    mut grads: Option<&mut ModelParams<T>>,
    trainable: &BTreeSet<Component>,
) -> Result<f64> {
    ensure!(matches!(head, Component::Tpu | Component::Ipu), "upsampling head must be tpu or ipu");
    let n = check_extents(pairs, cfg.upscale)?;
    let train_ufe = trainable.contains(&Component::Ufe);
    let train_head = trainable.contains(&head);
    let backward = grads.is_some() && (train_ufe || train_head);
    let scale = T::lit(weight / n as f64);
    let head_params = params.get(head);
    let mut sum = 0.0;
    for (input, target) in pairs {
        let (f, ucache) = ufe_forward_cached(&params.ufe, cfg, input)?;
        let (out, hcache) = upsample_forward_cached(head_params, cfg, &f);
        sum += l1_mean(&out.data, &target.data)? * target.data.len() as f64;
        if !backward {
            continue;
        }
        let g = Tensor::from_vec(1, out.height, out.width, l1_grad(&out.data, &target.data, scale));
        let (g_ufe, g_head) = split_grads(grads.as_deref_mut().expect("backward implies grads"), head);
        let d_f = upsample_backward(head_params, cfg, &f, &hcache, &g, train_head.then_some(g_head));
        if train_ufe {
            ufe_backward(&params.ufe, cfg, &ucache, &d_f, Some(g_ufe));
        }
    }
    Ok(sum / n as f64)
}

/// Residual refinement `center + G_S ∘ G_F` over the stream.
pub fn refine_stream<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &NetConfig,
    pairs: &[Pair<'_, T>],
    weight: f64,
    mut grads: Option<&mut ModelParams<T>>,
    trainable: &BTreeSet<Component>,
) -> Result<f64> {
    let n = check_extents(pairs, 1)?;
    let train_ufe = trainable.contains(&Component::Ufe);
    let train_srn = trainable.contains(&Component::Srn);
    let backward = grads.is_some() && (train_ufe || train_srn);
    let scale = T::lit(weight / n as f64);
    let mut sum = 0.0;
    for (input, target) in pairs {
        let center = Tensor::from_vec(1, input.height, input.width, input.channel(1).to_vec());
        let (f, ucache) = ufe_forward_cached(&params.ufe, cfg, input)?;
        let (out, scache) = srn_forward_cached(&params.srn, cfg, &f, &center)?;
        sum += l1_mean(&out.data, &target.data)? * target.data.len() as f64;
        if !backward {
            continue;
        }
        let g = Tensor::from_vec(1, out.height, out.width, l1_grad(&out.data, &target.data, scale));
        let (g_ufe, g_srn) = split_grads(grads.as_deref_mut().expect("backward implies grads"), Component::Srn);
        let d_f = srn_backward(&params.srn, cfg, &f, &scache, &g, train_srn.then_some(g_srn), train_ufe);
        if let Some(d_f) = d_f {
            ufe_backward(&params.ufe, cfg, &ucache, &d_f, Some(g_ufe));
        }
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBundle;

    #[test]
    fn l1_mean_matches_elementwise_oracle() {
        let p = [0.5f32, -1.0, 2.0, 0.25];
        let t = [0.0f32, 0.0, 2.5, 0.25];
        assert_eq!(l1_mean(&p, &t).unwrap(), (0.5 + 1.0 + 0.5 + 0.0) / 4.0);
        assert!(l1_mean(&p, &t[..3]).is_err());
    }

    #[test]
    fn frozen_components_receive_no_gradient() {
        let cfg = NetConfig::desk(2);
        let bundle = ModelBundle::init(cfg.clone(), 1).unwrap();
        let input = Tensor::from_vec(3, 4, 3, (0..36).map(|i| (i % 7) as f32 / 7.0).collect());
        let target = Tensor::from_vec(1, 4, 6, vec![0.3; 24]);
        let mut grads = bundle.params.zeros_like();
        let trainable: BTreeSet<_> = [Component::Ufe].into();
        upsample_stream(&bundle.params, &cfg, Component::Ipu, &[(&input, &target)], 1.0, Some(&mut grads), &trainable)
            .unwrap();
        let zero = bundle.params.zeros_like();
        assert_eq!(grads.ipu, zero.ipu);
        assert_eq!(grads.tpu, zero.tpu);
        assert_ne!(grads.ufe, zero.ufe);
    }
}
