//! Forward and backward passes of the backbone and the three heads.
//!
//! Backward functions accumulate parameter gradients into an optional
//! [`ParamSet`] of the same layout and return the gradient with respect to
//! their feature input where one is needed.

use super::{Component, ModelParams, NetConfig, ParamSet};
use crate::error::{ensure, Result};
use crate::nn::{
    conv2d, conv2d_backward, pixel_shuffle_1d, pixel_unshuffle_1d, relu_backward_inplace, relu_inplace, ConvSpec,
    Scalar, Tensor,
};

/// Backbone output: `base_channels x H x W`, same extent as the input.
pub type FeatureMap<T> = Tensor<T>;

fn specs(component: Component, cfg: &NetConfig) -> Vec<ConvSpec> {
    component.layout(cfg).into_iter().map(|(_, s)| s).collect()
}

fn grads_of<'a, T: Scalar>(grads: &'a mut Option<&mut ParamSet<T>>, i: usize) -> Option<(&'a mut [T], &'a mut [T])> {
    grads.as_deref_mut().map(|g| g.conv_mut(i))
}

pub struct UfeCache<T> {
    sfe1: Vec<T>,
    /// Running concatenation `[block input, dense outputs...]` per block.
    block_cats: Vec<Vec<T>>,
    block_outs: Vec<T>,
    gff1: Vec<T>,
    input: Tensor<T>,
}

impl<T: Scalar> UfeCache<T> {
    /// Appends the on/off state of every rectified unit.
    pub(crate) fn relu_mask(&self, cfg: &NetConfig, out: &mut Vec<bool>) {
        let skip = cfg.base_channels * self.input.height * self.input.width;
        for cat in &self.block_cats {
            out.extend(cat[skip..].iter().map(|&v| v > T::zero()));
        }
    }
}

pub fn ufe_forward<T: Scalar>(params: &ParamSet<T>, cfg: &NetConfig, input: &Tensor<T>) -> Result<FeatureMap<T>> {
    ufe_forward_cached(params, cfg, input).map(|(f, _)| f)
}

pub fn ufe_forward_cached<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    input: &Tensor<T>,
) -> Result<(FeatureMap<T>, UfeCache<T>)> {
    ensure!(
        input.channels == cfg.input_channels,
        "backbone expects {} input channels, got {}",
        cfg.input_channels,
        input.channels
    );
    let specs = specs(Component::Ufe, cfg);
    let (h, w) = (input.height, input.width);
    let hw = h * w;
    let g0 = cfg.base_channels;
    let per_block = cfg.convs_per_rdb + 1;

    let conv = |i: usize, x: &[T]| {
        let (wt, b) = params.conv(i);
        conv2d(x, h, w, &specs[i], wt, b)
    };

    let sfe1 = conv(0, &input.data);
    let sfe2 = conv(1, &sfe1);
    let mut block_cats = Vec::with_capacity(cfg.num_rdb);
    let mut block_outs: Vec<T> = Vec::with_capacity(cfg.num_rdb * g0 * hw);
    for b in 0..cfg.num_rdb {
        let block_in: &[T] = if b == 0 { &sfe2 } else { &block_outs[(b - 1) * g0 * hw..b * g0 * hw] };
        let mut cat = Vec::with_capacity((g0 + cfg.convs_per_rdb * cfg.growth) * hw);
        cat.extend_from_slice(block_in);
        let base = 2 + b * per_block;
        for c in 0..cfg.convs_per_rdb {
            let mut out = conv(base + c, &cat);
            relu_inplace(&mut out);
            cat.extend_from_slice(&out);
        }
        let mut fused = conv(base + cfg.convs_per_rdb, &cat);
        for (f, &x) in fused.iter_mut().zip(block_in) {
            *f += x;
        }
        block_cats.push(cat);
        block_outs.extend_from_slice(&fused);
    }
    let gff = 2 + cfg.num_rdb * per_block;
    let gff1 = conv(gff, &block_outs);
    let mut out = conv(gff + 1, &gff1);
    for (o, &s) in out.iter_mut().zip(&sfe1) {
        *o += s;
    }
    let cache = UfeCache {
        sfe1,
        block_cats,
        block_outs,
        gff1,
        input: input.clone(),
    };
    Ok((Tensor::from_vec(g0, h, w, out), cache))
}

/// Accumulates backbone parameter gradients for upstream gradient `grad`.
pub fn ufe_backward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    cache: &UfeCache<T>,
    grad: &FeatureMap<T>,
    mut grads: Option<&mut ParamSet<T>>,
) {
    let specs = specs(Component::Ufe, cfg);
    let (h, w) = (cache.input.height, cache.input.width);
    let hw = h * w;
    let g0 = cfg.base_channels;
    let gr = cfg.growth;
    let per_block = cfg.convs_per_rdb + 1;
    let gff = 2 + cfg.num_rdb * per_block;

    let mut d_sfe1 = grad.data.clone();
    let mut d_gff1 = vec![T::zero(); g0 * hw];
    conv2d_backward(
        &cache.gff1,
        h,
        w,
        &specs[gff + 1],
        params.conv(gff + 1).0,
        &grad.data,
        grads_of(&mut grads, gff + 1),
        Some(&mut d_gff1),
    );
    let mut d_outs = vec![T::zero(); cfg.num_rdb * g0 * hw];
    conv2d_backward(
        &cache.block_outs,
        h,
        w,
        &specs[gff],
        params.conv(gff).0,
        &d_gff1,
        grads_of(&mut grads, gff),
        Some(&mut d_outs),
    );

    let mut d_next = vec![T::zero(); g0 * hw];
    for b in (0..cfg.num_rdb).rev() {
        let cat = &cache.block_cats[b];
        let base = 2 + b * per_block;
        let mut d_out = d_outs[b * g0 * hw..(b + 1) * g0 * hw].to_vec();
        for (d, &n) in d_out.iter_mut().zip(&d_next) {
            *d += n;
        }
        let mut d_cat = vec![T::zero(); cat.len()];
        let lff = base + cfg.convs_per_rdb;
        conv2d_backward(
            cat,
            h,
            w,
            &specs[lff],
            params.conv(lff).0,
            &d_out,
            grads_of(&mut grads, lff),
            Some(&mut d_cat),
        );
        for c in (0..cfg.convs_per_rdb).rev() {
            let off = (g0 + c * gr) * hw;
            let (d_prefix, d_rest) = d_cat.split_at_mut(off);
            let d_seg = &mut d_rest[..gr * hw];
            relu_backward_inplace(&cat[off..off + gr * hw], d_seg);
            conv2d_backward(
                &cat[..off],
                h,
                w,
                &specs[base + c],
                params.conv(base + c).0,
                d_seg,
                grads_of(&mut grads, base + c),
                Some(d_prefix),
            );
        }
        for ((n, &o), &dc) in d_next.iter_mut().zip(&d_out).zip(&d_cat[..g0 * hw]) {
            *n = o + dc;
        }
    }

    conv2d_backward(
        &cache.sfe1,
        h,
        w,
        &specs[1],
        params.conv(1).0,
        &d_next,
        grads_of(&mut grads, 1),
        Some(&mut d_sfe1),
    );
    conv2d_backward(
        &cache.input.data,
        h,
        w,
        &specs[0],
        params.conv(0).0,
        &d_sfe1,
        grads_of(&mut grads, 0),
        None,
    );
}

pub struct UpsampleCache<T> {
    h1: Vec<T>,
    h2: Vec<T>,
    shuffled: Tensor<T>,
}

impl<T: Scalar> UpsampleCache<T> {
    pub(crate) fn relu_mask(&self, out: &mut Vec<bool>) {
        out.extend(self.h1.iter().chain(&self.h2).map(|&v| v > T::zero()));
    }
}

/// conv -> relu -> conv (r*c maps) -> relu -> 1-D shuffle -> conv to one
/// channel. Output is `1 x H x (r*W)`.
pub fn upsample_forward<T: Scalar>(params: &ParamSet<T>, cfg: &NetConfig, f: &FeatureMap<T>) -> Tensor<T> {
    upsample_forward_cached(params, cfg, f).0
}

pub fn upsample_forward_cached<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    f: &FeatureMap<T>,
) -> (Tensor<T>, UpsampleCache<T>) {
    let specs = specs(Component::Tpu, cfg);
    let (h, w) = (f.height, f.width);
    let r = cfg.upscale;
    let mut h1 = conv2d(&f.data, h, w, &specs[0], params.conv(0).0, params.conv(0).1);
    relu_inplace(&mut h1);
    let mut h2 = conv2d(&h1, h, w, &specs[1], params.conv(1).0, params.conv(1).1);
    relu_inplace(&mut h2);
    let shuffled = pixel_shuffle_1d(&Tensor::from_vec(r * cfg.head_channels, h, w, h2.clone()), r);
    let out = conv2d(&shuffled.data, h, w * r, &specs[2], params.conv(2).0, params.conv(2).1);
    (Tensor::from_vec(1, h, w * r, out), UpsampleCache { h1, h2, shuffled })
}

/// Returns the gradient with respect to the head's feature input.
pub fn upsample_backward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    f: &FeatureMap<T>,
    cache: &UpsampleCache<T>,
    grad_out: &Tensor<T>,
    mut grads: Option<&mut ParamSet<T>>,
) -> FeatureMap<T> {
    let specs = specs(Component::Tpu, cfg);
    let (h, w) = (f.height, f.width);
    let r = cfg.upscale;
    let mut d_shuf = Tensor::zeros(cfg.head_channels, h, w * r);
    conv2d_backward(
        &cache.shuffled.data,
        h,
        w * r,
        &specs[2],
        params.conv(2).0,
        &grad_out.data,
        grads_of(&mut grads, 2),
        Some(&mut d_shuf.data),
    );
    let mut d_h2 = pixel_unshuffle_1d(&d_shuf, r).data;
    relu_backward_inplace(&cache.h2, &mut d_h2);
    let mut d_h1 = vec![T::zero(); cache.h1.len()];
    conv2d_backward(
        &cache.h1,
        h,
        w,
        &specs[1],
        params.conv(1).0,
        &d_h2,
        grads_of(&mut grads, 1),
        Some(&mut d_h1),
    );
    relu_backward_inplace(&cache.h1, &mut d_h1);
    let mut d_f = Tensor::zeros(f.channels, h, w);
    conv2d_backward(
        &f.data,
        h,
        w,
        &specs[0],
        params.conv(0).0,
        &d_h1,
        grads_of(&mut grads, 0),
        Some(&mut d_f.data),
    );
    d_f
}

pub struct SrnCache<T> {
    h1: Vec<T>,
    h2: Vec<T>,
}

impl<T: Scalar> SrnCache<T> {
    pub(crate) fn relu_mask(&self, out: &mut Vec<bool>) {
        out.extend(self.h1.iter().chain(&self.h2).map(|&v| v > T::zero()));
    }
}

pub fn srn_forward_cached<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    f: &FeatureMap<T>,
    center: &Tensor<T>,
) -> Result<(Tensor<T>, SrnCache<T>)> {
    ensure!(
        center.channels == 1 && center.height == f.height && center.width == f.width,
        "refinement center slice {}x{} does not match features {}x{}",
        center.height,
        center.width,
        f.height,
        f.width
    );
    let specs = specs(Component::Srn, cfg);
    let (h, w) = (f.height, f.width);
    let mut h1 = conv2d(&f.data, h, w, &specs[0], params.conv(0).0, params.conv(0).1);
    relu_inplace(&mut h1);
    let mut h2 = conv2d(&h1, h, w, &specs[1], params.conv(1).0, params.conv(1).1);
    relu_inplace(&mut h2);
    let mut out = conv2d(&h2, h, w, &specs[2], params.conv(2).0, params.conv(2).1);
    for (o, &c) in out.iter_mut().zip(&center.data) {
        *o += c;
    }
    Ok((Tensor::from_vec(1, h, w, out), SrnCache { h1, h2 }))
}

/// Accumulates refinement-head gradients and returns the feature gradient.
/// The gradient with respect to the center slice is `grad_out` itself.
pub fn srn_backward<T: Scalar>(
    params: &ParamSet<T>,
    cfg: &NetConfig,
    f: &FeatureMap<T>,
    cache: &SrnCache<T>,
    grad_out: &Tensor<T>,
    mut grads: Option<&mut ParamSet<T>>,
    need_feature_grad: bool,
) -> Option<FeatureMap<T>> {
    let specs = specs(Component::Srn, cfg);
    let (h, w) = (f.height, f.width);
    let mut d_h2 = vec![T::zero(); cache.h2.len()];
    conv2d_backward(
        &cache.h2,
        h,
        w,
        &specs[2],
        params.conv(2).0,
        &grad_out.data,
        grads_of(&mut grads, 2),
        Some(&mut d_h2),
    );
    relu_backward_inplace(&cache.h2, &mut d_h2);
    let mut d_h1 = vec![T::zero(); cache.h1.len()];
    conv2d_backward(
        &cache.h1,
        h,
        w,
        &specs[1],
        params.conv(1).0,
        &d_h2,
        grads_of(&mut grads, 1),
        Some(&mut d_h1),
    );
    relu_backward_inplace(&cache.h1, &mut d_h1);
    let mut d_f = need_feature_grad.then(|| Tensor::zeros(f.channels, h, w));
    conv2d_backward(
        &f.data,
        h,
        w,
        &specs[0],
        params.conv(0).0,
        &d_h1,
        grads_of(&mut grads, 0),
        d_f.as_mut().map(|t| t.data.as_mut_slice()),
    );
    d_f
}

pub fn head_forward_tpu<T: Scalar>(params: &ModelParams<T>, cfg: &NetConfig, f: &FeatureMap<T>) -> Tensor<T> {
    upsample_forward(&params.tpu, cfg, f)
}

pub fn head_forward_ipu<T: Scalar>(params: &ModelParams<T>, cfg: &NetConfig, f: &FeatureMap<T>) -> Tensor<T> {
    upsample_forward(&params.ipu, cfg, f)
}

/// Residual refinement: `center + G_S(f)`, same extent as `center`.
pub fn head_forward_srn<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &NetConfig,
    f: &FeatureMap<T>,
    center: &Tensor<T>,
) -> Result<Tensor<T>> {
    srn_forward_cached(&params.srn, cfg, f, center).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBundle;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        let data = (0..c * h * w)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Tensor::from_vec(c, h, w, data)
    }

    fn desk_params(seed: u64) -> (NetConfig, ModelParams<f64>) {
        let cfg = NetConfig::desk(4);
        let bundle = ModelBundle::init(cfg.clone(), seed).unwrap();
        (cfg, bundle.params.cast())
    }

    #[test]
    fn backbone_preserves_resolution_and_is_pure() {
        let (cfg, p) = desk_params(1);
        let x = random_tensor(3, 7, 5, 2);
        let a = ufe_forward(&p.ufe, &cfg, &x).unwrap();
        let b = ufe_forward(&p.ufe, &cfg, &x).unwrap();
        assert_eq!((a.channels, a.height, a.width), (16, 7, 5));
        assert_eq!(a, b);
        assert!(ufe_forward(&p.ufe, &cfg, &random_tensor(2, 7, 5, 2)).is_err());
    }

    #[test]
    fn upsampling_heads_stretch_last_axis() {
        let (cfg, p) = desk_params(3);
        let f = random_tensor(16, 6, 4, 4);
        let t = head_forward_tpu(&p, &cfg, &f);
        let i = head_forward_ipu(&p, &cfg, &f);
        assert_eq!((t.channels, t.height, t.width), (1, 6, 16));
        assert_eq!((i.height, i.width), (6, 16));
        assert_ne!(t, i, "heads have separate parameters");
    }

    #[test]
    fn zero_output_conv_gives_zero_output() {
        let (cfg, mut p) = desk_params(5);
        let (w, b) = p.tpu.conv_mut(2);
        w.fill(0.0);
        b.fill(0.0);
        let out = head_forward_tpu(&p, &cfg, &random_tensor(16, 3, 3, 6));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn refinement_head_starts_as_identity() {
        let (cfg, p) = desk_params(7);
        let f = random_tensor(16, 5, 6, 8);
        let center = random_tensor(1, 5, 6, 9);
        let out = head_forward_srn(&p, &cfg, &f, &center).unwrap();
        assert_eq!(out, center);
        assert!(head_forward_srn(&p, &cfg, &f, &random_tensor(1, 5, 5, 9)).is_err());
    }

    #[test]
    fn refinement_center_jacobian_is_identity_by_finite_differences() {
        let (cfg, p) = desk_params(10);
        let f = random_tensor(16, 3, 4, 11);
        let center = random_tensor(1, 3, 4, 12);
        let eps = 1e-6;
        for i in 0..center.data.len() {
            let mut plus = center.clone();
            plus.data[i] += eps;
            let mut minus = center.clone();
            minus.data[i] -= eps;
            let a = head_forward_srn(&p, &cfg, &f, &plus).unwrap();
            let b = head_forward_srn(&p, &cfg, &f, &minus).unwrap();
            for j in 0..center.data.len() {
                let d = (a.data[j] - b.data[j]) / (2.0 * eps);
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-8);
            }
        }
    }

    /// Central differences on a linear probe of each forward function.
    fn check_input_gradient(
        forward: impl Fn(&Tensor<f64>) -> Tensor<f64>,
        analytic: &Tensor<f64>,
        x: &Tensor<f64>,
        probe: &Tensor<f64>,
    ) {
        let eps = 1e-6;
        let objective = |t: &Tensor<f64>| -> f64 { forward(t).data.iter().zip(&probe.data).map(|(a, b)| a * b).sum() };
        for i in (0..x.data.len()).step_by(7) {
            let mut plus = x.clone();
            plus.data[i] += eps;
            let mut minus = x.clone();
            minus.data[i] -= eps;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            let tol = 1e-6 * (1.0 + fd.abs());
            assert!((fd - analytic.data[i]).abs() < tol, "index {i}: fd {fd} vs {}", analytic.data[i]);
        }
    }

    #[test]
    fn upsample_feature_gradient_matches_finite_differences() {
        let (cfg, p) = desk_params(13);
        let f = random_tensor(16, 4, 3, 14);
        let probe = random_tensor(1, 4, 12, 15);
        let (_, cache) = upsample_forward_cached(&p.tpu, &cfg, &f);
        let g = upsample_backward(&p.tpu, &cfg, &f, &cache, &probe, None);
        check_input_gradient(|t| upsample_forward(&p.tpu, &cfg, t), &g, &f, &probe);
    }

    #[test]
    fn srn_feature_gradient_matches_finite_differences() {
        let (cfg, mut p) = desk_params(16);
        // give the output conv weights so features matter
        let (w, _) = p.srn.conv_mut(2);
        for (i, v) in w.iter_mut().enumerate() {
            *v = ((i as f64) * 0.31).sin() * 0.1;
        }
        let f = random_tensor(16, 4, 5, 17);
        let center = random_tensor(1, 4, 5, 18);
        let probe = random_tensor(1, 4, 5, 19);
        let (_, cache) = srn_forward_cached(&p.srn, &cfg, &f, &center).unwrap();
        let g = srn_backward(&p.srn, &cfg, &f, &cache, &probe, None, true).unwrap();
        check_input_gradient(|t| head_forward_srn(&p, &cfg, t, &center).unwrap(), &g, &f, &probe);
    }
}
