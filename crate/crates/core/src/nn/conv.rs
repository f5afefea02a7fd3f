use serde::{Deserialize, Serialize};

use super::{gemm, Scalar};

/// A stride-1, zero-padded ("same") square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvSpec {
    pub const fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec { cin, cout, kernel }
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

/// Unfolds `input` (`cin x h x w`) into a `(cin*k*k) x (h*w)` matrix.
fn im2col<T: Scalar>(input: &[T], h: usize, w: usize, spec: &ConvSpec, col: &mut [T]) {
    let k = spec.kernel;
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..spec.cin {
        let src = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    copy_shifted(src_row, dst, dx);
                }
            }
        }
    }
}

/// `dst[x] = src[x + dx]`, zero where out of range.
#[inline]
fn copy_shifted<T: Scalar>(src: &[T], dst: &mut [T], dx: isize) {
    let w = dst.len();
    let shift = dx.unsigned_abs().min(w);
    if dx >= 0 {
        dst[..w - shift].copy_from_slice(&src[shift..]);
        dst[w - shift..].fill(T::zero());
    } else {
        dst[..shift].fill(T::zero());
        dst[shift..].copy_from_slice(&src[..w - shift]);
    }
}

/// Folds a column matrix back onto the input grid, accumulating into `out`.
fn col2im_add<T: Scalar>(col: &[T], h: usize, w: usize, spec: &ConvSpec, out: &mut [T]) {
    let k = spec.kernel;
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..spec.cin {
        let dst = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    for x in x_lo..x_hi {
                        drow[(x as isize + dx) as usize] += src[x];
                    }
                }
            }
        }
    }
}

/// Forward convolution of one `cin x h x w` sample; returns `cout x h x w`.
pub fn conv2d<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let hw = h * w;
    assert_eq!(input.len(), spec.cin * hw, "conv input does not match spec");
    assert_eq!(weight.len(), spec.weight_len());
    assert_eq!(bias.len(), spec.cout);
    let mut out = Vec::with_capacity(spec.cout * hw);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, hw));
    }
    if spec.kernel == 1 {
        gemm(spec.cout, spec.cin, hw, weight, false, input, false, T::one(), &mut out);
    } else {
        let mut col = vec![T::zero(); spec.patch_len() * hw];
        im2col(input, h, w, spec, &mut col);
        gemm(spec.cout, spec.patch_len(), hw, weight, false, &col, false, T::one(), &mut out);
    }
    out
}

/// Backward pass of [`conv2d`].
///
/// Parameter gradients are accumulated into `param_grads` when given;
/// the input gradient is accumulated into `grad_input` when given.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    weight: &[T],
    grad_out: &[T],
    param_grads: Option<(&mut [T], &mut [T])>,
    grad_input: Option<&mut [T]>,
) {
    let hw = h * w;
    assert_eq!(grad_out.len(), spec.cout * hw);
    let patch = spec.patch_len();
    let col_owned;
    let col: &[T] = if spec.kernel == 1 {
        input
    } else {
        let mut buf = vec![T::zero(); patch * hw];
        im2col(input, h, w, spec, &mut buf);
        col_owned = buf;
        &col_owned
    };
    if let Some((gw, gb)) = param_grads {
        gemm(spec.cout, hw, patch, grad_out, false, col, true, T::one(), gw);
        for (o, g) in gb.iter_mut().enumerate() {
            *g += grad_out[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
    }
    if let Some(gi) = grad_input {
        assert_eq!(gi.len(), spec.cin * hw);
        if spec.kernel == 1 {
            gemm(patch, spec.cout, hw, weight, true, grad_out, false, T::one(), gi);
        } else {
            let mut dcol = vec![T::zero(); patch * hw];
            gemm(patch, spec.cout, hw, weight, true, grad_out, false, T::zero(), &mut dcol);
            col2im_add(&dcol, h, w, spec, gi);
        }
    }
}
