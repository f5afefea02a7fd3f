use super::{Scalar, Tensor};

/// 1-D sub-pixel shuffle along the width axis: `(r*c, H, W) -> (c, H, r*W)`
/// with `out[ch, y, w*r + j] = in[j*c + ch, y, w]`, i.e. channel block `j`
/// fills output phase `j`.
pub fn pixel_shuffle_1d<T: Scalar>(input: &Tensor<T>, r: usize) -> Tensor<T> {
    assert!(r >= 1 && input.channels.is_multiple_of(r), "channels must be a multiple of r");
    let c = input.channels / r;
    let (h, w) = (input.height, input.width);
    let mut out = Tensor::zeros(c, h, w * r);
    for j in 0..r {
        for ch in 0..c {
            let src = input.channel(j * c + ch);
            let dst = out.channel_mut(ch);
            for y in 0..h {
                let src_row = &src[y * w..(y + 1) * w];
                let dst_row = &mut dst[y * w * r..(y + 1) * w * r];
                for (x, &v) in src_row.iter().enumerate() {
                    dst_row[x * r + j] = v;
                }
            }
        }
    }
    out
}

/// Inverse of [`pixel_shuffle_1d`]; also its adjoint, which is what the
/// backward pass needs.
pub fn pixel_unshuffle_1d<T: Scalar>(input: &Tensor<T>, r: usize) -> Tensor<T> {
    assert!(r >= 1 && input.width.is_multiple_of(r), "width must be a multiple of r");
    let c = input.channels;
    let (h, w) = (input.height, input.width / r);
    let mut out = Tensor::zeros(c * r, h, w);
    for j in 0..r {
        for ch in 0..c {
            let src = input.channel(ch);
            let dst = out.channel_mut(j * c + ch);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[y * w * r + x * r + j];
                }
            }
        }
    }
    out
}
