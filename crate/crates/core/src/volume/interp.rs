use crate::error::{ensure, Result};

use super::{Axis, Volume};

/// Keys cubic-convolution parameter.
pub const KEYS_A: f64 = -0.5;

pub fn keys_kernel(t: f64) -> f64 {
    let a = KEYS_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Upsamples a 1-D signal by `r`; output sample `j` sits at source
/// coordinate `j / r`, so every `r`-th output lands on an input sample.
/// Out-of-range taps replicate the nearest edge sample.
pub fn bicubic_upsample_signal(signal: &[f32], r: usize) -> Vec<f32> {
    let n = signal.len() as isize;
    let mut out = Vec::with_capacity(signal.len() * r);
    for j in 0..signal.len() * r {
        let t = j as f64 / r as f64;
        let base = t.floor() as isize;
        let frac = t - base as f64;
        let mut acc = 0.0f64;
        for k in -1..=2isize {
            let idx = (base + k).clamp(0, n - 1) as usize;
            acc += signal[idx] as f64 * keys_kernel(frac - k as f64);
        }
        out.push(acc as f32);
    }
    out
}

/// Separable cubic-convolution upsampling along one axis; the result is
/// clamped to `[0, 1]`.
pub fn bicubic_upsample_axis(v: &Volume, axis: Axis, r: usize) -> Result<Volume> {
    ensure!(r >= 2, "upsampling factor must be >= 2, got {r}");
    let a = axis.index();
    let [nx, ny, nz] = v.shape();
    let mut shape = v.shape();
    shape[a] *= r;
    let mut spacing = v.spacing();
    spacing[a] /= r as f32;
    let mut out = Volume::zeros(shape)?.with_spacing(spacing);

    let n = v.shape()[a];
    let outer = match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    };
    let mut line = vec![0.0f32; n];
    for p in 0..outer.0 {
        for q in 0..outer.1 {
            for (i, slot) in line.iter_mut().enumerate() {
                *slot = match axis {
                    Axis::X => v.get(i, p, q),
                    Axis::Y => v.get(p, i, q),
                    Axis::Z => v.get(p, q, i),
                };
            }
            for (j, value) in bicubic_upsample_signal(&line, r).into_iter().enumerate() {
                let value = value.clamp(0.0, 1.0);
                match axis {
                    Axis::X => out.set(j, p, q, value),
                    Axis::Y => out.set(p, j, q, value),
                    Axis::Z => out.set(p, q, j, value),
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution over an edge-extended copy of the signal; every
    /// tap in a wide window is evaluated, the kernel's compact support does
    /// the selection.
    fn direct_convolution_oracle(signal: &[f32], r: usize) -> Vec<f64> {
        let pad = 4usize;
        let n = signal.len();
        let extended: Vec<f64> = (0..n + 2 * pad)
            .map(|i| signal[(i as isize - pad as isize).clamp(0, n as isize - 1) as usize] as f64)
            .collect();
        (0..n * r)
            .map(|j| {
                let t = j as f64 / r as f64 + pad as f64;
                extended
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| s * keys_kernel(t - i as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn kernel_partition_of_unity() {
        for step in 0..100 {
            let frac = step as f64 / 100.0;
            let sum: f64 = (-1..=2).map(|k| keys_kernel(frac - k as f64)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert_eq!(keys_kernel(0.0), 1.0);
        assert_eq!(keys_kernel(1.0), 0.0);
        assert_eq!(keys_kernel(2.0), 0.0);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::filled([3, 2, 5], 0.37).unwrap();
        let up = bicubic_upsample_axis(&v, Axis::Z, 3).unwrap();
        assert_eq!(up.shape(), [3, 2, 15]);
        assert!(up.data().iter().all(|&p| (p - 0.37).abs() <= 1e-7));
    }

    #[test]
    fn ramp_preserved_at_sample_sites_and_interior() {
        let v = Volume::from_fn([1, 1, 8], |_, _, z| z as f32 / 10.0).unwrap();
        let up = bicubic_upsample_axis(&v, Axis::Z, 2).unwrap();
        for z in 0..8 {
            assert!((up.get(0, 0, 2 * z) - z as f32 / 10.0).abs() < 1e-7);
        }
        // cubic convolution reproduces linear functions away from the edges
        for j in 2..12 {
            assert!((up.get(0, 0, j) - j as f32 / 20.0).abs() < 1e-6, "j={j}");
        }
    }

    #[test]
    fn matches_direct_convolution_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let signal: Vec<f32> = (0..13).map(|_| rng.random()).collect();
        let fast = bicubic_upsample_signal(&signal, 4);
        let oracle = direct_convolution_oracle(&signal, 4);
        for (a, b) in fast.iter().zip(&oracle) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn every_axis_upsamples_its_extent() {
        let v = Volume::filled([2, 3, 4], 0.5).unwrap();
        assert_eq!(bicubic_upsample_axis(&v, Axis::X, 2).unwrap().shape(), [4, 3, 4]);
        assert_eq!(bicubic_upsample_axis(&v, Axis::Y, 2).unwrap().shape(), [2, 6, 4]);
        assert!(bicubic_upsample_axis(&v, Axis::Y, 1).is_err());
    }
}
