//! Synthetic CT-like phantoms: a smooth background, soft-edged ellipsoidal
//! blobs, thin high-contrast plates and a segmented spine-like column along
//! the axial axis. `shift_level` moves the blob scale, count, contrast and
//! background frequency away from the training family.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureFamily {
    pub blob_count: usize,
    /// Semi-axis range in voxels before shifting.
    pub blob_radius: [f32; 2],
    /// Background waves per volume extent.
    pub background_frequency: f32,
    pub sheet_count: usize,
    pub spine: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f32,
    pub contrast: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub texture_family: TextureFamily,
    pub intensity_stats: IntensityStats,
    pub structure_seed: u64,
    pub shift_level: f32,
}

impl TextureFamily {
    pub fn training() -> Self {
        TextureFamily {
            blob_count: 14,
            blob_radius: [4.0, 10.0],
            background_frequency: 1.5,
            sheet_count: 3,
            spine: true,
        }
    }
}

impl IntensityStats {
    pub fn training() -> Self {
        IntensityStats {
            mean: 0.35,
            contrast: 0.22,
        }
    }
}

impl PhantomSpec {
    pub fn new(shape: [usize; 3], structure_seed: u64, shift_level: f32) -> Self {
        PhantomSpec {
            shape,
            texture_family: TextureFamily::training(),
            intensity_stats: IntensityStats::training(),
            structure_seed,
            shift_level,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.shape.iter().all(|&n| n >= 1), "phantom shape must be positive");
        ensure!(
            (0.0..=1.0).contains(&self.shift_level),
            "shift_level must lie in [0, 1], got {}",
            self.shift_level
        );
        let [lo, hi] = self.texture_family.blob_radius;
        ensure!(lo > 0.0 && hi >= lo, "blob radius range must satisfy 0 < lo <= hi");
        Ok(())
    }

    /// Family parameters after applying `shift_level`.
    pub fn effective(&self) -> EffectiveFamily {
        let s = self.shift_level;
        let t = &self.texture_family;
        EffectiveFamily {
            blob_count: (t.blob_count as f32 * (1.0 + 2.0 * s)).round() as usize,
            blob_radius: [t.blob_radius[0] * (1.0 - 0.55 * s), t.blob_radius[1] * (1.0 - 0.55 * s)],
            background_frequency: t.background_frequency * (1.0 + 2.0 * s),
            contrast: self.intensity_stats.contrast * (1.0 + 0.8 * s),
            mean: self.intensity_stats.mean + 0.1 * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveFamily {
    pub blob_count: usize,
    pub blob_radius: [f32; 2],
    pub background_frequency: f32,
    pub contrast: f32,
    pub mean: f32,
}

#[inline]
fn smoothstep_edge(signed_distance: f32, width: f32) -> f32 {
    // logistic edge, 1 inside, 0 outside
    1.0 / (1.0 + (signed_distance / width).exp())
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f32; 3]; 3] {
    // uniform unit quaternion
    let (u1, u2, u3): (f32, f32, f32) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * (TAU * u2).sin(), a * (TAU * u2).cos(), b * (TAU * u3).sin(), b * (TAU * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let z: f32 = rng.random_range(-1.0..1.0);
    let phi: f32 = rng.random_range(0.0..TAU);
    let s = (1.0 - z * z).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// Adds `f(x, y, z)` over the voxel box `[lo, hi)` clipped to the volume.
fn add_in_box(v: &mut Volume, lo: [f32; 3], hi: [f32; 3], mut f: impl FnMut(f32, f32, f32) -> f32) {
    let shape = v.shape();
    let clip = |a: usize, val: f32| (val.max(0.0) as usize).min(shape[a]);
    let (x0, x1) = (clip(0, lo[0].floor()), clip(0, hi[0].ceil() + 1.0));
    let (y0, y1) = (clip(1, lo[1].floor()), clip(1, hi[1].ceil() + 1.0));
    let (z0, z1) = (clip(2, lo[2].floor()), clip(2, hi[2].ceil() + 1.0));
    for x in x0..x1 {
        for y in y0..y1 {
            for z in z0..z1 {
                let i = v.offset(x, y, z);
                v.data_mut()[i] += f(x as f32, y as f32, z as f32);
            }
        }
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let fam = spec.effective();
    let shape = spec.shape;
    let dims = shape.map(|n| n as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.structure_seed);

    // smooth background: three plane waves
    let waves: Vec<([f32; 3], f32)> = (0..3)
        .map(|_| {
            let k = [
                rng.random_range(-1.0..1.0) * fam.background_frequency * TAU / dims[0],
                rng.random_range(-1.0..1.0) * fam.background_frequency * TAU / dims[1],
                rng.random_range(-1.0..1.0) * fam.background_frequency * TAU / dims[2],
            ];
            (k, rng.random_range(0.0..TAU))
        })
        .collect();
    let amp = 0.05 + 0.1 * spec.intensity_stats.contrast;
    let mean = fam.mean;
    let mut v = Volume::from_fn(shape, |x, y, z| {
        let (x, y, z) = (x as f32, y as f32, z as f32);
        mean + amp / 3.0 * waves.iter().map(|(k, ph)| (k[0] * x + k[1] * y + k[2] * z + ph).cos()).sum::<f32>()
    })?;

    // ellipsoidal blobs with soft edges
    let [rlo, rhi] = fam.blob_radius;
    for _ in 0..fam.blob_count {
        let c = [
            rng.random_range(0.0..dims[0]),
            rng.random_range(0.0..dims[1]),
            rng.random_range(0.0..dims[2]),
        ];
        let radii = [
            rng.random_range(rlo..=rhi),
            rng.random_range(rlo..=rhi),
            rng.random_range(rlo..=rhi),
        ];
        let rot = random_rotation(&mut rng);
        let sign = if rng.random_bool(0.7) { 1.0 } else { -1.0 };
        let value = sign * fam.contrast * rng.random_range(0.6..1.0);
        let reach = radii.iter().cloned().fold(0.0, f32::max) + 2.0;
        let mean_r = (radii[0] + radii[1] + radii[2]) / 3.0;
        add_in_box(
            &mut v,
            [c[0] - reach, c[1] - reach, c[2] - reach],
            [c[0] + reach, c[1] + reach, c[2] + reach],
            |x, y, z| {
                let d = [x - c[0], y - c[1], z - c[2]];
                let mut q = 0.0;
                for (row, r) in rot.iter().zip(radii) {
                    let u = (row[0] * d[0] + row[1] * d[1] + row[2] * d[2]) / r;
                    q += u * u;
                }
                value * smoothstep_edge((q.sqrt() - 1.0) * mean_r, 0.35)
            },
        );
    }

    // thin plates: disks of ~1 voxel thickness
    for _ in 0..spec.texture_family.sheet_count {
        let c = [
            rng.random_range(0.2..0.8) * dims[0],
            rng.random_range(0.2..0.8) * dims[1],
            rng.random_range(0.2..0.8) * dims[2],
        ];
        let n = unit_vector(&mut rng);
        let radius = rng.random_range(0.15..0.3) * dims.iter().cloned().fold(f32::INFINITY, f32::min);
        let value = 1.6 * fam.contrast;
        add_in_box(
            &mut v,
            [c[0] - radius, c[1] - radius, c[2] - radius],
            [c[0] + radius, c[1] + radius, c[2] + radius],
            |x, y, z| {
                let d = [x - c[0], y - c[1], z - c[2]];
                let along = d[0] * n[0] + d[1] * n[1] + d[2] * n[2];
                let radial2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - along * along;
                let profile = (-(along / 0.8).powi(2)).exp();
                value * profile * smoothstep_edge(radial2.max(0.0).sqrt() - radius, 0.5)
            },
        );
    }

    // segmented column along z: bright vertebra-like bodies separated by
    // darker gaps
    if spec.texture_family.spine {
        let cx = dims[0] * 0.5;
        let cy = dims[1] * 0.78;
        let radius = (dims[0].min(dims[1]) * 0.07).max(1.5);
        let period = (dims[2] / 8.0).max(4.0);
        let phase: f32 = rng.random_range(0.0..period);
        let value = 1.4 * fam.contrast;
        add_in_box(
            &mut v,
            [cx - radius - 2.0, cy - radius - 2.0, 0.0],
            [cx + radius + 2.0, cy + radius + 2.0, dims[2]],
            |x, y, z| {
                let rr = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                let t = ((z + phase) % period) / period;
                let body = smoothstep_edge((t - 0.5).abs() * period - 0.3 * period, 0.4);
                value * body * smoothstep_edge(rr - radius, 0.4)
            },
        );
    }

    v.clamp_unit();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn histogram(v: &Volume, bins: usize) -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &p in v.data() {
            h[((p * bins as f32) as usize).min(bins - 1)] += 1.0;
        }
        let n = v.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    }

    #[test]
    fn deterministic_and_normalized() {
        let spec = PhantomSpec::new([20, 18, 16], 42, 0.3);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.is_normalized());
        let other = generate_phantom(&PhantomSpec::new([20, 18, 16], 43, 0.3)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_phantom(&PhantomSpec::new([4, 4, 4], 0, 1.5)).is_err());
    }

    #[test]
    fn histogram_distance_grows_with_shift() {
        // reference histogram: training family over 20 seeds
        let shape = [24, 24, 24];
        let bins = 32;
        let mut reference = vec![0.0; bins];
        for seed in 0..20 {
            let h = histogram(&generate_phantom(&PhantomSpec::new(shape, 1000 + seed, 0.0)).unwrap(), bins);
            reference.iter_mut().zip(h).for_each(|(r, x)| *r += x / 20.0);
        }
        let distance = |level: f32| -> f64 {
            (0..20)
                .map(|seed| {
                    let h = histogram(&generate_phantom(&PhantomSpec::new(shape, seed, level)).unwrap(), bins);
                    h.iter().zip(&reference).map(|(a, b)| (a - b).abs()).sum::<f64>() / bins as f64
                })
                .sum::<f64>()
                / 20.0
        };
        let d0 = distance(0.0);
        let d_half = distance(0.5);
        let d1 = distance(1.0);
        assert!(d0 < d_half && d_half < d1, "{d0} {d_half} {d1}");
    }
}
