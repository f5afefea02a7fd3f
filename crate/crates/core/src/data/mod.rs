//! Training and self-supervision pairs, patch sampling, synthetic phantoms
//! and the ground-truth access audit.

mod audit;
mod phantom;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::Tensor;
use crate::volume::{extract_slices, subsample_axis, triplet_of, Axis, DegradeSpec, Plane, Volume};

pub use audit::{AccessAudit, GroundTruth, TestCase};
pub use phantom::{generate_phantom, IntensityStats, PhantomSpec, TextureFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ThroughPlane,
    InPlane,
    Refine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub volume_id: String,
    /// Axis the source slice was taken along.
    pub axis: Axis,
    pub slice_index: usize,
    /// Axis that was degraded before the slice reached the network.
    pub degraded_axis: Option<Axis>,
    /// Whether input and target were transposed so the degraded axis is
    /// the column axis.
    pub transposed: bool,
}

/// One network input with its target.
///
/// `lr_input` is a `3 x H x W` triplet; `hr_target` is `1 x H x (scale*W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub lr_input: Tensor<f32>,
    pub hr_target: Tensor<f32>,
    pub task: Task,
    pub scale: usize,
    pub meta: SampleMeta,
}

impl PairedSample {
    pub fn center(&self) -> Tensor<f32> {
        Tensor::from_vec(1, self.lr_input.height, self.lr_input.width, self.lr_input.channel(1).to_vec())
    }
}

fn plane_tensor(p: &Plane) -> Tensor<f32> {
    Tensor::from_vec(1, p.rows(), p.cols(), p.data().to_vec())
}

/// Supervised through-plane pairs: every sagittal, then every coronal
/// slice of the axially decimated volume against the matching dense slice.
/// When `Z` is not a multiple of `r_z` the target is edge-padded to
/// `r_z * ceil(Z / r_z)` columns.
pub fn make_through_plane_pairs(v: &Volume, spec: &DegradeSpec, volume_id: &str) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    let r = spec.r_z;
    let lr = subsample_axis(v, Axis::Z, r)?;
    ensure!(lr.extent(Axis::Z) >= 1, "degraded axial extent must be >= 1");
    let hr_cols = r * lr.extent(Axis::Z);
    let mut pairs = Vec::with_capacity(v.extent(Axis::X) + v.extent(Axis::Y));
    for axis in [Axis::X, Axis::Y] {
        let lr_stack = extract_slices(&lr, axis);
        let hr_stack = extract_slices(v, axis);
        let n = lr_stack.len();
        for i in 0..n {
            let s = &lr_stack.slices;
            pairs.push(PairedSample {
                lr_input: triplet_of(&s[i.saturating_sub(1)], &s[i], &s[(i + 1).min(n - 1)]),
                hr_target: plane_tensor(&hr_stack.slices[i].pad_cols_edge(hr_cols)),
                task: Task::ThroughPlane,
                scale: r,
                meta: SampleMeta {
                    volume_id: volume_id.to_string(),
                    axis,
                    slice_index: i,
                    degraded_axis: Some(Axis::Z),
                    transposed: false,
                },
            });
        }
    }
    Ok(pairs)
}

/// Self-supervised in-plane pairs built from the sparse volume alone. Each
/// axial slice yields a y-degraded sample and an x-degraded sample; the
/// latter is transposed so the degraded axis is the column axis the
/// upsampling head stretches.
pub fn make_in_plane_pairs(v_lr: &Volume, spec: &DegradeSpec, volume_id: &str) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    let r = spec.r_inplane;
    let stack = extract_slices(v_lr, Axis::Z);
    let n = stack.len();
    let s = &stack.slices;
    let mut pairs = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (prev, cur, next) = (&s[i.saturating_sub(1)], &s[i], &s[(i + 1).min(n - 1)]);
        let meta = |degraded: Axis, transposed: bool| SampleMeta {
            volume_id: volume_id.to_string(),
            axis: Axis::Z,
            slice_index: i,
            degraded_axis: Some(degraded),
            transposed,
        };

        let y_in = triplet_of(&prev.decimate_cols(r)?, &cur.decimate_cols(r)?, &next.decimate_cols(r)?);
        let y_target = cur.pad_cols_edge(r * y_in.width);
        pairs.push(PairedSample {
            lr_input: y_in,
            hr_target: plane_tensor(&y_target),
            task: Task::InPlane,
            scale: r,
            meta: meta(Axis::Y, false),
        });

        let x_in = triplet_of(
            &prev.decimate_rows(r)?.transpose(),
            &cur.decimate_rows(r)?.transpose(),
            &next.decimate_rows(r)?.transpose(),
        );
        let x_target = cur.transpose().pad_cols_edge(r * x_in.width);
        pairs.push(PairedSample {
            lr_input: x_in,
            hr_target: plane_tensor(&x_target),
            task: Task::InPlane,
            scale: r,
            meta: meta(Axis::X, true),
        });
    }
    Ok(pairs)
}

/// Refinement pairs: triplets of the combined volume's axial slices against
/// the same-index ground-truth axial slice.
pub fn make_refine_pairs(v_comb: &Volume, v_gt: &Volume, volume_id: &str) -> Result<Vec<PairedSample>> {
    ensure!(
        v_comb.shape() == v_gt.shape(),
        "combined volume {:?} and ground truth {:?} differ in shape",
        v_comb.shape(),
        v_gt.shape()
    );
    let comb = extract_slices(v_comb, Axis::Z);
    let gt = extract_slices(v_gt, Axis::Z);
    let n = comb.len();
    let s = &comb.slices;
    Ok((0..n)
        .map(|i| PairedSample {
            lr_input: triplet_of(&s[i.saturating_sub(1)], &s[i], &s[(i + 1).min(n - 1)]),
            hr_target: plane_tensor(&gt.slices[i]),
            task: Task::Refine,
            scale: 1,
            meta: SampleMeta {
                volume_id: volume_id.to_string(),
                axis: Axis::Z,
                slice_index: i,
                degraded_axis: None,
                transposed: false,
            },
        })
        .collect())
}

/// Uniform random crops of `patch = (rows, cols)` in input coordinates; the
/// target crop covers the same rows and columns `[c*r, (c+cols)*r)`.
pub fn sample_patches(
    pairs: &[PairedSample],
    patch: (usize, usize),
    count: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    ensure!(!pairs.is_empty(), "cannot sample patches from an empty pair list");
    let (ph, pw) = patch;
    ensure!(ph >= 1 && pw >= 1, "patch extents must be >= 1");
    for p in pairs {
        ensure!(
            ph <= p.lr_input.height && pw <= p.lr_input.width,
            "patch {ph}x{pw} larger than input slice {}x{}",
            p.lr_input.height,
            p.lr_input.width
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let row0 = rng.random_range(0..=p.lr_input.height - ph);
            let col0 = rng.random_range(0..=p.lr_input.width - pw);
            crop_pair(p, row0, col0, ph, pw)
        })
        .collect())
}

pub(crate) fn crop_pair(p: &PairedSample, row0: usize, col0: usize, rows: usize, cols: usize) -> PairedSample {
    let r = p.scale;
    PairedSample {
        lr_input: p.lr_input.crop(row0, col0, rows, cols),
        hr_target: p.hr_target.crop(row0, col0 * r, rows, cols * r),
        task: p.task,
        scale: r,
        meta: p.meta.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::reformat_volume;

    fn ramp(shape: [usize; 3]) -> Volume {
        Volume::from_fn(shape, |x, y, z| ((x * 7 + y * 3 + z) % 17) as f32 / 16.0).unwrap()
    }

    #[test]
    fn through_plane_counts_and_shapes() {
        let v = ramp([8, 8, 8]);
        let pairs = make_through_plane_pairs(&v, &DegradeSpec::new(4).unwrap(), "v").unwrap();
        assert_eq!(pairs.len(), 16);
        for p in &pairs {
            assert_eq!((p.lr_input.channels, p.lr_input.height, p.lr_input.width), (3, 8, 2));
            assert_eq!((p.hr_target.height, p.hr_target.width), (8, 8));
            assert_eq!(p.hr_target.width, p.scale * p.lr_input.width);
        }
        let non_square = ramp([5, 3, 8]);
        let pairs = make_through_plane_pairs(&non_square, &DegradeSpec::new(2).unwrap(), "v").unwrap();
        assert_eq!(pairs.len(), 5 + 3);
    }

    #[test]
    fn through_plane_targets_match_index_oracle() {
        let v = ramp([4, 5, 8]);
        let pairs = make_through_plane_pairs(&v, &DegradeSpec::new(2).unwrap(), "v").unwrap();
        for p in &pairs {
            let i = p.meta.slice_index;
            for row in 0..p.hr_target.height {
                for z in 0..8 {
                    let expected = match p.meta.axis {
                        Axis::X => v.get(i, row, z),
                        _ => v.get(row, i, z),
                    };
                    assert_eq!(p.hr_target.data[row * 8 + z], expected);
                }
                // center channel is the decimated slice
                for zl in 0..4 {
                    let expected = match p.meta.axis {
                        Axis::X => v.get(i, row, 2 * zl),
                        _ => v.get(row, i, 2 * zl),
                    };
                    assert_eq!(p.lr_input.channel(1)[row * 4 + zl], expected);
                }
            }
        }
        let constant = Volume::filled([3, 3, 4], 0.4).unwrap();
        let pairs = make_through_plane_pairs(&constant, &DegradeSpec::new(2).unwrap(), "c").unwrap();
        assert!(pairs.iter().all(|p| p.hr_target.data.iter().all(|&t| t == 0.4)));
    }

    #[test]
    fn in_plane_shapes_and_transposition() {
        let lr = ramp([8, 8, 3]);
        let pairs = make_in_plane_pairs(&lr, &DegradeSpec::new(2).unwrap(), "v").unwrap();
        assert_eq!(pairs.len(), 6);
        let (y, x) = (&pairs[0], &pairs[1]);
        assert_eq!((y.lr_input.height, y.lr_input.width), (8, 4));
        assert_eq!((y.hr_target.height, y.hr_target.width), (8, 8));
        assert_eq!((x.lr_input.height, x.lr_input.width), (8, 4));
        assert!(x.meta.transposed && !y.meta.transposed);
        let axial0 = &extract_slices(&lr, Axis::Z).slices[0];
        for a in 0..8 {
            for b in 0..8 {
                assert_eq!(y.hr_target.data[a * 8 + b], axial0.get(a, b));
                // transposed target: row = y, col = x
                assert_eq!(x.hr_target.data[b * 8 + a], axial0.get(a, b));
            }
        }
        // x-degraded input keeps rows 0, 2, 4, 6 of the slice, transposed
        for yy in 0..8 {
            for k in 0..4 {
                assert_eq!(x.lr_input.channel(1)[yy * 4 + k], axial0.get(2 * k, yy));
            }
        }
    }

    #[test]
    fn in_plane_constant_slices() {
        let lr = Volume::filled([6, 6, 2], 0.7).unwrap();
        let pairs = make_in_plane_pairs(&lr, &DegradeSpec::new(3).unwrap(), "c").unwrap();
        assert_eq!(pairs.len(), 4);
        assert!(pairs.iter().all(|p| p.lr_input.data.iter().all(|&v| v == 0.7)));
    }

    #[test]
    fn refine_pairs() {
        let gt = ramp([4, 4, 6]);
        let pairs = make_refine_pairs(&gt, &gt, "v").unwrap();
        assert_eq!(pairs.len(), 6);
        for p in &pairs {
            assert_eq!(p.center(), p.hr_target);
        }
        let comb = ramp([4, 4, 6]).normalize_window(0.0, 2.0).unwrap();
        let pairs = make_refine_pairs(&comb, &gt, "v").unwrap();
        for x in 0..4 {
            for y in 0..4 {
                assert_eq!(pairs[3].hr_target.data[x * 4 + y], gt.get(x, y, 3));
                assert_eq!(pairs[3].lr_input.channel(1)[x * 4 + y], comb.get(x, y, 3));
                assert_eq!(pairs[3].lr_input.channel(2)[x * 4 + y], comb.get(x, y, 4));
            }
        }
        assert!(make_refine_pairs(&comb, &ramp([4, 4, 5]), "v").is_err());
    }

    #[test]
    fn patches_are_seeded_and_aligned() {
        let v = ramp([6, 6, 16]);
        let pairs = make_through_plane_pairs(&v, &DegradeSpec::new(4).unwrap(), "v").unwrap();
        assert!(sample_patches(&pairs, (3, 2), 0, 1).unwrap().is_empty());
        let a = sample_patches(&pairs, (3, 2), 20, 9).unwrap();
        let b = sample_patches(&pairs, (3, 2), 20, 9).unwrap();
        assert_eq!(a, b);
        assert!(sample_patches(&pairs, (7, 2), 1, 1).is_err());
        assert!(sample_patches(&pairs, (3, 5), 1, 1).is_err());
        // alignment oracle: each lr column c of the crop is HR column r*c of the crop
        for p in &a {
            let full = extract_slices(&v, p.meta.axis).slices[p.meta.slice_index].clone();
            let cols = p.hr_target.width;
            for row in 0..p.lr_input.height {
                for c in 0..p.lr_input.width {
                    let lr_val = p.lr_input.channel(1)[row * p.lr_input.width + c];
                    assert_eq!(lr_val, p.hr_target.data[row * cols + c * 4]);
                }
            }
            // the crop is an actual window of the full slice
            let first = p.hr_target.data[0];
            assert!(full.data().contains(&first));
        }
    }

    #[test]
    fn stacks_reassemble_after_pairing() {
        let v = ramp([3, 4, 4]);
        let stack = extract_slices(&v, Axis::Z);
        assert_eq!(reformat_volume(&stack).unwrap(), v);
    }
}
