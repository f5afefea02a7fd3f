//! Volumes, slice stacks and the axis-aware operators every pipeline stage
//! is built from.
//!
//! A [`Volume`] is indexed `(x, y, z)` with `x` the sagittal, `y` the coronal
//! and `z` the axial axis. Storage is x-major: `idx = (x * Y + y) * Z + z`.
//! Slicing along an axis yields planes whose (row, column) axes are the two
//! remaining axes in their natural order: `x -> (y, z)`, `y -> (x, z)`,
//! `z -> (x, y)`. Through-plane slices therefore always carry `z` as their
//! column axis, which is the axis the upsampling heads stretch.

mod interp;
pub mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::Tensor;

pub use interp::{bicubic_upsample_axis, bicubic_upsample_signal, keys_kernel, KEYS_A};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn anatomical_name(self) -> &'static str {
        match self {
            Axis::X => "sagittal",
            Axis::Y => "coronal",
            Axis::Z => "axial",
        }
    }

    /// The two axes spanning a slice taken along `self`, as (rows, cols).
    pub fn plane_axes(self) -> (Axis, Axis) {
        match self {
            Axis::X => (Axis::Y, Axis::Z),
            Axis::Y => (Axis::X, Axis::Z),
            Axis::Z => (Axis::X, Axis::Y),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "sagittal" => Ok(Axis::X),
            "y" | "coronal" => Ok(Axis::Y),
            "z" | "axial" => Ok(Axis::Z),
            other => Err(Error::contract(format!("unknown axis id `{other}`"))),
        }
    }
}

/// A 3-D scalar intensity grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&n| n >= 1),
            "volume shape components must be >= 1, got {shape:?}"
        );
        ensure!(
            data.len() == shape.iter().product::<usize>(),
            "volume data length {} does not match shape {shape:?}",
            data.len()
        );
        Ok(Volume {
            shape,
            spacing,
            data,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Result<Self> {
        Self::new(shape, [1.0; 3], vec![value; shape.iter().product()])
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(shape, [1.0; 3], data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn extent(&self, axis: Axis) -> usize {
        self.shape[axis.index()]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.shape[1] + y) * self.shape[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.offset(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.offset(x, y, z);
        self.data[i] = value;
    }

    /// Value at slice `index` along `axis`, in-plane position (`row`, `col`).
    #[inline]
    fn get_on_axis(&self, axis: Axis, index: usize, row: usize, col: usize) -> f32 {
        match axis {
            Axis::X => self.get(index, row, col),
            Axis::Y => self.get(row, index, col),
            Axis::Z => self.get(row, col, index),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Min-max maps the intensity window `[lo, hi]` onto `[0, 1]`, clamping
    /// values outside it.
    pub fn normalize_window(&self, lo: f32, hi: f32) -> Result<Volume> {
        ensure!(hi > lo, "normalization window must satisfy hi > lo, got [{lo}, {hi}]");
        let scale = 1.0 / (hi - lo);
        let data = self.data.iter().map(|&v| ((v - lo) * scale).clamp(0.0, 1.0)).collect();
        Volume::new(self.shape, self.spacing, data)
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Keeps the first `extent` indices along `axis`.
    pub fn crop_axis(&self, axis: Axis, extent: usize) -> Result<Volume> {
        let a = axis.index();
        ensure!(
            extent >= 1 && extent <= self.shape[a],
            "crop extent {extent} out of range for axis {axis} of extent {}",
            self.shape[a]
        );
        let mut shape = self.shape;
        shape[a] = extent;
        let src = self;
        Volume::from_fn(shape, |x, y, z| src.get(x, y, z)).map(|v| v.with_spacing(self.spacing))
    }
}

/// A 2-D grid stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(rows >= 1 && cols >= 1, "plane extents must be >= 1, got {rows}x{cols}");
        ensure!(
            data.len() == rows * cols,
            "plane data length {} does not match {rows}x{cols}",
            data.len()
        );
        Ok(Plane { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Plane::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn transpose(&self) -> Plane {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Plane {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Keeps columns `0, r, 2r, ...`.
    pub fn decimate_cols(&self, r: usize) -> Result<Plane> {
        ensure!(r >= 2, "decimation factor must be >= 2, got {r}");
        let cols = self.cols.div_ceil(r);
        Plane::from_fn(self.rows, cols, |row, c| self.get(row, c * r))
    }

    /// Keeps rows `0, r, 2r, ...`.
    pub fn decimate_rows(&self, r: usize) -> Result<Plane> {
        ensure!(r >= 2, "decimation factor must be >= 2, got {r}");
        let rows = self.rows.div_ceil(r);
        Plane::from_fn(rows, self.cols, |row, c| self.get(row * r, c))
    }

    /// Pads columns on the right by repeating the last column until `cols`.
    pub fn pad_cols_edge(&self, cols: usize) -> Plane {
        if cols <= self.cols {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(row[self.cols - 1], cols - self.cols));
        }
        Plane {
            rows: self.rows,
            cols,
            data,
        }
    }

    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Plane> {
        ensure!(
            row0 + rows <= self.rows && col0 + cols <= self.cols,
            "crop {rows}x{cols} at ({row0}, {col0}) exceeds plane {}x{}",
            self.rows,
            self.cols
        );
        Plane::from_fn(rows, cols, |r, c| self.get(row0 + r, col0 + c))
    }
}

/// Ordered slices of a volume taken along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub slices: Vec<Plane>,
    pub source_axis: Axis,
    pub index_origin: usize,
    /// Spacing of the source volume, carried so reformatting is lossless.
    pub spacing: [f32; 3],
}

impl SliceStack {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Subsampling rule used to derive sparse volumes from dense ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Keep indices `0, r, 2r, ...` with no pre-filter.
    #[default]
    DecimateFromZero,
}

/// Sparsity factors and subsampling convention pairing LR with HR data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub r_z: usize,
    pub r_inplane: usize,
    #[serde(default)]
    pub convention: Convention,
}

impl DegradeSpec {
    pub fn new(r_z: usize) -> Result<Self> {
        let spec = DegradeSpec {
            r_z,
            r_inplane: r_z,
            convention: Convention::DecimateFromZero,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.r_z >= 2, "r_z must be >= 2, got {}", self.r_z);
        ensure!(self.r_inplane >= 2, "r_inplane must be >= 2, got {}", self.r_inplane);
        Ok(())
    }

    pub fn degraded_extent(&self, extent: usize, r: usize) -> usize {
        match self.convention {
            Convention::DecimateFromZero => extent.div_ceil(r),
        }
    }
}

pub fn extract_slices(v: &Volume, axis: Axis) -> SliceStack {
    let (ra, ca) = axis.plane_axes();
    let (rows, cols) = (v.extent(ra), v.extent(ca));
    let slices = (0..v.extent(axis))
        .map(|i| {
            let mut data = Vec::with_capacity(rows * cols);
            match axis {
                // (y, z) is a contiguous block in x-major storage.
                Axis::X => {
                    let start = v.offset(i, 0, 0);
                    data.extend_from_slice(&v.data[start..start + rows * cols]);
                }
                _ => {
                    for r in 0..rows {
                        for c in 0..cols {
                            data.push(v.get_on_axis(axis, i, r, c));
                        }
                    }
                }
            }
            Plane { rows, cols, data }
        })
        .collect();
    SliceStack {
        slices,
        source_axis: axis,
        index_origin: 0,
        spacing: v.spacing,
    }
}

pub fn reformat_volume(s: &SliceStack) -> Result<Volume> {
    ensure!(!s.slices.is_empty(), "cannot reformat an empty slice stack");
    let (rows, cols) = s.slices[0].dims();
    ensure!(
        s.slices.iter().all(|p| p.dims() == (rows, cols)),
        "ragged slice shapes in stack along {}",
        s.source_axis
    );
    let n = s.slices.len();
    let shape = match s.source_axis {
        Axis::X => [n, rows, cols],
        Axis::Y => [rows, n, cols],
        Axis::Z => [rows, cols, n],
    };
    let mut data = vec![0.0f32; n * rows * cols];
    for (i, plane) in s.slices.iter().enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                let (x, y, z) = match s.source_axis {
                    Axis::X => (i, r, c),
                    Axis::Y => (r, i, c),
                    Axis::Z => (r, c, i),
                };
                data[(x * shape[1] + y) * shape[2] + z] = plane.get(r, c);
            }
        }
    }
    Volume::new(shape, s.spacing, data)
}

/// Pure decimation along `axis`: keeps indices `0, r, 2r, ...`.
pub fn subsample_axis(v: &Volume, axis: Axis, r: usize) -> Result<Volume> {
    ensure!(r >= 2, "subsampling factor must be >= 2, got {r}");
    let a = axis.index();
    let mut shape = v.shape;
    shape[a] = v.shape[a].div_ceil(r);
    let mut spacing = v.spacing;
    spacing[a] *= r as f32;
    let out = Volume::from_fn(shape, |x, y, z| {
        let mut idx = [x, y, z];
        idx[a] *= r;
        v.get(idx[0], idx[1], idx[2])
    })?;
    Ok(out.with_spacing(spacing))
}

pub fn combine_average(a: &Volume, b: &Volume) -> Result<Volume> {
    ensure!(
        a.shape == b.shape,
        "cannot average volumes of shapes {:?} and {:?}",
        a.shape,
        b.shape
    );
    let data = a.data.iter().zip(&b.data).map(|(&p, &q)| 0.5 * (p + q)).collect();
    Volume::new(a.shape, a.spacing, data)
}

/// Formats every slice as a (previous, current, next) 3-channel input,
/// replicating the edge slices at the stack boundaries.
pub fn make_triplets(s: &SliceStack) -> Result<Vec<Tensor<f32>>> {
    ensure!(!s.slices.is_empty(), "cannot build triplets from an empty stack");
    let n = s.slices.len();
    Ok((0..n)
        .map(|i| {
            let prev = &s.slices[i.saturating_sub(1)];
            let cur = &s.slices[i];
            let next = &s.slices[(i + 1).min(n - 1)];
            triplet_of(prev, cur, next)
        })
        .collect())
}

pub(crate) fn triplet_of(prev: &Plane, cur: &Plane, next: &Plane) -> Tensor<f32> {
    let mut data = Vec::with_capacity(3 * cur.data.len());
    data.extend_from_slice(&prev.data);
    data.extend_from_slice(&cur.data);
    data.extend_from_slice(&next.data);
    Tensor::from_vec(3, cur.rows, cur.cols, data)
}
