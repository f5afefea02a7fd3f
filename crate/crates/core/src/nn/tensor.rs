use super::Scalar;

/// A single-sample activation grid stored channel-major (`C x H x W`).
///
/// Concatenating along channels is appending data, which the dense blocks
/// rely on: the input of every dense layer is a prefix of the block's
/// running concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            channels * height * width,
            "tensor data does not match {channels}x{height}x{width}"
        );
        Tensor {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Tensor<T>) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert!(self.same_dims(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Swaps the two spatial axes of every channel.
    pub fn transpose_spatial(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            let src = self.channel(c);
            for x in 0..w {
                for y in 0..h {
                    data.push(src[y * w + x]);
                }
            }
        }
        Tensor::from_vec(self.channels, w, h, data)
    }

    /// Crops every channel to `rows x cols` starting at (`row0`, `col0`).
    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Tensor<T> {
        assert!(row0 + rows <= self.height && col0 + cols <= self.width);
        let mut data = Vec::with_capacity(self.channels * rows * cols);
        for c in 0..self.channels {
            let src = self.channel(c);
            for r in row0..row0 + rows {
                data.extend_from_slice(&src[r * self.width + col0..r * self.width + col0 + cols]);
            }
        }
        Tensor::from_vec(self.channels, rows, cols, data)
    }
}
