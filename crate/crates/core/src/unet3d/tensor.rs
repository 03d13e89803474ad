use crate::{Error, Result};

/// Channel-major activation tensor: `data[c][x][y][z]`, `z` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let want = channels * dims.iter().product::<usize>();
        if data.len() != want {
            return Err(Error::ShapeMismatch {
                expected: vec![want],
                found: vec![data.len()],
            });
        }
        Ok(Self { channels, dims, data })
    }

    /// Spatial voxel count per channel.
    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    /// Stack `other`'s channels after this tensor's.
    pub fn concat(mut self, other: &Tensor) -> Tensor {
        debug_assert_eq!(self.dims, other.dims);
        self.data.extend_from_slice(&other.data);
        self.channels += other.channels;
        self
    }

    /// Split channel-wise at `first` channels.
    pub fn split(self, first: usize) -> (Tensor, Tensor) {
        let n = self.spatial();
        let mut data = self.data;
        let rest = data.split_off(first * n);
        (
            Tensor {
                channels: first,
                dims: self.dims,
                data,
            },
            Tensor {
                channels: self.channels - first,
                dims: self.dims,
                data: rest,
            },
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}
