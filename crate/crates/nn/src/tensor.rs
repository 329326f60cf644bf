use crate::real::Real;

/// A channel-last volume: `dims = [D, H, W]`, `channels` values per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            data: vec![S::zero(); dims[0] * dims[1] * dims[2] * channels],
        }
    }

    pub fn from_vec(dims: [usize; 3], channels: usize, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            dims[0] * dims[1] * dims[2] * channels,
            "tensor data length does not match shape"
        );
        Self {
            dims,
            channels,
            data,
        }
    }

    /// Single-channel tensor from `f32` voxels.
    pub fn from_f32(dims: [usize; 3], values: &[f32]) -> Self {
        let data = values
            .iter()
            .map(|&v| S::from_f64_lossy(v as f64))
            .collect();
        Self::from_vec(dims, 1, data)
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "shape mismatch in add_assign");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f64() as f32).collect()
    }
}
