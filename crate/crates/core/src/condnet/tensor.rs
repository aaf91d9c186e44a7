use crate::error::{Error, Result};

/// Dense row-major tensor. Feature maps use `[channels, z, y, x]`, so each
/// channel is an x-fastest volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor of shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel count of a `[c, z, y, x]` feature map.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extents of a feature map in `(x, y, z)` order.
    pub fn spatial_xyz(&self) -> [usize; 3] {
        [self.shape[3], self.shape[2], self.shape[1]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub(crate) fn feature_shape(channels: usize, xyz: [usize; 3]) -> Vec<usize> {
        vec![channels, xyz[2], xyz[1], xyz[0]]
    }
}
