use crate::error::{Error, Result};
use crate::volume::Volume;

use super::Scalar;

/// Dense row-major tensor; rank-5 activations are `(batch, channels, x, y, z)`
/// with `z` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 5 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=5, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Stacks single-channel volumes into a `(batch, 1, x, y, z)` tensor.
    pub fn from_volumes(volumes: &[&Volume]) -> Result<Self> {
        let first = volumes
            .first()
            .ok_or_else(|| Error::Shape("cannot batch zero volumes".into()))?;
        let [nx, ny, nz] = first.dims();
        let mut data = Vec::with_capacity(volumes.len() * nx * ny * nz);
        for v in volumes {
            if v.dims() != first.dims() {
                return Err(Error::Shape(format!(
                    "batch mixes volume dims {:?} and {:?}",
                    first.dims(),
                    v.dims()
                )));
            }
            for i in 0..nx {
                for j in 0..ny {
                    for k in 0..nz {
                        data.push(T::from_f32(v.at(i, j, k)).expect("f32 fits"));
                    }
                }
            }
        }
        Tensor::new(vec![volumes.len(), 1, nx, ny, nz], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Spatial extents of a rank-5 tensor.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Shape(format!(
                "{what} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!(
                "{what}: expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}
