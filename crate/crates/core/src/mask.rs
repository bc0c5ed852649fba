use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary mask over a row-major grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("mask", format!("shape {shape:?} vs {} entries", data.len())));
        }
        Ok(Mask { shape: shape.to_vec(), data })
    }

    pub fn empty(shape: &[usize]) -> Self {
        Mask { shape: shape.to_vec(), data: vec![false; shape.iter().product()] }
    }

    pub fn full(shape: &[usize]) -> Self {
        Mask { shape: shape.to_vec(), data: vec![true; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// True where both masks are set.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(Error::shape("mask_and", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Mask { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect() })
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.shape == other.shape && self.data.iter().zip(&other.data).all(|(a, b)| !a || *b)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("mask shape is valid")
    }

    /// Nonzero entries become set.
    pub fn from_tensor(t: &Tensor) -> Mask {
        Mask { shape: t.shape().to_vec(), data: t.data().iter().map(|&v| v != 0.0).collect() }
    }
}
