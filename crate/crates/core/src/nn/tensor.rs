use crate::error::{validation, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor of up to four dimensions.
///
/// Convolutional code uses `N x C x H x W`; dense code uses `N x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(validation(format!("tensor rank must be 1..=4, got {}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(validation(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, F::zero())
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n]).expect("shape of rank 1..=4")
    }

    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> F) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(f).collect()).expect("shape of rank 1..=4")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    /// `(n, c, h, w)`; panics if the tensor is not rank 4.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    /// `(n, f)`; panics if the tensor is not rank 2.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape[..] {
            [n, f] => (n, f),
            _ => panic!("expected a rank-2 tensor, got shape {:?}", self.shape),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> F {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64(v.to_f64().expect("finite scalar")).expect("representable"))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape, "shape mismatch in accumulation");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}
