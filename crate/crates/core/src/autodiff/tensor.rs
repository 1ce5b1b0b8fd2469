use serde::{Deserialize, Serialize};

use super::AutodiffError;

/// Dense row-major tensor of `f64` values.
///
/// `grad` is present exactly when `requires_grad` is set and always has the
/// same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) || expected != data.len() {
            return Err(AutodiffError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("positive shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive shape")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Self::new(vec![rows, cols], data)
    }

    /// Marks the tensor as trainable and allocates a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![0.0; self.data.len()]);
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[f64]) {
        if let Some(g) = self.grad.as_mut() {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub(crate) fn reshaped(&self, shape: Vec<usize>) -> Result<Self, AutodiffError> {
        Self::new(shape, self.data.clone())
    }

    pub fn to_record(&self) -> TensorRecord {
        TensorRecord {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

/// Serializable shape + data pair used by checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TryFrom<TensorRecord> for Tensor {
    type Error = AutodiffError;

    fn try_from(r: TensorRecord) -> Result<Self, Self::Error> {
        Tensor::new(r.shape, r.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(AutodiffError::BadShape { .. })
        ));
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn grad_buffer_tracks_flag() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap().len(), 3);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }
}
