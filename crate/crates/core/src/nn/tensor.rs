use serde::{Deserialize, Serialize};

use super::NnError;

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{shape:?} ({n} values)"),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Slice of the `i`-th entry along the leading dimension.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// Trainable parameters: kernel and bias tensors of each weight layer, in
/// network order (convolutional branch, dense branch, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub tensors: Vec<Tensor>,
}

impl WeightSet {
    pub fn zeros_like(other: &WeightSet) -> Self {
        WeightSet {
            tensors: other.tensors.iter().map(|t| Tensor::zeros(t.shape.clone())).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape.clone()).collect()
    }

    /// Kernel and bias of weight layer `p`.
    pub fn layer(&self, p: usize) -> (&[f64], &[f64]) {
        (&self.tensors[2 * p].data, &self.tensors[2 * p + 1].data)
    }

    pub fn layer_mut(&mut self, p: usize) -> (&mut [f64], &mut [f64]) {
        let (a, b) = self.tensors[2 * p..2 * p + 2].split_at_mut(1);
        (&mut a[0].data, &mut b[0].data)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.values_mut().for_each(|v| *v *= s);
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &WeightSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.values_mut().for_each(|x| *x = v);
    }
}
