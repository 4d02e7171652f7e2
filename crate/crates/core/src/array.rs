use elicit_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serializable dense array: flat row-major values with shape metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::config(
                "array",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(self.shape.clone(), self.data.clone())?)
    }

    /// Row `i` of the array viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.row_len();
        &self.data[i * width..(i + 1) * width]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Mean over the leading axis.
    pub fn mean_rows(&self) -> Vec<f64> {
        let (rows, width) = (self.rows(), self.row_len());
        let mut out = vec![0.0; width];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        out
    }
}

impl From<Tensor> for Array {
    fn from(t: Tensor) -> Self {
        let (shape, data) = t.into_parts();
        Self { shape, data }
    }
}

impl From<&Tensor> for Array {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}
