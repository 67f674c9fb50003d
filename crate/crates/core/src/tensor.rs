//! Dense row-major tensors of rank 1..=4, double precision throughout.
//!
//! Tensors are immutable values: every operation allocates its output. Shapes
//! are plain `Vec<usize>` with all extents positive and `data.len()` equal to
//! the product of the extents.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::InvalidShape {
                shape,
                msg: "rank must be between 1 and 4".into(),
            });
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape {
                shape,
                msg: "all extents must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::InvalidShape {
                shape,
                msg: format!("data length {} != product of extents {}", data.len(), expected),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("static shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("static shape")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(i)).collect();
        Tensor::new(shape.to_vec(), data).expect("static shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Single element of a rank-1 tensor of length 1.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    #[inline]
    pub fn at3(&self, d0: usize, d1: usize, d2: usize) -> f64 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(d0 * self.shape[1] + d1) * self.shape[2] + d2]
    }

    #[inline]
    pub fn at4(&self, d0: usize, d1: usize, d2: usize, d3: usize) -> f64 {
        debug_assert_eq!(self.rank(), 4);
        self.data[((d0 * self.shape[1] + d1) * self.shape[2] + d2) * self.shape[3] + d3]
    }

    #[inline]
    pub fn at2(&self, d0: usize, d1: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[d0 * self.shape[1] + d1]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Stack rank-3 tensors of identical shape into one rank-4 tensor.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("stack", "empty sample list"))?;
        if first.rank() != 3 {
            return Err(Error::invalid("stack", "samples must be rank-3"));
        }
        let mut data = Vec::with_capacity(samples.len() * first.len());
        for s in samples {
            if s.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: s.shape.clone(),
                });
            }
            data.extend_from_slice(s.data());
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.shape());
        Tensor::new(shape, data)
    }

    /// The `i`-th rank-3 sample of a rank-4 tensor.
    pub fn sample(&self, i: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::invalid("sample", "tensor must be rank-4"));
        }
        let per = self.len() / self.shape[0];
        let data = self.data[i * per..(i + 1) * per].to_vec();
        Tensor::new(self.shape[1..].to_vec(), data)
    }
}

/// Elementwise binary combination with exact shape agreement (non-autodiff).
pub(crate) fn zip_map(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}
