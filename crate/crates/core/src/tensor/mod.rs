//! A small differentiable tensor engine.
//!
//! [`Tensor`] is a plain row-major value (NCHW for images). Differentiation
//! happens on a [`Tape`]: operations are recorded as they are evaluated and
//! [`Tape::backward`] walks the record in reverse, producing a [`Gradients`]
//! table for every leaf that was registered as trainable.
//!
//! Everything is generic over [`Element`], which is implemented for `f32`
//! (training and sampling) and `f64` (gradient checks).

mod element;
pub mod kernels;
mod tape;

pub use element::Element;
pub use kernels::ConvGeometry;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                axis: "data length",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let len = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
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

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, format!("expected rank-4 NCHW tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(op, format!("expected rank-2 tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape.len() != other.shape.len() {
            return Err(Error::ShapeMismatch {
                op,
                axis: "rank",
                expected: self.shape.len(),
                actual: other.shape.len(),
            });
        }
        const AXES: [&str; 6] = ["axis 0", "axis 1", "axis 2", "axis 3", "axis 4", "axis 5"];
        for (i, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(Error::ShapeMismatch {
                    op,
                    axis: AXES.get(i).copied().unwrap_or("trailing axis"),
                    expected: a,
                    actual: b,
                });
            }
        }
        Ok(())
    }

    /// Sum accumulated in double precision.
    pub fn sum(&self) -> T {
        T::from_f64(self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum()).unwrap()
    }

    pub fn mean(&self) -> T {
        let total: f64 = self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum();
        T::from_f64(total / self.data.len() as f64).unwrap()
    }

    /// Euclidean norm over every element.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap())
                .collect(),
        }
    }

    /// Returns sample `index` of a batched tensor with the batch axis kept (size 1).
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::shape("batch_item", "rank-0 tensor"))?;
        if index >= n {
            return Err(Error::invalid(format!("batch index {index} out of range for batch of {n}")));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self {
            shape,
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Concatenates tensors along the leading (batch) axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for item in items {
            if &item.shape[1..] != tail {
                return Err(Error::shape(
                    "stack_batch",
                    format!("trailing shape {:?} differs from {:?}", &item.shape[1..], tail),
                ));
            }
            n += item.shape[0];
            data.extend_from_slice(&item.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Self { shape, data })
    }
}
