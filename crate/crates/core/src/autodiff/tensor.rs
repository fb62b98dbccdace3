//! Dense value storage for the tape: scalars, vectors and row-major matrices.

use std::sync::Arc;

/// Shape of a tape value. Scalars are length-1 vectors.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn scalar() -> Shape {
        Shape::Vector(1)
    }

    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        matches!(*self, Shape::Vector(1))
    }
}

/// Immutable dense tensor. Cloning is cheap (shared storage); values on the
/// tape are never mutated after creation.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Arc<[f64]>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data: data.into(),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(Shape::scalar(), vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        let n = data.len();
        Tensor::new(Shape::Vector(n), data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(Shape::Matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Tensor {
        Tensor::new(shape, vec![0.0; shape.len()])
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn item(&self) -> f64 {
        assert!(self.shape.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_lengths() {
        assert_eq!(Shape::Vector(3).len(), 3);
        assert_eq!(Shape::Matrix(2, 4).len(), 8);
        assert!(Shape::scalar().is_scalar());
    }

    #[test]
    #[should_panic]
    fn mismatched_data_panics() {
        let _ = Tensor::new(Shape::Vector(2), vec![1.0]);
    }
}
