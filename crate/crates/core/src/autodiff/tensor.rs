//! Dense row-major tensors with shared immutable storage.

use super::scalar::Scalar;
use std::sync::Arc;

/// Identifies a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape_tag: u64,
    pub(crate) index: usize,
}

/// A dense tensor. Cloning shares the underlying buffer.
///
/// A scalar is represented by the empty shape `[]` (one element). When a
/// tensor was produced by a recording tape, `node` links it back to that tape
/// for gradient extraction.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    pub(crate) node: Option<NodeRef>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expect,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::from_vec(vec![], vec![v])
    }

    pub fn scalar_f64(v: f64) -> Self {
        Tensor::scalar(T::from_f64(v))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![T::ZERO; n])
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n])
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::from_vec(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Extracts the single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.len(),
            1,
            "item() on tensor with {} elements",
            self.len()
        );
        self.data[0]
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    /// The same buffer detached from any tape.
    pub fn detached(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Self {
        self.node = Some(node);
        self
    }

    /// Converts elements to another scalar type (detached from any tape).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::<f64>::scalar(3.5);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.len(), 1);
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    #[should_panic]
    fn from_vec_checks_length() {
        let _ = Tensor::<f64>::from_vec(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn clone_shares_storage() {
        let a = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0]);
        let b = a.clone();
        assert!(std::ptr::eq(a.data(), b.data()));
    }
}
