use crate::scalar::Scalar;

/// Handle to an array stored on a [`super::Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArrayId(pub(crate) usize);

/// Dense n-dimensional array participating in reverse-mode differentiation.
///
/// Values are immutable after creation; the gradient buffer is allocated
/// lazily during the backward pass and always mirrors the value shape.
#[derive(Debug, Clone)]
pub struct DiffArray<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> DiffArray<T> {
    pub(crate) fn new(shape: Vec<usize>, values: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        DiffArray {
            shape,
            values,
            grad: None,
            requires_grad,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Gradient buffer, present only after a backward pass reached this array.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<T> {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }
}
