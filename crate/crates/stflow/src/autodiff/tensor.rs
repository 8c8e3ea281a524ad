use crate::error::{Error, Result};

use super::Scalar;

pub(crate) const MAX_RANK: usize = 4;

/// Dense multi-dimensional array of floats, rank 0 (scalar) through 4.
///
/// Layout is row-major. A tensor flagged with [`Tensor::with_grad`] carries a
/// same-shape gradient accumulator that optimizer steps consume.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "tensor rank {} exceeds the supported maximum of {MAX_RANK}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized axis in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); numel])
    }

    pub fn scalar(v: F) -> Self {
        Tensor::new(&[], vec![v]).expect("scalar shape is always valid")
    }

    pub fn filled(shape: &[usize], v: F) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![v; numel])
    }

    /// Flag the tensor as trainable and allocate its gradient accumulator.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![F::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Add `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        for (dst, &src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Value of a scalar (rank-0 or single-element) tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Element lookup by full index, for tests and small readers.
    pub fn at(&self, index: &[usize]) -> F {
        debug_assert_eq!(index.len(), self.rank());
        let mut flat = 0usize;
        for (axis, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[axis]);
            flat = flat * self.shape[axis] + i;
        }
        self.data[flat]
    }

    /// Lossless cast between scalar types (used by checkpoint IO).
    pub fn map_scalar<G: Scalar>(&self) -> Tensor<G> {
        let data = self.data.iter().map(|v| G::from_f64(v.into_f64())).collect();
        let mut t = Tensor::new(&self.shape, data).expect("shape already validated");
        if self.requires_grad {
            t = t.with_grad();
        }
        t
    }
}
