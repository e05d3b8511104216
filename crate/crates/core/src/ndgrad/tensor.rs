//! Dense n-dimensional tensors and trainable parameters.

use crate::error::{arg_err, dim_err, state_err};
use crate::{Error, Result};

/// A dense row-major tensor of 64-bit floats with an optional gradient slot.
///
/// Invariants: `data.len() == shape.iter().product()`, the gradient (when
/// present) has the same length, and all stored values are finite. The
/// constructors validate finiteness; NaN or infinity at a contract boundary
/// is an error, never silently propagated.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data, validating invariants.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(arg_err("Tensor::new", format!("zero-sized dimension in {shape:?}")));
        }
        if data.len() != numel {
            return Err(dim_err(
                "Tensor::new",
                format!("{numel} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    /// Tensor whose flat element `i` is `f(i)`.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Consume the tensor, returning its flat data.
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the same data under a new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(dim_err(
                "Tensor::reshaped",
                format!("{} elements", self.data.len()),
                format!("shape {shape:?} ({numel} elements)"),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Allocate (or keep) a zeroed gradient slot.
    pub fn alloc_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Drop the gradient slot (used by tests exercising the missing-gradient
    /// error path and by checkpoint loading).
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack 2-D tensors of identical shape into one `[N, 1, H, W]` batch.
    pub fn stack_as_batch(items: &[&Tensor]) -> Result<Tensor> {
        if items.is_empty() {
            return Err(arg_err("Tensor::stack_as_batch", "empty batch"));
        }
        let shape = items[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(dim_err("Tensor::stack_as_batch", "2-d items", format!("{shape:?}")));
        }
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            if t.shape() != shape.as_slice() {
                return Err(dim_err(
                    "Tensor::stack_as_batch",
                    format!("{shape:?}"),
                    format!("{:?}", t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(&[items.len(), 1, shape[0], shape[1]], data)
    }
}

/// Which learning-rate group a parameter belongs to during SGD.
///
/// `Slow` is used for pre-trained layers during fine-tuning; everything
/// else is `Fast`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrGroup {
    Fast,
    Slow,
}

/// A named trainable tensor with its learning-rate group and L2 penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub group: LrGroup,
    pub weight_decay: f64,
}

impl Parameter {
    /// New fast-group parameter with a zeroed gradient slot and no decay.
    pub fn new(name: impl Into<String>, mut tensor: Tensor) -> Self {
        tensor.alloc_grad();
        Parameter {
            name: name.into(),
            tensor,
            group: LrGroup::Fast,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Result<Self> {
        if wd < 0.0 {
            return Err(arg_err("Parameter::with_weight_decay", format!("negative decay {wd}")));
        }
        self.weight_decay = wd;
        Ok(self)
    }

    /// Borrow the populated gradient, or a state error if it was cleared.
    pub fn grad_checked(&self) -> Result<&[f64]> {
        self.tensor
            .grad()
            .ok_or_else(|| state_err("sgd_step", format!("parameter '{}' has no gradient", self.name)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length_and_finiteness() {
        assert!(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn grad_slot_matches_data_length() {
        let mut t = Tensor::zeros(&[3, 4]);
        t.alloc_grad();
        assert_eq!(t.grad().unwrap().len(), t.numel());
    }

    #[test]
    fn stack_builds_nchw_batch() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let batch = Tensor::stack_as_batch(&[&a, &b]).unwrap();
        assert_eq!(batch.shape(), &[2, 1, 2, 2]);
        assert_eq!(batch.data()[4], 5.0);
    }
}
