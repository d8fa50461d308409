//! Dense f64 tensors with an optional gradient buffer.
//!
//! Layout is row-major with the innermost dimension last; activations use
//! NCHW. A `Tensor` is a cheap shared handle: cloning it aliases the same
//! storage, which is how mask groups share one theta vector.

use std::cell::{Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub(crate) struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec".into(),
                detail: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Self::raw(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::raw(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Self::raw(shape.to_vec(), vec![1.0; numel], false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::raw(vec![1], vec![v], false)
    }

    /// A trainable leaf: `requires_grad` set and a zeroed gradient buffer.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Self::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        Tensor {
            inner: Rc::new(RefCell::new(TensorData { shape, data, grad, requires_grad })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Toggling gradient tracking allocates (or drops) the buffer; freezing a
    /// mask or a weight goes through here.
    pub fn set_requires_grad(&self, on: bool) {
        let mut td = self.inner.borrow_mut();
        td.requires_grad = on;
        td.grad = on.then(|| vec![0.0; td.data.len()]);
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |td| td.data.as_slice())
    }

    pub fn data_mut(&self) -> RefMut<'_, [f64]> {
        RefMut::map(self.inner.borrow_mut(), |td| td.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn set_data(&self, values: &[f64]) {
        let mut td = self.inner.borrow_mut();
        assert_eq!(td.data.len(), values.len(), "set_data length mismatch");
        td.data.copy_from_slice(values);
    }

    /// Value of a scalar tensor. Panics on non-scalars; use `backward` errors
    /// for user-facing scalar checks.
    pub fn item(&self) -> f64 {
        let td = self.inner.borrow();
        assert_eq!(td.data.len(), 1, "item() on tensor of {} elements", td.data.len());
        td.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub(crate) fn grad_snapshot(&self) -> Vec<f64> {
        let td = self.inner.borrow();
        match &td.grad {
            Some(g) => g.clone(),
            None => vec![0.0; td.data.len()],
        }
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        let mut td = self.inner.borrow_mut();
        match &mut td.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => td.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&self) {
        let mut td = self.inner.borrow_mut();
        if let Some(g) = &mut td.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Identity comparison: true when both handles alias the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Data copy with no gradient tracking.
    pub fn detach(&self) -> Tensor {
        let td = self.inner.borrow();
        Self::raw(td.shape.clone(), td.data.clone(), false)
    }

    pub(crate) fn borrow(&self) -> Ref<'_, TensorData> {
        self.inner.borrow()
    }

    pub(crate) fn borrow_mut(&self) -> RefMut<'_, TensorData> {
        self.inner.borrow_mut()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let td = self.inner.borrow();
        let head: Vec<f64> = td.data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={}, data[..{}]={:?}{})",
            td.shape,
            td.requires_grad,
            head.len(),
            head,
            if td.data.len() > 8 { ", ..." } else { "" }
        )
    }
}
