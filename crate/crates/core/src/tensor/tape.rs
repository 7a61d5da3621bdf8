use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Deref;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{ClicError, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Computes input gradients from the output gradient. The flag slice says
/// which inputs are tracked; untracked slots may be returned as `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Entry<T> {
    name: &'static str,
    output: usize,
    inputs: Vec<Option<usize>>,
    backward: BackwardFn<T>,
}

struct Inner<T> {
    n_vars: usize,
    entries: Vec<Entry<T>>,
    params: Vec<(usize, ParamId)>,
    consumed: bool,
}

/// Ordered record of differentiable operations.
///
/// A disabled tape (see [`Tape::inference`]) records nothing; values are
/// dropped as soon as the last [`Var`] referencing them goes away.
pub struct Tape<T> {
    id: u64,
    enabled: bool,
    inner: RefCell<Inner<T>>,
}

/// Handle to a value produced under a tape.
#[derive(Clone)]
pub struct Var<T> {
    id: Option<usize>,
    tape: u64,
    value: Rc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        self.value.dims3()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> T {
        self.value.data()[0]
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }
}

impl<T> std::fmt::Debug for Var<T>
where
    T: std::fmt::Debug,
{
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{:?}({:?})", self.id, self.value)
    }
}

/// Outcome of a backward pass.
#[derive(Debug, Default)]
pub struct BackwardReport<T> {
    /// Operation names in the order their backward rules ran.
    pub visited: Vec<&'static str>,
    leaf_grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> BackwardReport<T> {
    /// Gradient with respect to a leaf created with [`Tape::leaf`].
    pub fn grad(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        v.id.and_then(|id| self.leaf_grads.get(&id))
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Recording tape for a training step.
    pub fn new() -> Self {
        Self::with_mode(true)
    }

    /// Non-recording tape for inference.
    pub fn inference() -> Self {
        Self::with_mode(false)
    }

    fn with_mode(enabled: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            enabled,
            inner: RefCell::new(Inner {
                n_vars: 0,
                entries: Vec::new(),
                params: Vec::new(),
                consumed: false,
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    fn fresh_id(&self) -> Option<usize> {
        if !self.enabled {
            return None;
        }
        let mut inner = self.inner.borrow_mut();
        inner.n_vars += 1;
        Some(inner.n_vars - 1)
    }

    /// Untracked value.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            tape: self.id,
            value: Rc::new(t),
        }
    }

    /// Tracked input whose gradient is reported by [`BackwardReport::grad`].
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        Var {
            id: self.fresh_id(),
            tape: self.id,
            value: Rc::new(t),
        }
    }

    /// Tracked leaf bound to a parameter; backward accumulates into its
    /// gradient buffer.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let v = self.leaf(store.get(id).value.clone());
        if let Some(vid) = v.id {
            self.inner.borrow_mut().params.push((vid, id));
        }
        v
    }

    /// Records an operation. If no input is tracked the output is untracked
    /// and the backward rule is discarded.
    pub(crate) fn record(
        &self,
        name: &'static str,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<T> {
        debug_assert!(value.is_finite(), "{name} produced a non-finite value");
        let tracked = self.enabled && inputs.iter().any(|v| v.id.is_some() && v.tape == self.id);
        if !tracked {
            return self.constant(value);
        }
        let id = self.fresh_id();
        let entry = Entry {
            name,
            output: id.expect("recording tape assigns ids"),
            inputs: inputs
                .iter()
                .map(|v| if v.tape == self.id { v.id } else { None })
                .collect(),
            backward,
        };
        self.inner.borrow_mut().entries.push(entry);
        Var {
            id,
            tape: self.id,
            value: Rc::new(value),
        }
    }

    /// Names of recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.inner.borrow().entries.iter().map(|e| e.name).collect()
    }

    /// Runs reverse-mode differentiation from a scalar `loss`, accumulating
    /// into the gradient buffers of every parameter used under this tape.
    pub fn backward(&self, loss: &Var<T>, store: &mut ParamStore<T>) -> Result<BackwardReport<T>> {
        let loss_id = match loss.id {
            Some(id) if loss.tape == self.id => id,
            _ => {
                return Err(ClicError::Tape(
                    "loss was not produced under this tape".into(),
                ))
            }
        };
        if loss.value.numel() != 1 {
            return Err(ClicError::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(ClicError::Tape(
                "backward already ran on this tape; double backward is not supported".into(),
            ));
        }
        inner.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; inner.n_vars];
        grads[loss_id] = Some(Tensor::scalar(T::one()));
        let mut report = BackwardReport {
            visited: Vec::new(),
            leaf_grads: HashMap::new(),
        };
        let entries = std::mem::take(&mut inner.entries);
        for entry in entries.into_iter().rev() {
            let Some(g) = grads[entry.output].take() else {
                continue;
            };
            report.visited.push(entry.name);
            let needs: Vec<bool> = entry.inputs.iter().map(Option::is_some).collect();
            let input_grads = (entry.backward)(&g, &needs);
            for (slot, ig) in entry.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(ig)) = (slot, ig) {
                    match &mut grads[*i] {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(ig.data()) {
                                *a += b;
                            }
                        }
                        none => *none = Some(ig),
                    }
                }
            }
        }
        let param_ids: HashMap<usize, ParamId> = inner.params.iter().copied().collect();
        for (vid, slot) in grads.into_iter().enumerate() {
            let Some(g) = slot else { continue };
            match param_ids.get(&vid) {
                Some(&pid) => store.get_mut(pid).accumulate_grad(&g),
                None => {
                    report.leaf_grads.insert(vid, g);
                }
            }
        }
        // parameters that received no gradient still get an explicit zero
        for &(_, pid) in &inner.params {
            let p = store.get_mut(pid);
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        Ok(report)
    }
}

/// A tape paired with the parameters a forward pass reads from.
pub struct Graph<'a, T> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Graph { tape, params }
    }

    /// Parameter as a var.
    pub fn p(&self, id: ParamId) -> Var<T> {
        self.tape.param(self.params, id)
    }
}

impl<T> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        self.tape
    }
}
