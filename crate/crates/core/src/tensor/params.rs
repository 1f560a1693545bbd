use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Tape leaves for every parameter of a store, valid for one tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.detached()))
            .collect();
        BoundParams { vars }
    }

    /// Adds the leaf gradients of `tape` into the parameter accumulators.
    /// Parameters unreachable from the loss receive zeros.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) -> Result<()> {
        if bound.vars.len() != self.params.len() {
            return Err(Error::Param(format!(
                "bound parameter count {} does not match store size {}",
                bound.vars.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            match tape.grad(v) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => {
                    let z = vec![T::zero(); p.tensor.len()];
                    p.tensor.accumulate_grad(&z)?;
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast::<U>().with_requires_grad(true),
                })
                .collect(),
        }
    }
}

/// Wraps leaves already recorded on a tape as bound parameters, in store
/// order. Used when the caller owns the leaves (e.g. gradient checks).
pub fn bind_existing(vars: &[Var]) -> BoundParams {
    BoundParams {
        vars: vars.to_vec(),
    }
}
