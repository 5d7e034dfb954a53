//! Named parameter storage and the per-pass graph that binds parameters
//! onto a fresh tape.
//!
//! Parameters live in a `ParamStore` keyed by stable dotted names (used by
//! checkpoints and the optimizer). A `Graph` is rebuilt for every forward
//! pass: binding a parameter copies its current values onto the tape, and
//! after `backward` the adjoints are written back into the store's gradient
//! slots.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{CoreError, Result};

/// Stable handle into a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(CoreError::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// One differentiable pass: a tape plus the parameter bindings made on it.
#[derive(Debug, Default)]
pub struct Graph {
    pub tape: Tape,
    bound: Vec<(ParamId, Var)>,
    seen: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Bind a parameter with gradient tracking. Binding the same id twice
    /// returns the original tape node so adjoints accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.seen.get(&id) {
            return Ok(v);
        }
        let t = store.tensor(id);
        let (r, c) = t.dims2()?;
        let v = self.tape.leaf(r, c, t.values.clone(), true)?;
        self.seen.insert(id, v);
        self.bound.push((id, v));
        Ok(v)
    }

    /// Bind a parameter as a plain constant (frozen: no gradient flows).
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.tensor(id);
        let (r, c) = t.dims2()?;
        self.tape.leaf(r, c, t.values.clone(), false)
    }

    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.tape.constant(t)
    }

    pub fn input(&mut self, t: &Tensor, needs_grad: bool) -> Result<Var> {
        let (r, c) = t.dims2()?;
        self.tape.leaf(r, c, t.values.clone(), needs_grad)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Scalar value of a [1, 1] node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let vals = self.tape.value(v);
        if vals.len() != 1 {
            return Err(CoreError::Contract(format!(
                "expected scalar node, found {} values",
                vals.len()
            )));
        }
        Ok(vals[0])
    }

    /// Accumulate this pass's adjoints into the store. Parameters that were
    /// bound but never reached by the loss receive exact zeros.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, var) in &self.bound {
            match self.tape.grad(var) {
                Some(g) => store.tensor_mut(id).accumulate_grad(g)?,
                None => {
                    let n = store.tensor(id).numel();
                    store.tensor_mut(id).accumulate_grad(&vec![0.0; n])?;
                }
            }
        }
        Ok(())
    }

    pub fn bound_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bound.iter().map(|&(id, _)| id)
    }

    /// Copy a tape node out as a plain tensor.
    pub fn detach(&self, v: Var) -> Tensor {
        let (r, c) = self.tape.shape(v);
        Tensor {
            shape: vec![r, c],
            values: self.tape.value(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }
}

impl Deref for Graph {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.register("w", Tensor::row(vec![1.0])).unwrap();
        assert!(s.register("w", Tensor::row(vec![2.0])).is_err());
    }

    #[test]
    fn rebinding_same_param_reuses_node() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::row(vec![2.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&s, id).unwrap();
        let b = g.param(&s, id).unwrap();
        assert_eq!(a, b);

        // y = w * w: adjoint should accumulate to 2w through the single node.
        let y = g.mul(a, b).unwrap();
        let y = g.sum_all(y).unwrap();
        g.backward(y).unwrap();
        g.write_grads(&mut s).unwrap();
        assert_eq!(s.tensor(id).grad.as_deref(), Some(&[4.0][..]));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut s = ParamStore::new();
        let used = s.register("used", Tensor::row(vec![3.0])).unwrap();
        let unused = s.register("unused", Tensor::row(vec![1.0])).unwrap();
        let mut g = Graph::new();
        let u = g.param(&s, used).unwrap();
        let _nu = g.param(&s, unused).unwrap();
        let y = g.mul(u, u).unwrap();
        let y = g.sum_all(y).unwrap();
        g.backward(y).unwrap();
        g.write_grads(&mut s).unwrap();
        assert_eq!(s.tensor(unused).grad.as_deref(), Some(&[0.0][..]));
        assert_eq!(s.tensor(used).grad.as_deref(), Some(&[6.0][..]));
    }

    #[test]
    fn frozen_binding_gets_no_grad() {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::row(vec![2.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param_frozen(&s, id).unwrap();
        let y = g.mul(w, w).unwrap();
        let y = g.sum_all(y).unwrap();
        g.backward(y).unwrap();
        assert!(g.tape.grad(w).is_none());
    }
}
