//! Named parameter storage and the per-step graph that binds it to a tape.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {}",
            name
        );
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Overwrite every parameter of `self` whose name also exists in `other`.
    /// Returns how many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for i in 0..self.tensors.len() {
            if let Some(j) = other.find(&self.names[i]) {
                assert_eq!(
                    self.tensors[i].shape(),
                    other.tensors[j.0].shape(),
                    "shape mismatch for {}",
                    self.names[i]
                );
                self.tensors[i] = other.tensors[j.0].clone();
                copied += 1;
            }
        }
        copied
    }

    pub fn rename_all(&mut self, f: impl Fn(&str) -> String) {
        for n in &mut self.names {
            *n = f(n);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn insert_or_replace(&mut self, name: &str, value: Tensor) -> ParamId {
        match self.find(name) {
            Some(id) => {
                self.tensors[id.0] = value;
                id
            }
            None => self.add(name.to_string(), value),
        }
    }
}

/// A tape plus lazily created leaves for the parameters it touches.
///
/// Each parameter is bound at most once per graph, so weights shared by
/// several branches accumulate their gradients into one leaf.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Graph<'s> {
    /// Parameters become gradient leaves.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: alloc::vec![None; store.len()],
            trainable: true,
        }
    }

    /// Parameters become constants; nothing on this graph needs a gradient.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients for every parameter, `None` where a parameter was never used.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }

    /// Convenience: backward from `loss` and collect parameter gradients.
    pub fn backward_params(&self, loss: Var) -> Vec<Option<Tensor>> {
        let mut g = self.tape.backward(loss);
        self.param_grads(&mut g)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
