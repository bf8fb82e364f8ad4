//! Named parameter storage and its binding onto a [`Tape`].

use std::collections::BTreeMap;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Learnable tensors keyed by dotted names, e.g. `enc.0.block.in_x.w`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        match self.map.get(name) {
            Some(t) => Ok(t),
            None => invalid(format!("missing parameter {name}")),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.map.get_mut(name) {
            Some(t) => Ok(t),
            None => invalid(format!("missing parameter {name}")),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Count of scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Copy every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &Params) {
        for (k, t) in other.iter() {
            self.map.insert(format!("{prefix}{k}"), t.clone());
        }
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> Params {
        Params {
            map: self
                .map
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Entries not under `prefix`.
    pub fn without_prefix(&self, prefix: &str) -> Params {
        Params {
            map: self
                .map
                .iter()
                .filter(|(k, _)| !k.starts_with(prefix))
                .map(|(k, t)| (k.clone(), t.clone()))
                .collect(),
        }
    }

    /// Place every parameter on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .map
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone())))
            .collect();
        Bound { tape, vars }
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: BTreeMap<String, Var>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(&v) => Ok(v),
            None => invalid(format!("missing parameter {name}")),
        }
    }

    /// Gradient for every bound parameter (zeros where none flowed).
    pub fn grads(&self, grads: &Grads) -> Params {
        let map = self
            .vars
            .iter()
            .map(|(k, &v)| {
                let value = self.tape.value(v);
                (k.clone(), grads.get_or_zeros(v, &value))
            })
            .collect();
        Params { map }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_collect_gradients() {
        let mut p = Params::new();
        p.insert("a", Tensor::full(&[2], 3.0));
        p.insert("b", Tensor::full(&[2], 5.0));
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let y = tape.mul(bound.var("a").unwrap(), bound.var("a").unwrap()).unwrap();
        let s = tape.sum(y).unwrap();
        let g = bound.grads(&tape.backward(s, None).unwrap());
        assert_eq!(g.get("a").unwrap().data(), &[6.0, 6.0]);
        assert_eq!(g.get("b").unwrap().data(), &[0.0, 0.0]);
        assert!(bound.var("c").is_err());
    }

    #[test]
    fn prefixes() {
        let mut inner = Params::new();
        inner.insert("w", Tensor::zeros(&[3]));
        let mut outer = Params::new();
        outer.merge_prefixed("blk.", &inner);
        assert_eq!(outer.count_prefix("blk."), 3);
        assert_eq!(outer.subset("blk."), inner);
    }
}
