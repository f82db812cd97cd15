//! Named, ordered parameter storage shared by models, optimizers and
//! checkpoints.
//!
//! Registration order is part of a model's identity: optimizer state,
//! gradient reduction and checkpoint layout all follow it, which is what
//! makes runs bit-for-bit reproducible.

use std::collections::HashMap;

use crate::error::{EngineError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Optimizer routing tag.
///
/// The stream channels train their feature-extraction trunk with SGD and
/// everything else with Adam; the text channel tags everything `Head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Head,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// Insertion-ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Add a parameter. Names must be unique; tensors are stored with
    /// gradients enabled regardless of how they were built.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        tensor: Tensor,
    ) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(EngineError::Contract(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            group,
            tensor: tensor.with_grad(),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut ParamEntry {
        &mut self.entries[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index
            .get(name)
            .copied()
            .map(|i| &mut self.entries[i].tensor)
    }

    /// Record every parameter as a leaf on `tape`, in registration order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.entries.iter().map(|e| tape.leaf(&e.tensor)).collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }

    /// Name existing tape variables (one per parameter, in registration
    /// order) so they can serve as this set's binding. Used by the
    /// finite-difference harness, which creates the leaves itself.
    pub fn bind_existing(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.entries.len() {
            return Err(EngineError::Contract(format!(
                "{} variables bound to {} parameters",
                vars.len(),
                self.entries.len()
            )));
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Gradients for every parameter after `tape.backward`, in
    /// registration order.
    pub fn collect_grads(&self, tape: &Tape, bound: &BoundParams) -> Result<Vec<Vec<f64>>> {
        bound
            .vars
            .iter()
            .map(|&v| tape.grad(v).map(<[f64]>::to_vec))
            .collect()
    }
}

/// Tape handles for one binding of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| EngineError::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_is_preserved() {
        let mut ps = ParamSet::new();
        ps.register("b", ParamGroup::Head, Tensor::zeros(vec![2]))
            .unwrap();
        ps.register("a", ParamGroup::Extractor, Tensor::zeros(vec![3]))
            .unwrap();
        let names: Vec<&str> = ps.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(ps.total_scalars(), 5);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParamSet::new();
        ps.register("w", ParamGroup::Head, Tensor::zeros(vec![1]))
            .unwrap();
        assert!(ps
            .register("w", ParamGroup::Head, Tensor::zeros(vec![1]))
            .is_err());
    }

    #[test]
    fn bind_and_collect_round_trip() {
        let mut ps = ParamSet::new();
        ps.register(
            "w",
            ParamGroup::Head,
            Tensor::from_vec(vec![2], vec![3.0, -1.0]).unwrap(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape);
        let w = bound.var("w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let grads = ps.collect_grads(&tape, &bound).unwrap();
        assert_eq!(grads, vec![vec![6.0, -2.0]]);
        assert!(bound.var("missing").is_err());
    }
}
