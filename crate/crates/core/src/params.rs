//! Named parameter registry shared by the backbone and the GPN.
//!
//! Parameters are addressed by stable string names (used in checkpoints) and
//! by dense integer ids (used on tapes). Registration order is fixed by the
//! model constructors, so iteration order — and therefore every gradient
//! reduction and serialized layout — is deterministic.

use std::collections::BTreeMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::autodiff::{Array, NodeId, Tape};
use crate::{Error, Result};

/// Dense handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Array>>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Array) -> Result<PId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = PId(self.values.len());
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: PId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: PId) -> &Arc<Array> {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<PId> {
        self.index.get(name).copied().map(PId)
    }

    /// Replace a parameter's value; the shape must be unchanged.
    pub fn set(&mut self, id: PId, value: Array) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "param {}: {:?} -> {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("param {}", self.names[id.0])));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Array>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    /// SHA-256 over names, shapes, and little-endian payloads; equal iff the
    /// parameter sets are bit-identical.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, value) in self.iter() {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((value.shape().len() as u64).to_le_bytes());
            for d in value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Put every parameter on the tape as a grad-requiring leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            ids: self
                .values
                .iter()
                .map(|v| tape.leaf(Arc::clone(v), true))
                .collect(),
        }
    }

    /// Put every parameter on the tape as a constant (no gradients kept);
    /// used when this model is frozen inside someone else's training graph.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            ids: self
                .values
                .iter()
                .map(|v| tape.leaf(Arc::clone(v), false))
                .collect(),
        }
    }

    /// Gradients from `tape` aligned with this set, `None` where a parameter
    /// did not participate in the graph.
    pub fn collect_grads(&self, tape: &Tape, bound: &Bound) -> Vec<Option<Array>> {
        bound.ids.iter().map(|id| tape.grad(*id).cloned()).collect()
    }
}

/// Tape bindings for one forward pass, indexable by [`PId`].
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    /// Wrap externally created leaf nodes (one per parameter, in
    /// registration order). This lets gradient-check harnesses drive model
    /// forward passes from their own perturbed copies of the parameters.
    pub fn from_nodes(ids: Vec<NodeId>) -> Bound {
        Bound { ids }
    }

    pub fn node(&self, id: PId) -> NodeId {
        self.ids[id.0]
    }
}
