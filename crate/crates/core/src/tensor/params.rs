use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors with per-parameter trainability and decay flags.
///
/// Names are `group/path`; the group is everything before the first `/`.
/// Values are reference counted so graphs can borrow them without copying.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    trainable: Vec<bool>,
    decay: Vec<bool>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. `decay` marks it for decoupled weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.names.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        self.trainable.push(true);
        self.decay.push(decay);
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> &str {
        let n = &self.names[id.0];
        n.split('/').next().unwrap_or(n)
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for id in self.ids() {
            let g = self.group(id);
            if !out.iter().any(|x| x == g) {
                out.push(g.to_string());
            }
        }
        out
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    /// Sets trainability for every parameter in `group`; other groups are untouched.
    pub fn set_group_trainable(&mut self, group: &str, on: bool) {
        for i in 0..self.names.len() {
            if self.group(ParamId(i)) == group {
                self.trainable[i] = on;
            }
        }
    }

    /// Freezes everything, then unfreezes the listed groups.
    pub fn train_only(&mut self, groups: &[&str]) {
        for i in 0..self.names.len() {
            let g = self.group(ParamId(i)).to_string();
            self.trainable[i] = groups.iter().any(|x| *x == g);
        }
    }

    pub fn group_ids(&self, group: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Snapshot of every parameter in a group, for bit-exact comparisons.
    pub fn snapshot_group(&self, group: &str) -> Vec<(String, Tensor)> {
        self.group_ids(group)
            .into_iter()
            .map(|id| (self.names[id.0].clone(), (*self.values[id.0]).clone()))
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| (n.as_str(), v.as_ref()))
    }

    /// Rounds every value to the nearest 32-bit float (inference-only precision mode).
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in Arc::make_mut(v).data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}
