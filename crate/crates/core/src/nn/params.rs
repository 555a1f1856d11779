use std::collections::BTreeMap;

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and differentiated through.
    Trainable,
    /// Persistent state (batch-norm running statistics); saved in
    /// checkpoints but never differentiated.
    Buffer,
}

pub(crate) struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    /// Adam first/second moment, allocated on first optimizer step.
    pub moment: Option<(Tensor, Tensor)>,
}

/// Flat registry of named tensors owned by one model instance.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push(ParamEntry {
            name,
            value,
            kind,
            moment: None,
        });
        id
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            self.entries[id.0].value.shape(),
            value.shape(),
            "set_value shape mismatch for {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = value;
        self.entries[id.0].moment = None;
    }

    /// Replaces a parameter's tensor allowing a shape change (first-conv
    /// channel adaptation). Optimizer state is reset.
    pub fn replace_value(&mut self, id: ParamId, value: Tensor) {
        self.entries[id.0].value = value;
        self.entries[id.0].moment = None;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Names in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor, ParamKind)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value, e.kind))
    }

    /// Total number of trainable scalar parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Zeroes every tensor whose name starts with `prefix`.
    pub fn zero_by_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.value = Tensor::zeros(e.value.shape());
                e.moment = None;
            }
        }
    }

    pub(crate) fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }
}
