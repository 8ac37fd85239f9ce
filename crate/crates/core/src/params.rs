//! Named parameter storage with per-group freezing.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which model component a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    PretrainHead,
    SequenceModel,
    Connector,
    LabelEmbedding,
    PromptTokens,
    LabelHead,
    VisualHead,
    StaticPrompt,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::Backbone,
        Group::PretrainHead,
        Group::SequenceModel,
        Group::Connector,
        Group::LabelEmbedding,
        Group::PromptTokens,
        Group::LabelHead,
        Group::VisualHead,
        Group::StaticPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::PretrainHead => "pretrain_head",
            Group::SequenceModel => "seqmodel",
            Group::Connector => "connector",
            Group::LabelEmbedding => "label_embedding",
            Group::PromptTokens => "prompt_tokens",
            Group::LabelHead => "label_head",
            Group::VisualHead => "visual_head",
            Group::StaticPrompt => "static_prompt",
        }
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    group: Group,
    value: Arc<Tensor>,
    frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.into(),
            group,
            value: Arc::new(value),
            frozen: false,
        });
        id
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

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.ids().filter(|&id| self.group(id) == group).collect()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        for e in self.entries.iter_mut().filter(|e| e.group == group) {
            e.frozen = frozen;
        }
    }

    pub fn group_frozen(&self, group: Group) -> bool {
        let mut it = self.entries.iter().filter(|e| e.group == group).peekable();
        it.peek().is_some() && it.all(|e| e.frozen)
    }

    /// Applies an in-place update. Frozen parameters reject every update.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Tensor)) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.frozen {
            return Err(Error::Frozen(e.name.clone()));
        }
        f(Arc::make_mut(&mut e.value));
        Ok(())
    }

    /// Replaces a value during checkpoint loading; bypasses the frozen flag but
    /// insists on an identical shape.
    pub(crate) fn load_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {} expects {:?}, checkpoint holds {:?}",
                e.name,
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    /// Deep copy of every value in `group`, keyed by name.
    pub fn snapshot(&self, group: Group) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| (e.name.clone(), (*e.value).clone()))
            .collect()
    }

    /// SHA-256 over names, shapes and raw bits of every parameter in `group`.
    pub fn fingerprint(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            h.update(e.name.as_bytes());
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gaussian initialisation with the given standard deviation.
pub fn normal_init(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}
