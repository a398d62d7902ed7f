//! Named, tagged parameter storage.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to. Gradient masks are
/// derived from tags alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Backbone,
    Identity,
    Motion,
    Controller,
    /// Fixed statistics stored with the model; never trained.
    Buffer,
}

impl Tag {
    pub const ALL: [Tag; 5] = [Tag::Backbone, Tag::Identity, Tag::Motion, Tag::Controller, Tag::Buffer];

    pub fn to_byte(self) -> u8 {
        match self {
            Tag::Backbone => 0,
            Tag::Identity => 1,
            Tag::Motion => 2,
            Tag::Controller => 3,
            Tag::Buffer => 4,
        }
    }

    pub fn from_byte(b: u8) -> Option<Tag> {
        Tag::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::Backbone => "backbone",
            Tag::Identity => "identity",
            Tag::Motion => "motion",
            Tag::Controller => "controller",
            Tag::Buffer => "buffer",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub tag: Tag,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, tag: Tag) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, tensor, tag });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entry(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))?;
        Ok(&mut self.entries[idx].tensor)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn tag(&self, name: &str) -> Result<Tag> {
        self.entry(name).map(|e| e.tag)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Overwrite an existing parameter's values; the shape must match.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != tensor.shape() {
            return Err(Error::shape("set", slot.shape(), tensor.shape()));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names_with_tag(&self, tag: Tag) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn num_values(&self, tag: Tag) -> usize {
        self.entries
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Copy of the registry restricted to the given tags.
    pub fn subset(&self, tags: &[Tag]) -> ParamRegistry {
        let mut out = ParamRegistry::new();
        for e in self.entries.iter().filter(|e| tags.contains(&e.tag)) {
            out.insert(e.name.clone(), e.tensor.clone(), e.tag)
                .expect("names unique in source registry");
        }
        out
    }

    /// Insert every entry of `other`, replacing values of entries that
    /// already exist. Tags of replaced entries must agree.
    pub fn merge(&mut self, other: &ParamRegistry) -> Result<()> {
        for e in other.iter() {
            match self.index.get(&e.name) {
                Some(&i) => {
                    if self.entries[i].tag != e.tag {
                        return Err(Error::Invalid(format!(
                            "tag conflict for `{}`: {} vs {}",
                            e.name, self.entries[i].tag, e.tag
                        )));
                    }
                    self.set(&e.name, e.tensor.clone())?;
                }
                None => self.insert(e.name.clone(), e.tensor.clone(), e.tag)?,
            }
        }
        Ok(())
    }
}
