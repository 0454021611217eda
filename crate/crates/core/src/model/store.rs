use indexmap::IndexMap;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Which entries of a parameter the optimizer may touch.
#[derive(Clone, Debug, PartialEq)]
pub enum Trainable {
    Frozen,
    Full,
    /// entry-wise mask, same length as the tensor
    Masked(Vec<bool>),
}

impl Trainable {
    pub fn is_trainable(&self) -> bool {
        !matches!(self, Trainable::Frozen)
    }

    pub fn count(&self, len: usize) -> usize {
        match self {
            Trainable::Frozen => 0,
            Trainable::Full => len,
            Trainable::Masked(m) => m.iter().filter(|&&b| b).count(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: Trainable,
    /// receives decoupled weight decay
    pub decay: bool,
    /// part of the pretrained backbone (as opposed to adapter-added)
    pub backbone: bool,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.params.insert(name.into(), param);
    }

    pub fn insert_backbone(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) {
        self.insert(
            name,
            Param {
                tensor,
                trainable: Trainable::Frozen,
                decay,
                backbone: true,
            },
        );
    }

    /// Adds a trainable, adapter-owned parameter.
    pub fn insert_adapter(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) {
        self.insert(
            name,
            Param {
                tensor,
                trainable: Trainable::Full,
                decay,
                backbone: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Lookup {
                kind: "parameter",
                name: name.to_string(),
            })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.get_mut(name).ok_or_else(|| Error::Lookup {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = Trainable::Frozen;
        }
    }

    pub fn set_trainable(&mut self, name: &str, t: Trainable) -> Result<()> {
        let p = self.get_mut(name)?;
        if let Trainable::Masked(m) = &t {
            if m.len() != p.tensor.len() {
                return Err(Error::dim(
                    "trainable mask",
                    format!("{name}: mask has {} entries, tensor {}", m.len(), p.tensor.len()),
                ));
            }
        }
        p.trainable = t;
        Ok(())
    }

    /// Entries in every parameter, backbone plus adapter.
    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .map(|p| p.trainable.count(p.tensor.len()))
            .sum()
    }

    /// Names of parameters with at least one trainable entry, in order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable.is_trainable())
            .map(|(n, _)| n.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_respect_masks() {
        let mut s = ParamStore::new();
        s.insert_backbone("w", Tensor::zeros(&[2, 3]), true);
        s.insert_adapter("h", Tensor::zeros(&[4]), false);
        assert_eq!(s.total_count(), 10);
        assert_eq!(s.trainable_count(), 4);
        s.set_trainable("w", Trainable::Masked(vec![true, false, true, false, false, false]))
            .unwrap();
        assert_eq!(s.trainable_count(), 6);
        assert_eq!(s.trainable_names(), vec!["w", "h"]);
        assert!(s.set_trainable("w", Trainable::Masked(vec![true])).is_err());
        assert!(matches!(s.tensor("nope"), Err(Error::Lookup { .. })));
    }
}
