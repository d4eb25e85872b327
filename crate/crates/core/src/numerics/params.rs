use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Named collection of tensors with stable (sorted) iteration order.
///
/// Aggregation and optimisation both operate name-wise, so two collections are
/// compatible exactly when their name sets and shapes agree.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        ParamSet(BTreeMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    /// Like `get`, but a missing name is an error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::NameMismatch(vec![name.to_string()]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }

    /// Names present in exactly one of the two collections, or present in both
    /// with different shapes.
    pub fn name_difference(&self, other: &ParamSet) -> Vec<String> {
        let mut diff: Vec<String> = self
            .0
            .iter()
            .filter(|(k, v)| other.0.get(*k).map(|o| o.shape() != v.shape()).unwrap_or(true))
            .map(|(k, _)| k.clone())
            .collect();
        diff.extend(other.0.keys().filter(|k| !self.0.contains_key(*k)).cloned());
        diff.sort();
        diff
    }

    pub fn ensure_compatible(&self, other: &ParamSet) -> Result<()> {
        let diff = self.name_difference(other);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::NameMismatch(diff))
        }
    }

    /// Sub-collection of names starting with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    /// Adds every entry of `other`, replacing on collision.
    pub fn extend(&mut self, other: ParamSet) {
        self.0.extend(other.0);
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet(iter.into_iter().collect())
    }
}

impl IntoIterator for ParamSet {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = std::collections::btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl std::ops::Index<&str> for ParamSet {
    type Output = Tensor;

    fn index(&self, name: &str) -> &Tensor {
        &self.0[name]
    }
}
