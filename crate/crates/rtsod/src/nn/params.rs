//! Named parameter tensors with per-tensor freeze flags.

use super::graph::Arr;
use std::collections::BTreeMap;
use std::sync::Arc;

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Arr>>,
    frozen: Vec<bool>,
    index: BTreeMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Arr) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.frozen.push(false);
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn value(&self, idx: usize) -> &Arr {
        &self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> &Arr {
        self.value(self.idx(name))
    }

    pub(crate) fn value_arc(&self, idx: usize) -> Arc<Arr> {
        Arc::clone(&self.values[idx])
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Arr {
        Arc::make_mut(&mut self.values[idx])
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        self.frozen[idx]
    }

    pub fn set_frozen(&mut self, idx: usize, frozen: bool) {
        self.frozen[idx] = frozen;
    }

    /// Freezes or thaws every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for i in 0..self.names.len() {
            if self.names[i].starts_with(prefix) {
                self.frozen[i] = frozen;
            }
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// FNV-1a digest over the exact bit patterns of all tensors matching the
    /// prefix, in name-sorted registration order. Used to assert that frozen
    /// weights stay bitwise untouched.
    pub fn bit_digest(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut fold = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, idx) in &self.index {
            if !name.starts_with(prefix) {
                continue;
            }
            fold(name.as_bytes());
            for v in self.values[*idx].iter() {
                fold(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor;

    #[test]
    fn freeze_by_prefix_and_digest_stability() {
        let mut store = ParamStore::new();
        store.add("enc.w1", tensor(&[2], vec![1.0, 2.0]));
        store.add("enc.w2", tensor(&[1], vec![3.0]));
        store.add("head.w", tensor(&[1], vec![4.0]));
        store.set_frozen_prefix("enc.", true);
        assert!(store.is_frozen(store.idx("enc.w1")));
        assert!(store.is_frozen(store.idx("enc.w2")));
        assert!(!store.is_frozen(store.idx("head.w")));

        let before = store.bit_digest("enc.");
        let head = store.idx("head.w");
        store.value_mut(head)[[0]] = 9.0;
        assert_eq!(before, store.bit_digest("enc."));
        let w1 = store.idx("enc.w1");
        store.value_mut(w1)[[0]] = 1.5;
        assert_ne!(before, store.bit_digest("enc."));
    }
}
