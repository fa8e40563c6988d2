use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors. Names are path-like (`decoder/gru1/u`) and are the
/// keys used by checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.frozen.push(false);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.frozen[i] = true;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// SHA-256 over names and little-endian values of the parameters under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (_, name, v) in self.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            h.update((v.rows as u64).to_le_bytes());
            h.update((v.cols as u64).to_le_bytes());
            for x in &v.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.data.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// Copies values of matching names and shapes from `other`; returns how
    /// many were copied.
    pub fn copy_from(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (_, name, v) in other.iter() {
            if let Some(id) = self.id(name) {
                if self.values[id.0].shape() == v.shape() {
                    self.values[id.0] = v.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

/// Gradients of a scalar with respect to the parameters of a store.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) by_param: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    /// True when the parameter received no gradient or an all-zero one.
    pub fn is_zero(&self, id: ParamId) -> bool {
        self.get(id).is_none_or(|g| g.data.iter().all(|&x| x == 0.0))
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param.iter().flatten().map(Mat::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.iter().flatten().all(Mat::is_finite)
    }
}
