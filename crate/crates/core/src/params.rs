//! Named parameter storage and binding onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autograd::{Grads, Graph, Var};
use crate::tensor::Tensor;
use crate::util::{sha256_hex, Rng};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.map.iter().filter(|(k, _)| filter(k)).map(|(_, t)| t.numel()).sum()
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    /// Serialized parameter records (see [`crate::checkpoint`]) of the selected subset.
    pub fn encode_records(&self, filter: impl Fn(&str) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in self.map.iter().filter(|(k, _)| filter(k)) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 of the serialized records of the selected subset.
    pub fn hash(&self, filter: impl Fn(&str) -> bool) -> String {
        sha256_hex(&self.encode_records(filter))
    }

    /// Rounds every value to `f32`, the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Graph handles for every parameter of a store.
pub struct ParamVars {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl ParamVars {
    /// Registers every parameter as a graph leaf; those accepted by `trainable` require grad.
    pub fn bind(g: &mut Graph, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        let mut tr = Vec::new();
        for (name, t) in store.iter() {
            let v = if trainable(name) {
                let v = g.variable(t.clone());
                tr.push((name.clone(), v));
                v
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Self { vars, trainable: tr }
    }

    /// Wraps existing graph leaves; all of them count as trainable.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        let trainable: Vec<(String, Var)> = pairs.into_iter().collect();
        Self { vars: trainable.iter().cloned().collect(), trainable }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of the trainable parameters; untouched ones come back as zeros.
    pub fn collect_grads(&self, g: &Graph, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.trainable
            .iter()
            .map(|(name, v)| {
                let t = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape().to_vec()));
                (name.clone(), t)
            })
            .collect()
    }
}

pub fn normal(rng: &mut Rng, shape: impl Into<Vec<usize>>, std: f64) -> Tensor {
    let shape = shape.into();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape, data)
}

/// Xavier-uniform `[fan_in, fan_out]` weight.
pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new([fan_in, fan_out], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;

    #[test]
    fn hash_ignores_unselected_params() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::full([2, 2], 1.0));
        s.insert("b.w", Tensor::full([2], 3.0));
        let h = s.hash(|n| n.starts_with("a."));
        s.get_mut("b.w").unwrap().data_mut()[0] = 7.0;
        assert_eq!(h, s.hash(|n| n.starts_with("a.")));
        s.get_mut("a.w").unwrap().data_mut()[0] = 7.0;
        assert_ne!(h, s.hash(|n| n.starts_with("a.")));
    }

    #[test]
    fn xavier_bounds() {
        let t = xavier(&mut rng(3), 8, 24);
        let a = (6.0f64 / 32.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= a));
    }
}
