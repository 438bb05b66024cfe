//! Named parameter storage.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Init, ParamSpec};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    /// False for batch-norm moving statistics, which are updated by
    /// averaging rather than by the optimizer.
    pub trainable: bool,
    /// Exit-head parameter (trained in both phases) rather than backbone.
    pub head: bool,
}

/// Parameters in insertion order, addressable by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, param: Param<T>) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(Error::graph(format!("duplicate parameter {}", param.name)));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    /// Draws a fresh value for every spec, in order.
    pub fn init_from_specs(&mut self, specs: &[ParamSpec], head: bool, rng: &mut impl Rng) -> Result<()> {
        for spec in specs {
            self.insert(Param {
                name: spec.name.clone(),
                value: init_tensor(spec, rng),
                trainable: spec.trainable,
                head,
            })?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::graph(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Drops every parameter for which `keep` is false.
    pub fn retain(&mut self, mut keep: impl FnMut(&Param<T>) -> bool) {
        self.params.retain(|p| keep(p));
        self.index = self.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// CRC-32 over the bit patterns of the selected parameters, in order.
    pub fn checksum(&self, mut select: impl FnMut(&Param<T>) -> bool) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for p in self.params.iter().filter(|p| select(p)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(&Scalar::to_f64(*v).to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                    head: p.head,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, rng: &mut impl Rng) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::full(&spec.shape, T::one()),
        Init::GlorotUniform { fan_in, fan_out } => {
            let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            let data = (0..spec.numel())
                .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
                .collect();
            Tensor::from_parts(spec.shape.clone(), data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(name: &str, init: Init) -> ParamSpec {
        ParamSpec {
            name: name.into(),
            shape: vec![4, 5],
            trainable: true,
            init,
        }
    }

    #[test]
    fn glorot_values_respect_limit() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = spec("w", Init::GlorotUniform { fan_in: 4, fan_out: 5 });
        store.init_from_specs(&[s], false, &mut rng).unwrap();
        let limit = (6.0f32 / 9.0).sqrt();
        assert!(store.value("w").unwrap().data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn duplicate_names_rejected_and_retain_reindexes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store
            .init_from_specs(&[spec("a", Init::Zeros), spec("b", Init::Ones)], false, &mut rng)
            .unwrap();
        assert!(store.init_from_specs(&[spec("a", Init::Zeros)], false, &mut rng).is_err());
        store.retain(|p| p.name == "b");
        assert_eq!(store.len(), 1);
        assert_eq!(store.value("b").unwrap().data()[0], 1.0);
        assert!(store.get("a").is_none());
    }

    #[test]
    fn checksum_sees_single_bit_changes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.init_from_specs(&[spec("a", Init::Zeros)], false, &mut rng).unwrap();
        let before = store.checksum(|_| true);
        store.get_mut("a").unwrap().value.data_mut()[3] = f32::from_bits(1);
        assert_ne!(before, store.checksum(|_| true));
    }
}
