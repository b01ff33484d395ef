//! Named parameter storage with frozen/trainable partition tags.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    BaseFrozen,
    AdapterTrainable,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::BaseFrozen => "base_frozen",
            Partition::AdapterTrainable => "adapter_trainable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "base_frozen" => Some(Partition::BaseFrozen),
            "adapter_trainable" => Some(Partition::AdapterTrainable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub partition: Partition,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

/// Weight initializers. All draws come from the caller's RNG so every value is
/// traceable to a seeded stream.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
}

impl Init {
    pub fn sample<F: Float, R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<F> {
        match self {
            Init::Zeros => vec![F::zero(); n],
            Init::Ones => vec![F::one(); n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    F::lit(z * std)
                })
                .collect(),
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break F::lit(z * std);
                    }
                })
                .collect(),
        }
    }
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    /// Registers a new parameter. Panics on duplicate names: every parameter
    /// must appear exactly once.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, partition: Partition) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, tensor, partition });
        id
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        partition: Partition,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = init.sample(n, rng);
        self.insert(name, Tensor::new(shape.to_vec(), data), partition)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
    }

    pub fn ids_in(&self, partition: Partition) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.partition == partition).map(|(id, _)| id).collect()
    }

    pub fn names_in(&self, partition: Partition) -> BTreeSet<String> {
        self.iter().filter(|(_, p)| p.partition == partition).map(|(_, p)| p.name.clone()).collect()
    }

    pub fn count_in(&self, partition: Partition) -> usize {
        self.iter().filter(|(_, p)| p.partition == partition).map(|(_, p)| p.tensor.numel()).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), tensor: p.tensor.cast(), partition: p.partition })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values of every parameter present in `other` by name.
    /// Shapes must match; returns the number of parameters copied.
    pub fn copy_from(&mut self, other: &ParamStore<F>) -> Result<usize, String> {
        let mut copied = 0;
        for p in &other.params {
            if let Some(id) = self.id(&p.name) {
                let dst = &mut self.params[id.0];
                if dst.tensor.shape != p.tensor.shape {
                    return Err(format!(
                        "shape mismatch for {}: {:?} vs {:?}",
                        p.name, dst.tensor.shape, p.tensor.shape
                    ));
                }
                dst.tensor.data.copy_from_slice(&p.tensor.data);
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Bitwise comparison of all parameters in one partition.
    pub fn partition_bit_eq(&self, other: &ParamStore<F>, partition: Partition) -> bool {
        let mine: Vec<_> = self.iter().filter(|(_, p)| p.partition == partition).collect();
        let theirs: Vec<_> = other.iter().filter(|(_, p)| p.partition == partition).collect();
        mine.len() == theirs.len()
            && mine
                .iter()
                .zip(&theirs)
                .all(|((_, a), (_, b))| a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = Init::TruncNormal(0.02).sample(10_000, &mut rng);
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-15));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(&[1]), Partition::BaseFrozen);
        s.insert("a", Tensor::zeros(&[1]), Partition::BaseFrozen);
    }
}
