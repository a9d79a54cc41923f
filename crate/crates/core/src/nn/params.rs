//! Named parameter tensors with ownership and partition tags.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::{SpecKind, Stack, KERNEL};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Which side of the feedback link owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    /// UE side.
    Encoder,
    /// BS side.
    Decoder,
}

impl Partition {
    pub fn tag(self) -> u8 {
        match self {
            Partition::Encoder => 0,
            Partition::Decoder => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Partition::Encoder),
            1 => Some(Partition::Decoder),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T = f32> {
    pub tensor: Tensor<T>,
    pub layer: String,
    pub partition: Partition,
    pub kind: SpecKind,
    /// Excluded from gradient computation and optimizer updates.
    pub frozen: bool,
}

impl<T> ParamEntry<T> {
    /// Receives gradients: not a running statistic and not frozen.
    pub fn trainable(&self) -> bool {
        !self.kind.is_buffer() && !self.frozen
    }
}

/// Ordered name -> tensor map. Iteration order is insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: ParamEntry<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Integrity(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Entries belonging to one partition, in order.
    pub fn partition(&self, partition: Partition) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| e.partition == partition)
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    pub fn set_frozen(&mut self, partition: Partition, frozen: bool) {
        for e in self.entries.values_mut() {
            if e.partition == partition {
                e.frozen = frozen;
            }
        }
    }

    /// Overwrites tensors of matching names with those in `other`. All names
    /// and dims are validated before anything is written.
    pub fn overwrite_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, src) in other.iter() {
            let dst = self
                .entries
                .get(name)
                .ok_or_else(|| Error::Integrity(format!("unexpected parameter `{name}`")))?;
            if dst.tensor.dims() != src.tensor.dims() {
                return Err(Error::Integrity(format!(
                    "`{name}` has dims {:?}, expected {:?}",
                    src.tensor.dims(),
                    dst.tensor.dims()
                )));
            }
            if dst.partition != src.partition {
                return Err(Error::Integrity(format!("`{name}` has the wrong partition tag")));
            }
        }
        for (name, src) in other.iter() {
            self.entries[name].tensor = src.tensor.clone();
        }
        Ok(())
    }

    /// Trainable element count (running statistics excluded).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| !e.kind.is_buffer())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            layer: e.layer.clone(),
                            partition: e.partition,
                            kind: e.kind,
                            frozen: e.frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of every tensor (used for the freeze invariant).
    pub fn bit_equal(&self, other: &ParamSet<T>) -> bool
    where
        T: BitRepr,
    {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(k, e)| {
                other.entries.get(k).is_some_and(|o| {
                    o.tensor.dims() == e.tensor.dims()
                        && o.tensor
                            .data()
                            .iter()
                            .zip(e.tensor.data())
                            .all(|(a, b)| a.bits() == b.bits())
                })
            })
    }
}

pub trait BitRepr {
    fn bits(&self) -> u64;
}

impl BitRepr for f32 {
    fn bits(&self) -> u64 {
        self.to_bits() as u64
    }
}

impl BitRepr for f64 {
    fn bits(&self) -> u64 {
        self.to_bits()
    }
}

/// Seeded initialization: uniform Glorot for dense/conv weights, zero biases,
/// unit scales, and running statistics (0, 1).
pub fn init_params(stack: &Stack, partition: Partition, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for spec in stack.param_specs() {
        let tensor = match spec.kind {
            SpecKind::Weight => {
                let (fan_in, fan_out) = if spec.dims.len() == 4 {
                    let area = KERNEL * KERNEL;
                    (spec.dims[1] * area, spec.dims[0] * area)
                } else {
                    (spec.dims[1], spec.dims[0])
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                Tensor::from_fn(&spec.dims, |_| rng.random_range(-limit..limit))
            }
            SpecKind::Bias | SpecKind::RunningMean => Tensor::zeros(&spec.dims),
            SpecKind::Scale | SpecKind::RunningVar => Tensor::filled(&spec.dims, 1.0),
        };
        params
            .insert(
                spec.name,
                ParamEntry {
                    tensor,
                    layer: spec.layer,
                    partition,
                    kind: spec.kind,
                    frozen: false,
                },
            )
            .expect("stack validated unique names");
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::Layer;

    #[test]
    fn init_is_seeded_and_bounded() {
        let stack = Stack::new(&[6], vec![Layer::dense("fc", 6, 4)]).unwrap();
        let a = init_params(&stack, Partition::Encoder, 7);
        let b = init_params(&stack, Partition::Encoder, 7);
        let c = init_params(&stack, Partition::Encoder, 8);
        assert!(a.bit_equal(&b));
        assert!(!a.bit_equal(&c));
        let limit = (6.0f32 / 10.0).sqrt();
        assert!(a.tensor("fc.weight").unwrap().data().iter().all(|w| w.abs() <= limit));
        assert!(a.tensor("fc.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn overwrite_validates_before_writing() {
        let stack = Stack::new(&[3], vec![Layer::dense("a", 3, 3), Layer::dense("b", 3, 2)]).unwrap();
        let mut dst = init_params(&stack, Partition::Encoder, 1);
        let before = dst.clone();
        let mut src = init_params(&stack, Partition::Encoder, 2);
        src.get_mut("b.bias").unwrap().tensor = Tensor::zeros(&[5]);
        assert!(dst.overwrite_from(&src).is_err());
        assert!(dst.bit_equal(&before));
    }

    #[test]
    fn batchnorm_buffers_not_counted() {
        let stack = Stack::new(&[4, 2, 2], vec![Layer::batchnorm("bn", 4)]).unwrap();
        let p = init_params(&stack, Partition::Decoder, 0);
        assert_eq!(p.len(), 4);
        assert_eq!(p.trainable_count(), 8);
    }
}
