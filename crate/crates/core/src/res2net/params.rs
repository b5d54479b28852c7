use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Role of a named tensor, derived from its name suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    FcWeight,
    FcBias,
    BnGamma,
    BnBeta,
    RunningMean,
    RunningVar,
    /// Anything else stored alongside the weights (e.g. input statistics).
    Buffer,
}

impl ParamKind {
    pub fn of(name: &str) -> Self {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        match leaf {
            "weight" if name.contains(".fc") || name.starts_with("fc") => ParamKind::FcWeight,
            "weight" => ParamKind::ConvWeight,
            "bias" => ParamKind::FcBias,
            "gamma" => ParamKind::BnGamma,
            "beta" => ParamKind::BnBeta,
            "running_mean" => ParamKind::RunningMean,
            "running_var" => ParamKind::RunningVar,
            _ => ParamKind::Buffer,
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(
            self,
            ParamKind::RunningMean | ParamKind::RunningVar | ParamKind::Buffer
        )
    }

    /// Weight decay applies to convolution and fully-connected weights only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::FcWeight)
    }

    /// Rank a tensor of this kind is stored with on disk.
    pub fn natural_rank(self) -> u8 {
        match self {
            ParamKind::ConvWeight => 4,
            ParamKind::FcWeight => 2,
            _ => 1,
        }
    }
}

/// One entry of a parameter layout: name and shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Shape,
}

impl ParamSlot {
    pub fn new(name: impl Into<String>, shape: Shape) -> Self {
        Self {
            name: name.into(),
            shape,
        }
    }

    pub fn kind(&self) -> ParamKind {
        ParamKind::of(&self.name)
    }
}

/// Named tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total element count of trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(n, _)| ParamKind::of(n).trainable())
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Draws initial values for a parameter layout.
///
/// Weights ~ N(0, 2 / fan_out) with `fan_out = C_out · k²` (convolutions) or
/// `C_out` (fully connected); BN gamma 1, beta 0, running mean 0, running
/// variance 1; biases 0.
pub fn init_params(layout: &[ParamSlot], seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for slot in layout {
        let [c_out, _, kh, kw] = slot.shape;
        let t = match slot.kind() {
            ParamKind::ConvWeight | ParamKind::FcWeight => {
                let fan_out = (c_out * kh * kw).max(1);
                let normal =
                    Normal::new(0.0f32, (2.0 / fan_out as f32).sqrt()).expect("finite std");
                Tensor::from_fn(slot.shape, |_, _, _, _| normal.sample(&mut rng))
            }
            ParamKind::BnGamma | ParamKind::RunningVar => Tensor::full(slot.shape, 1.0),
            _ => Tensor::zeros(slot.shape),
        };
        store.insert(slot.name.clone(), t);
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_from_names() {
        assert_eq!(
            ParamKind::of("stage1.0.k2.conv.weight"),
            ParamKind::ConvWeight
        );
        assert_eq!(ParamKind::of("fc.weight"), ParamKind::FcWeight);
        assert_eq!(ParamKind::of("stage2.1.se.fc1.weight"), ParamKind::FcWeight);
        assert_eq!(ParamKind::of("stage2.1.se.fc1.bias"), ParamKind::FcBias);
        assert_eq!(ParamKind::of("stem.bn.running_var"), ParamKind::RunningVar);
        assert_eq!(ParamKind::of("data.mean"), ParamKind::Buffer);
        assert!(!ParamKind::BnGamma.decays());
        assert!(ParamKind::BnGamma.trainable());
        assert!(!ParamKind::RunningMean.trainable());
    }

    #[test]
    fn init_is_seeded_and_follows_fan_out() {
        let layout = vec![
            ParamSlot::new("a.conv.weight", [64, 32, 3, 3]),
            ParamSlot::new("a.bn.gamma", [64, 1, 1, 1]),
            ParamSlot::new("a.bn.running_var", [64, 1, 1, 1]),
            ParamSlot::new("a.bn.beta", [64, 1, 1, 1]),
        ];
        let a = init_params(&layout, 1);
        assert_eq!(a, init_params(&layout, 1));
        assert_ne!(a, init_params(&layout, 2));
        let w = a.get("a.conv.weight").unwrap();
        let var = w.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / w.len() as f64;
        let want = 2.0 / (64.0 * 9.0);
        assert!((var - want).abs() / want < 0.1, "{var} vs {want}");
        assert!(a
            .get("a.bn.gamma")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(a.get("a.bn.beta").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(a.trainable_count(), 64 * 32 * 9 + 128);
    }
}
