//! Minimal f64 neural-network substrate: a named parameter store and layers
//! with explicit forward/backward passes over ndarray tensors.
//!
//! Feature tensors are laid out (N, C, T, H, W). Everything is double
//! precision so gradients can be checked against central finite differences
//! and checkpoints round-trip bit-exactly.

pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

use ndarray::{Array5, ArrayD, ArrayViewD};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Feature map batch: (N, C, T, H, W).
pub type Feat = Array5<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel; participates in the orthogonal penalty.
    ConvKernel,
    Bias,
    Scale,
    Shift,
    LinearWeight,
    /// Normalization running statistics: persisted but never optimized.
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

/// Flat, insertion-ordered store of every learnable tensor and running
/// statistic in a model. The insertion order is deterministic and defines
/// the serialization and update order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<ParamSlot>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: ArrayD<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = ArrayD::zeros(value.raw_dim());
        self.slots.push(ParamSlot {
            name,
            kind,
            value,
            grad,
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slot(&self, id: ParamId) -> &ParamSlot {
        &self.slots[id.0]
    }

    pub fn slots(&self) -> impl Iterator<Item = (ParamId, &ParamSlot)> {
        self.slots.iter().enumerate().map(|(i, s)| (ParamId(i), s))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &ArrayD<f64> {
        &self.slots[id.0].grad
    }

    pub fn add_to_grad(&mut self, id: ParamId, delta: ArrayViewD<f64>) {
        let slot = &mut self.slots[id.0];
        debug_assert_eq!(slot.grad.shape(), delta.shape());
        slot.grad += &delta;
    }

    pub fn zero_grads(&mut self) {
        for slot in &mut self.slots {
            slot.grad.fill(0.0);
        }
    }

    /// Count of trainable scalar parameters (running stats excluded).
    pub fn trainable_param_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.kind.trainable())
            .map(|s| s.value.len())
            .sum()
    }

    /// SHA-256 over names, kinds, shapes, and raw little-endian values, in
    /// slot order. Used for determinism checks.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for slot in &self.slots {
            hasher.update(slot.name.as_bytes());
            hasher.update([slot.kind as u8]);
            for &d in slot.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in slot.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Every parameter must be finite; used when loading checkpoints.
    pub fn validate_finite(&self) -> Result<()> {
        for slot in &self.slots {
            if slot.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter {} contains non-finite values",
                    slot.name
                )));
            }
        }
        Ok(())
    }
}

/// Forward-pass mode. `Train` normalizes with batch statistics;
/// `update_stats: false` keeps the pass pure for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train { update_stats: bool },
    Eval,
}

impl Phase {
    pub fn train() -> Self {
        Phase::Train { update_stats: true }
    }

    pub fn is_train(self) -> bool {
        matches!(self, Phase::Train { .. })
    }
}

/// He-style normal initialization with std sqrt(2 / fan_in).
pub fn he_init(rng: &mut ChaCha12Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), vals).unwrap()
}

pub fn relu(x: &Feat) -> (Feat, Feat) {
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (x * &mask, mask)
}

pub fn relu_backward(mask: &Feat, gy: &Feat) -> Feat {
    gy * mask
}

pub fn sigmoid(x: &Feat) -> Feat {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given its forward output.
pub fn sigmoid_backward(y: &Feat, gy: &Feat) -> Feat {
    gy * &y.mapv(|s| s * (1.0 - s))
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    /// Central finite differences of `loss` w.r.t. one parameter slot.
    pub fn finite_diff_param(
        store: &mut ParamStore,
        id: ParamId,
        h: f64,
        mut loss: impl FnMut(&mut ParamStore) -> f64,
    ) -> ArrayD<f64> {
        let n = store.value(id).len();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = store.value(id).as_slice().unwrap()[i];
            store.value_mut(id).as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss(store);
            store.value_mut(id).as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(store);
            store.value_mut(id).as_slice_mut().unwrap()[i] = orig;
            grad[i] = (lp - lm) / (2.0 * h);
        }
        ArrayD::from_shape_vec(store.value(id).raw_dim(), grad).unwrap()
    }

    /// Central finite differences of `loss` w.r.t. an input tensor.
    pub fn finite_diff_input<D: ndarray::Dimension>(
        x: &mut ndarray::Array<f64, D>,
        h: f64,
        mut loss: impl FnMut(&ndarray::Array<f64, D>) -> f64,
    ) -> ndarray::Array<f64, D> {
        let mut grad = ndarray::Array::<f64, D>::zeros(x.raw_dim());
        let n = x.len();
        for i in 0..n {
            let orig = x.as_slice_mut().unwrap()[i];
            x.as_slice_mut().unwrap()[i] = orig + h;
            let lp = loss(x);
            x.as_slice_mut().unwrap()[i] = orig - h;
            let lm = loss(x);
            x.as_slice_mut().unwrap()[i] = orig;
            grad.as_slice_mut().unwrap()[i] = (lp - lm) / (2.0 * h);
        }
        grad
    }

    /// Max relative error between two gradient tensors.
    pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    pub fn rng(seed: u64) -> ChaCha12Rng {
        use rand::SeedableRng;
        ChaCha12Rng::seed_from_u64(seed)
    }

    pub fn random_feat(rng: &mut ChaCha12Rng, shape: (usize, usize, usize, usize, usize)) -> Feat {
        Feat::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }
}
