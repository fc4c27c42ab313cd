//! Fully connected layer.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha12Rng;

use super::{he_init, ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId, // (out_features, in_features)
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Linear {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                ParamKind::LinearWeight,
                he_init(rng, &[out_features, in_features], in_features),
            ),
            bias: store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                ArrayD::zeros(IxDyn(&[out_features])),
            ),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        let w = store
            .value(self.weight)
            .view()
            .into_shape_with_order((self.out_features, self.in_features))
            .unwrap();
        let b = store
            .value(self.bias)
            .view()
            .into_shape_with_order((1, self.out_features))
            .unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LinearCache,
        gy: &Array2<f64>,
    ) -> Array2<f64> {
        let dw = gy.t().dot(&cache.input);
        store.add_to_grad(self.weight, dw.into_dyn().view());
        let db = gy.sum_axis(Axis(0));
        store.add_to_grad(self.bias, db.into_dyn().view());
        let w = store
            .value(self.weight)
            .view()
            .into_shape_with_order((self.out_features, self.in_features))
            .unwrap()
            .to_owned();
        gy.dot(&w)
    }
}
