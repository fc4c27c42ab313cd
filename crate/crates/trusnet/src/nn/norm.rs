//! Batch and instance normalization for (N, C, T, H, W) tensors.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};

use super::{Feat, ParamId, ParamKind, ParamStore, Phase};

/// Per-channel batch normalization over (N, T, H, W) with running statistics
/// for evaluation mode.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BnCache {
    train: bool,
    xhat: Feat,
    invstd: Array1<f64>,
}

impl BatchNorm3d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> BatchNorm3d {
        let ones = ArrayD::from_elem(IxDyn(&[channels]), 1.0);
        let zeros = ArrayD::zeros(IxDyn(&[channels]));
        BatchNorm3d {
            scale: store.add(format!("{name}.scale"), ParamKind::Scale, ones.clone()),
            shift: store.add(format!("{name}.shift"), ParamKind::Shift, zeros.clone()),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::RunningMean, zeros),
            running_var: store.add(format!("{name}.running_var"), ParamKind::RunningVar, ones),
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, store: &mut ParamStore, x: &Feat, phase: Phase) -> (Feat, BnCache) {
        let (n, c, t, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let m = (n * t * h * w) as f64;
        let (mean, invstd, train) = match phase {
            Phase::Train { update_stats } => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ci in 0..c {
                    let view = x.index_axis(Axis(1), ci);
                    let mu = view.sum() / m;
                    let v = view.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / m;
                    mean[ci] = mu;
                    var[ci] = v;
                }
                if update_stats {
                    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                    for ci in 0..c {
                        let rm = &mut store.value_mut(self.running_mean)[[ci]];
                        *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ci];
                    }
                    for ci in 0..c {
                        let rv = &mut store.value_mut(self.running_var)[[ci]];
                        *rv = (1.0 - self.momentum) * *rv + self.momentum * var[ci] * unbias;
                    }
                }
                let invstd = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
                (mean, invstd, true)
            }
            Phase::Eval => {
                let mean = Array1::from_iter((0..c).map(|ci| store.value(self.running_mean)[[ci]]));
                let invstd = Array1::from_iter(
                    (0..c).map(|ci| 1.0 / (store.value(self.running_var)[[ci]] + self.eps).sqrt()),
                );
                (mean, invstd, false)
            }
        };

        let mut xhat = x.clone();
        for ci in 0..c {
            let mut view = xhat.index_axis_mut(Axis(1), ci);
            let (mu, is) = (mean[ci], invstd[ci]);
            view.mapv_inplace(|v| (v - mu) * is);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let gamma = store.value(self.scale)[[ci]];
            let beta = store.value(self.shift)[[ci]];
            let mut view = y.index_axis_mut(Axis(1), ci);
            view.mapv_inplace(|v| gamma * v + beta);
        }
        (y, BnCache { train, xhat, invstd })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BnCache, gy: &Feat) -> Feat {
        let (n, c, t, h, w) = gy.dim();
        let m = (n * t * h * w) as f64;
        let mut dscale = Array1::zeros(c);
        let mut dshift = Array1::zeros(c);
        let mut dx = Feat::zeros(gy.raw_dim());
        for ci in 0..c {
            let gyv = gy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_gy = gyv.sum();
            let sum_gy_xhat = gyv.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum::<f64>();
            dshift[ci] = sum_gy;
            dscale[ci] = sum_gy_xhat;
            let gamma = store.value(self.scale)[[ci]];
            let is = cache.invstd[ci];
            let mut dxv = dx.index_axis_mut(Axis(1), ci);
            if cache.train {
                let k = gamma * is / m;
                ndarray::Zip::from(&mut dxv).and(&gyv).and(&xh).for_each(|d, &g, &x| {
                    *d = k * (m * g - sum_gy - x * sum_gy_xhat);
                });
            } else {
                let k = gamma * is;
                ndarray::Zip::from(&mut dxv).and(&gyv).for_each(|d, &g| *d = k * g);
            }
        }
        store.add_to_grad(self.scale, dscale.into_dyn().view());
        store.add_to_grad(self.shift, dshift.into_dyn().view());
        dx
    }
}

/// Instance normalization: statistics per (sample, channel) over (T, H, W),
/// identical in training and evaluation. Spatially constant maps normalize
/// to zero, so the output degenerates to the affine shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub channels: usize,
    pub eps: f64,
}

pub struct InCache {
    xhat: Feat,
    invstd: Array2<f64>,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> InstanceNorm {
        InstanceNorm {
            scale: store.add(
                format!("{name}.scale"),
                ParamKind::Scale,
                ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            ),
            shift: store.add(
                format!("{name}.shift"),
                ParamKind::Shift,
                ArrayD::zeros(IxDyn(&[channels])),
            ),
            channels,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Feat) -> (Feat, InCache) {
        let (n, c, t, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let m = (t * h * w) as f64;
        let mut invstd = Array2::zeros((n, c));
        let mut xhat = x.clone();
        for ni in 0..n {
            for ci in 0..c {
                let mut view = xhat.index_axis_mut(Axis(0), ni);
                let mut view = view.index_axis_mut(Axis(0), ci);
                let mu = view.sum() / m;
                let var = view.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
                let is = 1.0 / (var + self.eps).sqrt();
                invstd[[ni, ci]] = is;
                view.mapv_inplace(|v| (v - mu) * is);
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let gamma = store.value(self.scale)[[ci]];
            let beta = store.value(self.shift)[[ci]];
            let mut view = y.index_axis_mut(Axis(1), ci);
            view.mapv_inplace(|v| gamma * v + beta);
        }
        (y, InCache { xhat, invstd })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &InCache, gy: &Feat) -> Feat {
        let (n, c, t, h, w) = gy.dim();
        let m = (t * h * w) as f64;
        let mut dscale = Array1::zeros(c);
        let mut dshift = Array1::zeros(c);
        let mut dx = Feat::zeros(gy.raw_dim());
        for ni in 0..n {
            for ci in 0..c {
                let gyv = gy.index_axis(Axis(0), ni);
                let gyv = gyv.index_axis(Axis(0), ci);
                let xh = cache.xhat.index_axis(Axis(0), ni);
                let xh = xh.index_axis(Axis(0), ci);
                let sum_gy = gyv.sum();
                let sum_gy_xhat = gyv.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum::<f64>();
                dshift[ci] += sum_gy;
                dscale[ci] += sum_gy_xhat;
                let gamma = store.value(self.scale)[[ci]];
                let k = gamma * cache.invstd[[ni, ci]] / m;
                let mut dxv = dx.index_axis_mut(Axis(0), ni);
                let mut dxv = dxv.index_axis_mut(Axis(0), ci);
                ndarray::Zip::from(&mut dxv).and(&gyv).and(&xh).for_each(|d, &g, &x| {
                    *d = k * (m * g - sum_gy - x * sum_gy_xhat);
                });
            }
        }
        store.add_to_grad(self.scale, dscale.into_dyn().view());
        store.add_to_grad(self.shift, dshift.into_dyn().view());
        dx
    }
}
