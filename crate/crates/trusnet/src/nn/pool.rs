//! Max pooling and global average pooling.

use ndarray::{Array2, Array5};

use super::Feat;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MaxPool3d {
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

pub struct PoolCache {
    /// Flat source index into the input for every output element; ties pick
    /// the first window position in scan order.
    argmax: Array5<usize>,
    in_dim: (usize, usize, usize, usize, usize),
}

impl MaxPool3d {
    pub fn new(
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> MaxPool3d {
        MaxPool3d {
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_dims(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let dim = |d: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let padded = d + 2 * p;
            if padded < k {
                return Err(Error::Invalid(format!(
                    "pool input dim {d} with padding {p} smaller than kernel {k}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        Ok((
            dim(input.0, self.kernel.0, self.stride.0, self.padding.0)?,
            dim(input.1, self.kernel.1, self.stride.1, self.padding.1)?,
            dim(input.2, self.kernel.2, self.stride.2, self.padding.2)?,
        ))
    }

    pub fn forward(&self, x: &Feat) -> Result<(Feat, PoolCache)> {
        let (n, c, t, h, w) = x.dim();
        let (to, ho, wo) = self.out_dims((t, h, w))?;
        let mut y = Feat::zeros((n, c, to, ho, wo));
        let mut argmax = Array5::<usize>::zeros((n, c, to, ho, wo));
        let xs = x.as_slice().unwrap();
        let x_t = h * w;
        let x_c = t * x_t;
        let x_n = c * x_c;
        for ni in 0..n {
            for ci in 0..c {
                for toi in 0..to {
                    for hoi in 0..ho {
                        for woi in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = usize::MAX;
                            for kt in 0..self.kernel.0 {
                                let ti = (toi * self.stride.0 + kt) as isize
                                    - self.padding.0 as isize;
                                if ti < 0 || ti >= t as isize {
                                    continue;
                                }
                                for kh in 0..self.kernel.1 {
                                    let hi = (hoi * self.stride.1 + kh) as isize
                                        - self.padding.1 as isize;
                                    if hi < 0 || hi >= h as isize {
                                        continue;
                                    }
                                    for kw in 0..self.kernel.2 {
                                        let wi = (woi * self.stride.2 + kw) as isize
                                            - self.padding.2 as isize;
                                        if wi < 0 || wi >= w as isize {
                                            continue;
                                        }
                                        let idx = ni * x_n
                                            + ci * x_c
                                            + ti as usize * x_t
                                            + hi as usize * w
                                            + wi as usize;
                                        if xs[idx] > best {
                                            best = xs[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                            }
                            y[[ni, ci, toi, hoi, woi]] = best;
                            argmax[[ni, ci, toi, hoi, woi]] = best_idx;
                        }
                    }
                }
            }
        }
        Ok((
            y,
            PoolCache {
                argmax,
                in_dim: (n, c, t, h, w),
            },
        ))
    }

    pub fn backward(&self, cache: &PoolCache, gy: &Feat) -> Feat {
        let mut dx = Feat::zeros(cache.in_dim);
        let ds = dx.as_slice_mut().unwrap();
        for (g, &idx) in gy.iter().zip(cache.argmax.iter()) {
            ds[idx] += g;
        }
        dx
    }
}

/// Mean over (T, H, W): (N, C, T, H, W) -> (N, C).
pub fn global_avg_pool(x: &Feat) -> (Array2<f64>, (usize, usize, usize, usize, usize)) {
    let dim = x.dim();
    let (n, c, t, h, w) = dim;
    let m = (t * h * w) as f64;
    let mut y = Array2::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let v = x.index_axis(ndarray::Axis(0), ni);
            let v = v.index_axis(ndarray::Axis(0), ci);
            y[[ni, ci]] = v.sum() / m;
        }
    }
    (y, dim)
}

pub fn global_avg_pool_backward(
    gy: &Array2<f64>,
    in_dim: (usize, usize, usize, usize, usize),
) -> Feat {
    let (n, c, t, h, w) = in_dim;
    let m = (t * h * w) as f64;
    let mut dx = Feat::zeros(in_dim);
    for ni in 0..n {
        for ci in 0..c {
            let g = gy[[ni, ci]] / m;
            let mut v = dx.index_axis_mut(ndarray::Axis(0), ni);
            let mut v = v.index_axis_mut(ndarray::Axis(0), ci);
            v.fill(g);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_support::*;

    #[test]
    fn maxpool_forward_small_case() {
        // 1x1x1x2x2 windows of a 4x4 plane with 2x2 kernel stride 2.
        let x = Feat::from_shape_vec(
            (1, 1, 1, 4, 4),
            vec![
                1.0, 2.0, 5.0, 4.0, //
                3.0, 0.0, 1.0, 1.0, //
                0.0, 0.0, 9.0, 8.0, //
                2.0, 7.0, 6.0, 9.0,
            ],
        )
        .unwrap();
        let pool = MaxPool3d::new((1, 2, 2), (1, 2, 2), (0, 0, 0));
        let (y, _) = pool.forward(&x).unwrap();
        assert_eq!(
            y.as_slice().unwrap(),
            &[3.0, 5.0, 7.0, 9.0],
            "window maxima"
        );
    }

    #[test]
    fn maxpool_gradient_matches_fd() {
        let mut rng = rng(21);
        let pool = MaxPool3d::new((1, 3, 3), (1, 2, 2), (0, 1, 1));
        let mut x = random_feat(&mut rng, (2, 2, 2, 6, 6));
        let proj = random_feat(&mut rng, (2, 2, 2, 3, 3));
        let (y, cache) = pool.forward(&x).unwrap();
        assert_eq!(y.dim(), proj.dim());
        let dx = pool.backward(&cache, &proj);
        let fd = finite_diff_input(&mut x, 1e-7, |xv| {
            let (y, _) = pool.forward(xv).unwrap();
            (&y * &proj).sum()
        });
        assert!(max_rel_error(&dx.into_dyn(), &fd.into_dyn()) < 1e-5);
    }

    #[test]
    fn gap_roundtrip_gradient() {
        let mut rng = rng(22);
        let mut x = random_feat(&mut rng, (2, 3, 2, 2, 2));
        let proj = Array2::from_shape_fn((2, 3), |(a, b)| (a + b) as f64 - 1.5);
        let (y, dim) = global_avg_pool(&x);
        assert_eq!(y.dim(), (2, 3));
        let dx = global_avg_pool_backward(&proj, dim);
        let fd = finite_diff_input(&mut x, 1e-7, |xv| {
            let (y, _) = global_avg_pool(xv);
            (&y * &proj).sum()
        });
        assert!(max_rel_error(&dx.into_dyn(), &fd.into_dyn()) < 1e-6);
    }
}
