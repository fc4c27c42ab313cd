//! 3-D convolution via im2col + matrix multiplication.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha12Rng;

use super::{he_init, Feat, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

pub struct ConvCache {
    input: Feat,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
        with_bias: bool,
    ) -> Conv3d {
        let fan_in = in_channels * kernel.0 * kernel.1 * kernel.2;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::ConvKernel,
            he_init(
                rng,
                &[out_channels, in_channels, kernel.0, kernel.1, kernel.2],
                fan_in,
            ),
        );
        let bias = with_bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                ArrayD::zeros(IxDyn(&[out_channels])),
            )
        });
        Conv3d {
            weight,
            bias,
            in_channels,
            out_channels,
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
                    "conv input dim {d} with padding {p} smaller than kernel {k}"
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

    pub fn forward(&self, store: &ParamStore, x: &Feat) -> Result<(Feat, ConvCache)> {
        let (n, cin, t, h, w) = x.dim();
        if cin != self.in_channels {
            return Err(Error::Invalid(format!(
                "conv expected {} input channels, got {cin}",
                self.in_channels
            )));
        }
        let out = self.out_dims((t, h, w))?;
        let k_total = self.in_channels * self.kernel.0 * self.kernel.1 * self.kernel.2;
        let col = im2col(x, self.kernel, self.stride, self.padding, out);
        let weight = store.value(self.weight);
        let w_mat = weight
            .view()
            .into_shape_with_order((self.out_channels, k_total))
            .unwrap();
        let mut out_mat = col.dot(&w_mat.t()); // (rows, cout)
        if let Some(bias) = self.bias {
            let b = store.value(bias);
            let b_row = b.view().into_shape_with_order((1, self.out_channels)).unwrap();
            out_mat += &b_row;
        }
        let y = out_mat
            .into_shape_with_order((n, out.0, out.1, out.2, self.out_channels))
            .unwrap()
            .permuted_axes([0, 4, 1, 2, 3])
            .as_standard_layout()
            .to_owned();
        Ok((y, ConvCache { input: x.clone() }))
    }

    /// Accumulates weight/bias gradients into the store and returns the
    /// input gradient. The im2col matrix is rebuilt rather than cached.
    pub fn backward(&self, store: &mut ParamStore, cache: &ConvCache, gy: &Feat) -> Feat {
        let x = &cache.input;
        let (n, _, t, h, w) = x.dim();
        let (_, cout, to, ho, wo) = gy.dim();
        debug_assert_eq!(cout, self.out_channels);
        let k_total = self.in_channels * self.kernel.0 * self.kernel.1 * self.kernel.2;
        let col = im2col(x, self.kernel, self.stride, self.padding, (to, ho, wo));
        let gy_mat = gy
            .view()
            .permuted_axes([0, 2, 3, 4, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n * to * ho * wo, cout))
            .unwrap();

        let dw = gy_mat.t().dot(&col); // (cout, K)
        store.add_to_grad(
            self.weight,
            dw.into_shape_with_order(IxDyn(&[
                self.out_channels,
                self.in_channels,
                self.kernel.0,
                self.kernel.1,
                self.kernel.2,
            ]))
            .unwrap()
            .view(),
        );
        if let Some(bias) = self.bias {
            let db = gy_mat.sum_axis(Axis(0));
            store.add_to_grad(bias, db.into_dyn().view());
        }

        let dcol = gy_mat.dot(
            &store
                .value(self.weight)
                .view()
                .into_shape_with_order((self.out_channels, k_total))
                .unwrap(),
        );
        col2im(
            &dcol,
            (n, self.in_channels, t, h, w),
            self.kernel,
            self.stride,
            self.padding,
            (to, ho, wo),
        )
    }
}

fn im2col(
    x: &Feat,
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
    out: (usize, usize, usize),
) -> Array2<f64> {
    let (n, cin, t, h, w) = x.dim();
    let (kt, kh, kw) = kernel;
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = padding;
    let (to, ho, wo) = out;
    let k_total = cin * kt * kh * kw;
    let rows = n * to * ho * wo;
    let mut col = Array2::<f64>::zeros((rows, k_total));
    let x_std = x.as_standard_layout();
    let xs = x_std.as_slice().unwrap();
    let cs = col.as_slice_mut().unwrap();
    let x_t = h * w;
    let x_c = t * x_t;
    let x_n = cin * x_c;
    let mut row = 0usize;
    for ni in 0..n {
        for toi in 0..to {
            for hoi in 0..ho {
                for woi in 0..wo {
                    let row_off = row * k_total;
                    let mut k = 0usize;
                    for ci in 0..cin {
                        for kti in 0..kt {
                            let ti = (toi * st + kti) as isize - pt as isize;
                            if ti < 0 || ti >= t as isize {
                                k += kh * kw;
                                continue;
                            }
                            for khi in 0..kh {
                                let hi = (hoi * sh + khi) as isize - ph as isize;
                                if hi < 0 || hi >= h as isize {
                                    k += kw;
                                    continue;
                                }
                                let base =
                                    ni * x_n + ci * x_c + ti as usize * x_t + hi as usize * w;
                                for kwi in 0..kw {
                                    let wi = (woi * sw + kwi) as isize - pw as isize;
                                    if wi >= 0 && wi < w as isize {
                                        cs[row_off + k] = xs[base + wi as usize];
                                    }
                                    k += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

fn col2im(
    dcol: &Array2<f64>,
    x_dim: (usize, usize, usize, usize, usize),
    kernel: (usize, usize, usize),
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
    out: (usize, usize, usize),
) -> Feat {
    let (n, cin, t, h, w) = x_dim;
    let (kt, kh, kw) = kernel;
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = padding;
    let (to, ho, wo) = out;
    let k_total = cin * kt * kh * kw;
    let mut dx = Feat::zeros((n, cin, t, h, w));
    let ds = dcol.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    let x_t = h * w;
    let x_c = t * x_t;
    let x_n = cin * x_c;
    let mut row = 0usize;
    for ni in 0..n {
        for toi in 0..to {
            for hoi in 0..ho {
                for woi in 0..wo {
                    let row_off = row * k_total;
                    let mut k = 0usize;
                    for ci in 0..cin {
                        for kti in 0..kt {
                            let ti = (toi * st + kti) as isize - pt as isize;
                            if ti < 0 || ti >= t as isize {
                                k += kh * kw;
                                continue;
                            }
                            for khi in 0..kh {
                                let hi = (hoi * sh + khi) as isize - ph as isize;
                                if hi < 0 || hi >= h as isize {
                                    k += kw;
                                    continue;
                                }
                                let base =
                                    ni * x_n + ci * x_c + ti as usize * x_t + hi as usize * w;
                                for kwi in 0..kw {
                                    let wi = (woi * sw + kwi) as isize - pw as isize;
                                    if wi >= 0 && wi < w as isize {
                                        xs[base + wi as usize] += ds[row_off + k];
                                    }
                                    k += 1;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_support::*;
    use ndarray::Array5;

    /// Direct convolution oracle: plain nested loops, no im2col.
    fn conv_oracle(
        x: &Feat,
        weight: &ArrayD<f64>,
        bias: Option<&ArrayD<f64>>,
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Feat {
        let (n, cin, t, h, w) = x.dim();
        let sh = weight.shape();
        let (cout, kt, kh, kw) = (sh[0], sh[2], sh[3], sh[4]);
        let to = (t + 2 * padding.0 - kt) / stride.0 + 1;
        let ho = (h + 2 * padding.1 - kh) / stride.1 + 1;
        let wo = (w + 2 * padding.2 - kw) / stride.2 + 1;
        let mut y = Array5::zeros((n, cout, to, ho, wo));
        for ni in 0..n {
            for co in 0..cout {
                for toi in 0..to {
                    for hoi in 0..ho {
                        for woi in 0..wo {
                            let mut acc = bias.map(|b| b[[co]]).unwrap_or(0.0);
                            for ci in 0..cin {
                                for kti in 0..kt {
                                    for khi in 0..kh {
                                        for kwi in 0..kw {
                                            let ti =
                                                (toi * stride.0 + kti) as isize - padding.0 as isize;
                                            let hi =
                                                (hoi * stride.1 + khi) as isize - padding.1 as isize;
                                            let wi =
                                                (woi * stride.2 + kwi) as isize - padding.2 as isize;
                                            if ti >= 0
                                                && ti < t as isize
                                                && hi >= 0
                                                && hi < h as isize
                                                && wi >= 0
                                                && wi < w as isize
                                            {
                                                acc += x[[
                                                    ni,
                                                    ci,
                                                    ti as usize,
                                                    hi as usize,
                                                    wi as usize,
                                                ]] * weight[[co, ci, kti, khi, kwi]];
                                            }
                                        }
                                    }
                                }
                            }
                            y[[ni, co, toi, hoi, woi]] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_oracle() {
        let mut rng = rng(7);
        for (stride, padding, kernel) in [
            ((1, 1, 1), (1, 1, 1), (3, 3, 3)),
            ((2, 2, 2), (1, 1, 1), (3, 3, 3)),
            ((1, 2, 2), (1, 3, 3), (3, 7, 7)),
            ((1, 1, 1), (0, 0, 0), (1, 1, 1)),
        ] {
            let mut store = ParamStore::new();
            let conv = Conv3d::new(&mut store, &mut rng, "c", 2, 3, kernel, stride, padding, true);
            let x = random_feat(&mut rng, (2, 2, 5, 8, 8));
            let (y, _) = conv.forward(&store, &x).unwrap();
            let oracle = conv_oracle(
                &x,
                store.value(conv.weight),
                conv.bias.map(|b| store.value(b)),
                stride,
                padding,
            );
            assert_eq!(y.dim(), oracle.dim());
            for (a, b) in y.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng(13);
        let mut store = ParamStore::new();
        let conv = Conv3d::new(
            &mut store,
            &mut rng,
            "c",
            2,
            2,
            (3, 3, 3),
            (2, 2, 2),
            (1, 1, 1),
            true,
        );
        let x = random_feat(&mut rng, (1, 2, 4, 5, 5));
        // Random fixed projection turns the output into a scalar loss.
        let proj = random_feat(&mut rng, (1, 2, 2, 3, 3));
        let loss = |store: &mut ParamStore| -> f64 {
            let (y, _) = conv.forward(store, &x).unwrap();
            (&y * &proj).sum()
        };

        let mut store2 = store.clone();
        let (y, cache) = conv.forward(&store, &x).unwrap();
        assert_eq!(y.dim(), proj.dim());
        store2.zero_grads();
        let dx = conv.backward(&mut store2, &cache, &proj);

        for id in [conv.weight, conv.bias.unwrap()] {
            let fd = finite_diff_param(&mut store.clone(), id, 1e-6, loss);
            let rel = max_rel_error(store2.grad(id), &fd);
            assert!(rel < 1e-6, "param grad rel err {rel}");
        }

        let mut x_var = x.clone();
        let fd_x = finite_diff_input(&mut x_var, 1e-6, |xv| {
            let (y, _) = conv.forward(&store, xv).unwrap();
            (&y * &proj).sum()
        });
        let rel = max_rel_error(&dx.into_dyn(), &fd_x.into_dyn());
        assert!(rel < 1e-6, "input grad rel err {rel}");
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = rng(1);
        let mut store = ParamStore::new();
        let conv = Conv3d::new(
            &mut store,
            &mut rng,
            "c",
            3,
            2,
            (1, 1, 1),
            (1, 1, 1),
            (0, 0, 0),
            false,
        );
        let x = random_feat(&mut rng, (1, 2, 2, 2, 2));
        assert!(conv.forward(&store, &x).is_err());
    }
}
