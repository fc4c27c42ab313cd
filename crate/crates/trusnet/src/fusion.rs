//! Adaptive spatial fusion: per-voxel modality attention weights, two-way
//! softmax normalization, and convex recombination of the two feature maps.
//!
//! For stage features `f_x` (B-mode) and `f_e` (SWE), the block computes
//!
//! ```text
//! m   = (f_x + f_e) / 2
//! w_x = sigmoid(IN(conv_x([m, f_x])))      w_e = sigmoid(IN(conv_e([m, f_e])))
//! nw_x = exp(w_x) / (exp(w_x) + exp(w_e))  nw_e = 1 - nw_x
//! fused = nw_x * f_x + nw_e * f_e
//! ```
//!
//! and re-integrates `fused` into both branches residually
//! (`branch = f + fused`). The 1x1x1 convolutions map 2C channels to a
//! single weight channel which is broadcast across the C feature channels.

use ndarray::{concatenate, Axis};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{Conv3d, ConvCache};
use crate::nn::norm::{InCache, InstanceNorm};
use crate::nn::{sigmoid, Feat, ParamStore};

/// Paired stage features with identical shapes, (N, C, T, H, W).
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub f_x: Feat,
    pub f_e: Feat,
}

impl StageFeatures {
    pub fn validate(&self) -> Result<()> {
        if self.f_x.dim() != self.f_e.dim() {
            return Err(Error::Invalid(format!(
                "fusion inputs must share a shape: {:?} vs {:?}",
                self.f_x.dim(),
                self.f_e.dim()
            )));
        }
        Ok(())
    }
}

/// Learnable parameters of one fusion block.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub conv_x: Conv3d,
    pub conv_e: Conv3d,
    pub in_x: InstanceNorm,
    pub in_e: InstanceNorm,
    pub channels: usize,
}

pub struct AsfOutput {
    pub fused: Feat,
    pub branch_x: Feat,
    pub branch_e: Feat,
}

pub struct AsfCache {
    f_x: Feat,
    f_e: Feat,
    conv_x_cache: ConvCache,
    conv_e_cache: ConvCache,
    in_x_cache: InCache,
    in_e_cache: InCache,
    w_x: Feat,
    w_e: Feat,
    nw_x: Feat,
    nw_e: Feat,
}

/// Voxel-wise two-way softmax in the numerically stable max-subtraction
/// form. The maps must be single-channel and equally shaped.
pub fn normalize_weights(w_x: &Feat, w_e: &Feat) -> (Feat, Feat) {
    debug_assert_eq!(w_x.dim(), w_e.dim());
    let mut nw_x = Feat::zeros(w_x.raw_dim());
    ndarray::Zip::from(&mut nw_x)
        .and(w_x)
        .and(w_e)
        .for_each(|o, &a, &b| {
            let m = a.max(b);
            let ea = (a - m).exp();
            let eb = (b - m).exp();
            *o = ea / (ea + eb);
        });
    let nw_e = nw_x.mapv(|p| 1.0 - p);
    (nw_x, nw_e)
}

/// Weighted recombination: `fused = nw_x * f_x + nw_e * f_e`, with the
/// single-channel weight maps broadcast across feature channels.
pub fn fuse(feats: &StageFeatures, nw_x: &Feat, nw_e: &Feat) -> Result<Feat> {
    feats.validate()?;
    let (n, _, t, h, w) = feats.f_x.dim();
    if nw_x.dim() != (n, 1, t, h, w) || nw_e.dim() != (n, 1, t, h, w) {
        return Err(Error::Invalid(format!(
            "weight maps must be (N,1,T,H,W)=({n},1,{t},{h},{w}), got {:?} and {:?}",
            nw_x.dim(),
            nw_e.dim()
        )));
    }
    Ok(&feats.f_x * nw_x + &feats.f_e * nw_e)
}

impl FusionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
    ) -> FusionBlock {
        let conv_x = Conv3d::new(
            store,
            rng,
            &format!("{name}.conv_x"),
            2 * channels,
            1,
            (1, 1, 1),
            (1, 1, 1),
            (0, 0, 0),
            true,
        );
        let conv_e = Conv3d::new(
            store,
            rng,
            &format!("{name}.conv_e"),
            2 * channels,
            1,
            (1, 1, 1),
            (1, 1, 1),
            (0, 0, 0),
            true,
        );
        let in_x = InstanceNorm::new(store, &format!("{name}.in_x"), 1);
        let in_e = InstanceNorm::new(store, &format!("{name}.in_e"), 1);
        FusionBlock {
            conv_x,
            conv_e,
            in_x,
            in_e,
            channels,
        }
    }

    /// Raw modality attention maps `(w_x, w_e)`, each in (0, 1) and shaped
    /// (N, 1, T, H, W).
    pub fn compute_raw_weights(
        &self,
        store: &ParamStore,
        feats: &StageFeatures,
    ) -> Result<(Feat, Feat)> {
        let (out, _) = self.forward_weights(store, feats)?;
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn forward_weights(
        &self,
        store: &ParamStore,
        feats: &StageFeatures,
    ) -> Result<((Feat, Feat), (ConvCache, ConvCache, InCache, InCache, Feat, Feat))> {
        feats.validate()?;
        let (_, c, _, _, _) = feats.f_x.dim();
        if c != self.channels {
            return Err(Error::Invalid(format!(
                "fusion block built for {} channels, got {c}",
                self.channels
            )));
        }
        let mean = (&feats.f_x + &feats.f_e) * 0.5;
        let cat_x = concatenate(Axis(1), &[mean.view(), feats.f_x.view()]).unwrap();
        let cat_e = concatenate(Axis(1), &[mean.view(), feats.f_e.view()]).unwrap();
        let (u_x, conv_x_cache) = self.conv_x.forward(store, &cat_x)?;
        let (u_e, conv_e_cache) = self.conv_e.forward(store, &cat_e)?;
        let (s_x, in_x_cache) = self.in_x.forward(store, &u_x);
        let (s_e, in_e_cache) = self.in_e.forward(store, &u_e);
        let w_x = sigmoid(&s_x);
        let w_e = sigmoid(&s_e);
        Ok((
            (w_x.clone(), w_e.clone()),
            (conv_x_cache, conv_e_cache, in_x_cache, in_e_cache, w_x, w_e),
        ))
    }

    /// Full block: raw weights, softmax normalization, fusion, and residual
    /// integration into both branches.
    pub fn forward(&self, store: &ParamStore, feats: &StageFeatures) -> Result<(AsfOutput, AsfCache)> {
        let (_, (conv_x_cache, conv_e_cache, in_x_cache, in_e_cache, w_x, w_e)) =
            self.forward_weights(store, feats)?;
        let (nw_x, nw_e) = normalize_weights(&w_x, &w_e);
        let fused = fuse(feats, &nw_x, &nw_e)?;
        let branch_x = &feats.f_x + &fused;
        let branch_e = &feats.f_e + &fused;
        Ok((
            AsfOutput {
                fused,
                branch_x,
                branch_e,
            },
            AsfCache {
                f_x: feats.f_x.clone(),
                f_e: feats.f_e.clone(),
                conv_x_cache,
                conv_e_cache,
                in_x_cache,
                in_e_cache,
                w_x,
                w_e,
                nw_x,
                nw_e,
            },
        ))
    }

    /// Backward through the whole block. Parameter gradients accumulate in
    /// the store; returns gradients for (f_x, f_e).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &AsfCache,
        g_fused: &Feat,
        g_branch_x: &Feat,
        g_branch_e: &Feat,
    ) -> (Feat, Feat) {
        let c = self.channels;
        // fused receives gradient directly and through both branch sums.
        let g_fused_total = g_fused + g_branch_x + g_branch_e;

        // fuse: fused = nw_x * f_x + nw_e * f_e (weights broadcast over C).
        let mut g_fx = g_branch_x + &(&g_fused_total * &cache.nw_x);
        let mut g_fe = g_branch_e + &(&g_fused_total * &cache.nw_e);
        let g_nwx = (&g_fused_total * &cache.f_x)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let g_nwe = (&g_fused_total * &cache.f_e)
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));

        // Two-way softmax: d nw_x / d w_x = nw_x * nw_e, antisymmetric rest.
        let pq = &cache.nw_x * &cache.nw_e;
        let g_wx = (&g_nwx - &g_nwe) * &pq;
        let g_we = -&g_wx;

        // Sigmoid.
        let g_sx = &g_wx * &cache.w_x.mapv(|s| s * (1.0 - s));
        let g_se = &g_we * &cache.w_e.mapv(|s| s * (1.0 - s));

        // Instance norm, then the 1x1x1 convs back to the concatenated input.
        let g_ux = self.in_x.backward(store, &cache.in_x_cache, &g_sx);
        let g_ue = self.in_e.backward(store, &cache.in_e_cache, &g_se);
        let g_cat_x = self.conv_x.backward(store, &cache.conv_x_cache, &g_ux);
        let g_cat_e = self.conv_e.backward(store, &cache.conv_e_cache, &g_ue);

        // Split concat grads: first C channels flow into m, second C into f.
        let g_m = &g_cat_x.slice(ndarray::s![.., ..c, .., .., ..])
            + &g_cat_e.slice(ndarray::s![.., ..c, .., .., ..]);
        g_fx += &g_cat_x.slice(ndarray::s![.., c.., .., .., ..]);
        g_fe += &g_cat_e.slice(ndarray::s![.., c.., .., .., ..]);
        // m = (f_x + f_e) / 2.
        g_fx += &(&g_m * 0.5);
        g_fe += &(&g_m * 0.5);
        (g_fx, g_fe)
    }
}
