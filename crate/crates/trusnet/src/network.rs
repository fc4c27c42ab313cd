//! Dual-stream 3D residual backbone (bottleneck layout, size-configurable)
//! with hierarchical fusion hooks and the classification head.
//!
//! The stem is a 3x7x7 convolution with stride (1,2,2) followed by max
//! pooling with stride (1,2,2); four bottleneck stages follow, spatially
//! strided by 2 (and temporally from stage 2 on). In dual-stream mode a
//! fusion block joins the two branches after every stage and the stage-4
//! fused map feeds the head: global average pooling over (T,H,W) into an
//! affine map to 2 logits.

use std::collections::HashMap;

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{AsfCache, FusionBlock, StageFeatures};
use crate::nn::conv::{Conv3d, ConvCache};
use crate::nn::linear::{Linear, LinearCache};
use crate::nn::norm::{BatchNorm3d, BnCache};
use crate::nn::pool::{global_avg_pool, global_avg_pool_backward, MaxPool3d, PoolCache};
use crate::nn::{relu, relu_backward, Feat, ParamKind, ParamStore, Phase};
use crate::ortho::{kernel_matrix, softmax_rows, KernelMatrix};
use crate::videodata::TrusSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Bmode,
    Swe,
}

/// Which of the ablation architectures is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    Single(Modality),
    Concat,
    DualFusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub stage_blocks: [usize; 4],
    pub width_multiplier: f64,
    pub in_channels: usize,
    pub num_classes: usize,
    pub fusion_enabled: bool,
    pub single_modality: Option<Modality>,
    pub concat_baseline: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stage_blocks: [3, 4, 6, 3],
            width_multiplier: 1.0,
            in_channels: 1,
            num_classes: 2,
            fusion_enabled: true,
            single_modality: None,
            concat_baseline: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes is fixed at 2, got {}",
                self.num_classes
            )));
        }
        if self.stage_blocks.iter().any(|&b| b < 1) {
            return Err(Error::Config(format!(
                "stage_blocks must each be >= 1, got {:?}",
                self.stage_blocks
            )));
        }
        if self.width_multiplier <= 0.0 {
            return Err(Error::Config(format!(
                "width_multiplier must be > 0, got {}",
                self.width_multiplier
            )));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        // Exactly one of single-modality, concat baseline, dual-stream.
        match (self.single_modality, self.concat_baseline, self.fusion_enabled) {
            (Some(_), false, false) | (None, true, false) | (None, false, true) => Ok(()),
            _ => Err(Error::Config(format!(
                "exactly one of single_modality ({:?}), concat_baseline ({}), or dual-stream \
                 fusion ({}) must be active",
                self.single_modality, self.concat_baseline, self.fusion_enabled
            ))),
        }
    }

    pub fn mode(&self) -> ModelMode {
        if let Some(m) = self.single_modality {
            ModelMode::Single(m)
        } else if self.concat_baseline {
            ModelMode::Concat
        } else {
            ModelMode::DualFusion
        }
    }

    /// Inner bottleneck widths per stage after the width multiplier.
    pub fn stage_widths(&self) -> [usize; 4] {
        let scale = |base: usize| ((base as f64 * self.width_multiplier).round() as usize).max(1);
        [scale(64), scale(128), scale(256), scale(512)]
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

struct ConvBn {
    conv: Conv3d,
    bn: BatchNorm3d,
}

struct ConvBnCache {
    conv: ConvCache,
    bn: BnCache,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> ConvBn {
        let conv = Conv3d::new(store, rng, &format!("{name}.conv"), cin, cout, kernel, stride, padding, false);
        let bn = BatchNorm3d::new(store, &format!("{name}.bn"), cout);
        ConvBn { conv, bn }
    }

    fn forward(&self, store: &mut ParamStore, x: &Feat, phase: Phase) -> Result<(Feat, ConvBnCache)> {
        let (u, conv) = self.conv.forward(store, x)?;
        let (y, bn) = self.bn.forward(store, &u, phase);
        Ok((y, ConvBnCache { conv, bn }))
    }

    fn backward(&self, store: &mut ParamStore, cache: &ConvBnCache, gy: &Feat) -> Feat {
        let gu = self.bn.backward(store, &cache.bn, gy);
        self.conv.backward(store, &cache.conv, &gu)
    }
}

struct Bottleneck {
    conv1: ConvBn,
    conv2: ConvBn,
    conv3: ConvBn,
    down: Option<ConvBn>,
}

struct BottleneckCache {
    c1: ConvBnCache,
    m1: Feat,
    c2: ConvBnCache,
    m2: Feat,
    c3: ConvBnCache,
    cd: Option<ConvBnCache>,
    m_out: Feat,
}

impl Bottleneck {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        cin: usize,
        planes: usize,
        stride: (usize, usize, usize),
    ) -> Bottleneck {
        let out = planes * 4;
        let conv1 = ConvBn::new(store, rng, &format!("{name}.conv1"), cin, planes, (1, 1, 1), (1, 1, 1), (0, 0, 0));
        let conv2 = ConvBn::new(store, rng, &format!("{name}.conv2"), planes, planes, (3, 3, 3), stride, (1, 1, 1));
        let conv3 = ConvBn::new(store, rng, &format!("{name}.conv3"), planes, out, (1, 1, 1), (1, 1, 1), (0, 0, 0));
        let down = (stride != (1, 1, 1) || cin != out).then(|| {
            ConvBn::new(store, rng, &format!("{name}.down"), cin, out, (1, 1, 1), stride, (0, 0, 0))
        });
        Bottleneck { conv1, conv2, conv3, down }
    }

    fn forward(&self, store: &mut ParamStore, x: &Feat, phase: Phase) -> Result<(Feat, BottleneckCache)> {
        let (u1, c1) = self.conv1.forward(store, x, phase)?;
        let (a1, m1) = relu(&u1);
        let (u2, c2) = self.conv2.forward(store, &a1, phase)?;
        let (a2, m2) = relu(&u2);
        let (u3, c3) = self.conv3.forward(store, &a2, phase)?;
        let (skip, cd) = match &self.down {
            Some(d) => {
                let (s, c) = d.forward(store, x, phase)?;
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let (y, m_out) = relu(&(&u3 + &skip));
        Ok((y, BottleneckCache { c1, m1, c2, m2, c3, cd, m_out }))
    }

    fn backward(&self, store: &mut ParamStore, cache: &BottleneckCache, gy: &Feat) -> Feat {
        let g = relu_backward(&cache.m_out, gy);
        let g_a2 = self.conv3.backward(store, &cache.c3, &g);
        let g_u2 = relu_backward(&cache.m2, &g_a2);
        let g_a1 = self.conv2.backward(store, &cache.c2, &g_u2);
        let g_u1 = relu_backward(&cache.m1, &g_a1);
        let mut gx = self.conv1.backward(store, &cache.c1, &g_u1);
        match (&self.down, &cache.cd) {
            (Some(d), Some(c)) => gx += &d.backward(store, c, &g),
            (None, None) => gx += &g,
            _ => unreachable!("downsample cache mismatch"),
        }
        gx
    }
}

struct Backbone {
    stem: ConvBn,
    pool: MaxPool3d,
    stages: Vec<Vec<Bottleneck>>,
}

struct StemTrace {
    conv: ConvBnCache,
    mask: Feat,
    pool: PoolCache,
}

impl Backbone {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        in_channels: usize,
        widths: [usize; 4],
        stage_blocks: [usize; 4],
    ) -> Backbone {
        let stem = ConvBn::new(
            store,
            rng,
            &format!("{prefix}.stem"),
            in_channels,
            widths[0],
            (3, 7, 7),
            (1, 2, 2),
            (1, 3, 3),
        );
        let pool = MaxPool3d::new((1, 3, 3), (1, 2, 2), (0, 1, 1));
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (si, (&planes, &blocks)) in widths.iter().zip(stage_blocks.iter()).enumerate() {
            let stride = if si == 0 { (1, 1, 1) } else { (2, 2, 2) };
            let mut stage = Vec::with_capacity(blocks);
            for bi in 0..blocks {
                let s = if bi == 0 { stride } else { (1, 1, 1) };
                let block_cin = if bi == 0 { cin } else { planes * 4 };
                stage.push(Bottleneck::new(
                    store,
                    rng,
                    &format!("{prefix}.stage{}.block{bi}", si + 1),
                    block_cin,
                    planes,
                    s,
                ));
            }
            cin = planes * 4;
            stages.push(stage);
        }
        Backbone { stem, pool, stages }
    }

    fn stem_forward(&self, store: &mut ParamStore, x: &Feat, phase: Phase) -> Result<(Feat, StemTrace)> {
        let (u, conv) = self.stem.forward(store, x, phase)?;
        let (a, mask) = relu(&u);
        let (y, pool) = self.pool.forward(&a)?;
        Ok((y, StemTrace { conv, mask, pool }))
    }

    fn stem_backward(&self, store: &mut ParamStore, trace: &StemTrace, gy: &Feat) -> Feat {
        let ga = self.pool.backward(&trace.pool, gy);
        let gu = relu_backward(&trace.mask, &ga);
        self.stem.backward(store, &trace.conv, &gu)
    }

    fn stage_forward(
        &self,
        idx: usize,
        store: &mut ParamStore,
        x: &Feat,
        phase: Phase,
    ) -> Result<(Feat, Vec<BottleneckCache>)> {
        let mut caches = Vec::with_capacity(self.stages[idx].len());
        let mut cur = x.clone();
        for block in &self.stages[idx] {
            let (y, cache) = block.forward(store, &cur, phase)?;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, caches))
    }

    fn stage_backward(
        &self,
        idx: usize,
        store: &mut ParamStore,
        caches: &[BottleneckCache],
        gy: &Feat,
    ) -> Feat {
        let mut g = gy.clone();
        for (block, cache) in self.stages[idx].iter().zip(caches.iter()).rev() {
            g = block.backward(store, cache, &g);
        }
        g
    }
}

struct HeadTrace {
    pooled_dim: (usize, usize, usize, usize, usize),
    lin: LinearCache,
}

enum ArchTrace {
    Single {
        input: Feat,
        stem: StemTrace,
        stages: Vec<Vec<BottleneckCache>>,
        stage_out: Vec<Feat>,
        head: HeadTrace,
    },
    Dual {
        stem_x: StemTrace,
        stem_e: StemTrace,
        stages_x: Vec<Vec<BottleneckCache>>,
        stages_e: Vec<Vec<BottleneckCache>>,
        stage_x_out: Vec<Feat>,
        stage_e_out: Vec<Feat>,
        fusion: Vec<AsfCache>,
        fused: Vec<Feat>,
        head: HeadTrace,
    },
}

/// Everything the backward pass and Grad-CAM need from a forward pass.
pub struct ForwardTrace {
    detail: ArchTrace,
}

impl ForwardTrace {
    /// Activation of a named layer (stage or fused map), for Grad-CAM.
    pub fn activation(&self, layer: &str) -> Option<&Feat> {
        match &self.detail {
            ArchTrace::Single { stage_out, .. } => {
                let idx = parse_stage(layer, "stage")?;
                stage_out.get(idx)
            }
            ArchTrace::Dual {
                stage_x_out,
                stage_e_out,
                fused,
                ..
            } => {
                if let Some(idx) = parse_stage(layer, "fused") {
                    return fused.get(idx);
                }
                if let Some(rest) = layer.strip_suffix(".bmode") {
                    return stage_x_out.get(parse_stage(rest, "stage")?);
                }
                if let Some(rest) = layer.strip_suffix(".swe") {
                    return stage_e_out.get(parse_stage(rest, "stage")?);
                }
                None
            }
        }
    }
}

fn parse_stage(layer: &str, prefix: &str) -> Option<usize> {
    let n: usize = layer.strip_prefix(prefix)?.parse().ok()?;
    (1..=4).contains(&n).then(|| n - 1)
}

pub struct ForwardPass {
    pub logits: Array2<f64>,
    pub trace: ForwardTrace,
}

enum Arch {
    Single {
        backbone: Backbone,
        head: Linear,
    },
    Concat {
        backbone: Backbone,
        head: Linear,
    },
    Dual {
        bb_x: Backbone,
        bb_e: Backbone,
        fusion: Vec<FusionBlock>,
        head: Linear,
    },
}

/// A built model: configuration, parameter store, and architecture wiring.
pub struct Model {
    pub config: NetworkConfig,
    pub init_seed: u64,
    pub store: ParamStore,
    arch: Arch,
}

/// Deterministically initialize a model from its configuration and seed.
pub fn build_model(config: &NetworkConfig, init_seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(init_seed);
    let mut store = ParamStore::new();
    let widths = config.stage_widths();
    let head_in = widths[3] * 4;
    let arch = match config.mode() {
        ModelMode::Single(_) => {
            let backbone = Backbone::new(&mut store, &mut rng, "net", config.in_channels, widths, config.stage_blocks);
            let head = Linear::new(&mut store, &mut rng, "head", head_in, config.num_classes);
            Arch::Single { backbone, head }
        }
        ModelMode::Concat => {
            let backbone = Backbone::new(
                &mut store,
                &mut rng,
                "net",
                2 * config.in_channels,
                widths,
                config.stage_blocks,
            );
            let head = Linear::new(&mut store, &mut rng, "head", head_in, config.num_classes);
            Arch::Concat { backbone, head }
        }
        ModelMode::DualFusion => {
            let bb_x = Backbone::new(&mut store, &mut rng, "bmode", config.in_channels, widths, config.stage_blocks);
            let bb_e = Backbone::new(&mut store, &mut rng, "swe", config.in_channels, widths, config.stage_blocks);
            let fusion = (0..4)
                .map(|i| FusionBlock::new(&mut store, &mut rng, &format!("fusion{}", i + 1), widths[i] * 4))
                .collect();
            let head = Linear::new(&mut store, &mut rng, "head", head_in, config.num_classes);
            Arch::Dual { bb_x, bb_e, fusion, head }
        }
    };
    Ok(Model {
        config: config.clone(),
        init_seed,
        store,
        arch,
    })
}

impl Model {
    /// Digest of the shaping configuration.
    pub fn config_digest(&self) -> String {
        self.config.digest()
    }

    /// Valid Grad-CAM target layers for this architecture.
    pub fn valid_layers(&self) -> Vec<String> {
        match self.arch {
            Arch::Single { .. } | Arch::Concat { .. } => {
                (1..=4).map(|i| format!("stage{i}")).collect()
            }
            Arch::Dual { .. } => {
                let mut v: Vec<String> = (1..=4).map(|i| format!("fused{i}")).collect();
                for i in 1..=4 {
                    v.push(format!("stage{i}.bmode"));
                    v.push(format!("stage{i}.swe"));
                }
                v
            }
        }
    }

    /// Default Grad-CAM layer: the map that feeds the head.
    pub fn default_cam_layer(&self) -> String {
        match self.arch {
            Arch::Dual { .. } => "fused4".into(),
            _ => "stage4".into(),
        }
    }

    /// All convolution kernels as penalty matrices (both backbones and all
    /// fusion blocks; affine and head parameters excluded).
    pub fn kernel_matrices(&self) -> Vec<KernelMatrix> {
        self.store
            .slots()
            .filter(|(_, s)| s.kind == ParamKind::ConvKernel)
            .map(|(_, s)| kernel_matrix(&s.value.view(), &s.name).expect("conv kernels are rank 5"))
            .collect()
    }

    fn check_inputs(&self, bmode: &Feat, swe: &Feat) -> Result<()> {
        if bmode.dim() != swe.dim() {
            return Err(Error::Invalid(format!(
                "modality batches must share a shape: {:?} vs {:?}",
                bmode.dim(),
                swe.dim()
            )));
        }
        let (_, c, _, _, _) = bmode.dim();
        if c != self.config.in_channels {
            return Err(Error::Invalid(format!(
                "expected {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        Ok(())
    }

    /// Forward pass over a batch of paired videos, (N, C, T, H, W) each.
    /// Single-modality configurations ignore the other input.
    pub fn forward(&mut self, bmode: &Feat, swe: &Feat, phase: Phase) -> Result<ForwardPass> {
        self.check_inputs(bmode, swe)?;
        let Model { arch, store, config, .. } = self;
        match arch {
            Arch::Single { backbone, head } => {
                let input = match config.single_modality {
                    Some(Modality::Bmode) => bmode.clone(),
                    Some(Modality::Swe) => swe.clone(),
                    None => unreachable!("single arch requires single_modality"),
                };
                Self::forward_single_path(backbone, head, store, input, phase)
            }
            Arch::Concat { backbone, head } => {
                let input = concatenate(Axis(1), &[bmode.view(), swe.view()])
                    .unwrap()
                    .as_standard_layout()
                    .to_owned();
                Self::forward_single_path(backbone, head, store, input, phase)
            }
            Arch::Dual { bb_x, bb_e, fusion, head } => {
                let (mut cur_x, stem_x) = bb_x.stem_forward(store, bmode, phase)?;
                let (mut cur_e, stem_e) = bb_e.stem_forward(store, swe, phase)?;
                let mut stages_x = Vec::with_capacity(4);
                let mut stages_e = Vec::with_capacity(4);
                let mut stage_x_out = Vec::with_capacity(4);
                let mut stage_e_out = Vec::with_capacity(4);
                let mut fusion_caches = Vec::with_capacity(4);
                let mut fused_maps = Vec::with_capacity(4);
                for i in 0..4 {
                    let (f_x, cx) = bb_x.stage_forward(i, store, &cur_x, phase)?;
                    let (f_e, ce) = bb_e.stage_forward(i, store, &cur_e, phase)?;
                    stages_x.push(cx);
                    stages_e.push(ce);
                    stage_x_out.push(f_x.clone());
                    stage_e_out.push(f_e.clone());
                    let feats = StageFeatures { f_x, f_e };
                    let (out, cache) = fusion[i].forward(store, &feats)?;
                    fusion_caches.push(cache);
                    fused_maps.push(out.fused);
                    cur_x = out.branch_x;
                    cur_e = out.branch_e;
                }
                let (pooled, pooled_dim) = global_avg_pool(&fused_maps[3]);
                let (logits, lin) = head.forward(store, &pooled);
                Ok(ForwardPass {
                    logits,
                    trace: ForwardTrace {
                        detail: ArchTrace::Dual {
                            stem_x,
                            stem_e,
                            stages_x,
                            stages_e,
                            stage_x_out,
                            stage_e_out,
                            fusion: fusion_caches,
                            fused: fused_maps,
                            head: HeadTrace { pooled_dim, lin },
                        },
                    },
                })
            }
        }
    }

    fn forward_single_path(
        backbone: &Backbone,
        head: &Linear,
        store: &mut ParamStore,
        input: Feat,
        phase: Phase,
    ) -> Result<ForwardPass> {
        let (mut cur, stem) = backbone.stem_forward(store, &input, phase)?;
        let mut stages = Vec::with_capacity(4);
        let mut stage_out = Vec::with_capacity(4);
        for i in 0..4 {
            let (y, caches) = backbone.stage_forward(i, store, &cur, phase)?;
            stages.push(caches);
            stage_out.push(y.clone());
            cur = y;
        }
        let (pooled, pooled_dim) = global_avg_pool(&cur);
        let (logits, lin) = head.forward(store, &pooled);
        Ok(ForwardPass {
            logits,
            trace: ForwardTrace {
                detail: ArchTrace::Single {
                    input,
                    stem,
                    stages,
                    stage_out,
                    head: HeadTrace { pooled_dim, lin },
                },
            },
        })
    }

    /// Backward pass from logit gradients. Parameter gradients accumulate in
    /// the store; gradients of the `taps` layers are returned by name.
    pub fn backward(
        &mut self,
        trace: &ForwardTrace,
        dlogits: &Array2<f64>,
        taps: &[&str],
    ) -> Result<HashMap<String, Feat>> {
        let valid = self.valid_layers();
        let mut tap_grads = HashMap::new();
        let mut record = |name: &str, grad: &Feat| {
            if taps.contains(&name) {
                tap_grads.insert(name.to_string(), grad.clone());
            }
        };
        let Model { arch, store, .. } = self;
        match (&*arch, &trace.detail) {
            (Arch::Single { backbone, head }, ArchTrace::Single { stem, stages, head: ht, .. })
            | (Arch::Concat { backbone, head }, ArchTrace::Single { stem, stages, head: ht, .. }) => {
                let g_pooled = head.backward(store, &ht.lin, dlogits);
                let mut g = global_avg_pool_backward(&g_pooled, ht.pooled_dim);
                for i in (0..4).rev() {
                    record(&format!("stage{}", i + 1), &g);
                    g = backbone.stage_backward(i, store, &stages[i], &g);
                }
                backbone.stem_backward(store, stem, &g);
            }
            (
                Arch::Dual { bb_x, bb_e, fusion, head },
                ArchTrace::Dual {
                    stem_x,
                    stem_e,
                    stages_x,
                    stages_e,
                    fusion: fusion_caches,
                    fused,
                    head: ht,
                    ..
                },
            ) => {
                let g_pooled = head.backward(store, &ht.lin, dlogits);
                let g_fused4 = global_avg_pool_backward(&g_pooled, ht.pooled_dim);
                let zero = Feat::zeros(fused[3].raw_dim());
                record("fused4", &g_fused4);
                let (mut g_fx, mut g_fe) =
                    fusion[3].backward(store, &fusion_caches[3], &g_fused4, &zero, &zero);
                for i in (0..4).rev() {
                    record(&format!("stage{}.bmode", i + 1), &g_fx);
                    record(&format!("stage{}.swe", i + 1), &g_fe);
                    let g_branch_x = bb_x.stage_backward(i, store, &stages_x[i], &g_fx);
                    let g_branch_e = bb_e.stage_backward(i, store, &stages_e[i], &g_fe);
                    if i == 0 {
                        bb_x.stem_backward(store, stem_x, &g_branch_x);
                        bb_e.stem_backward(store, stem_e, &g_branch_e);
                    } else {
                        // The previous fusion block's branch outputs fed this
                        // stage; its fused map gets gradient from both sums.
                        let g_fused = &g_branch_x + &g_branch_e;
                        record(&format!("fused{i}"), &g_fused);
                        let zero = Feat::zeros(g_branch_x.raw_dim());
                        let (gx, ge) = fusion[i - 1].backward(
                            store,
                            &fusion_caches[i - 1],
                            &zero,
                            &g_branch_x,
                            &g_branch_e,
                        );
                        g_fx = gx;
                        g_fe = ge;
                    }
                }
            }
            _ => return Err(Error::Invalid("trace does not match architecture".into())),
        }
        for t in taps {
            if !tap_grads.contains_key(*t) {
                return Err(Error::Config(format!(
                    "unknown layer '{t}'; valid layers: {}",
                    valid.join(", ")
                )));
            }
        }
        Ok(tap_grads)
    }

    /// P(csPCa) for one sample in evaluation mode.
    pub fn predict_proba(&mut self, sample: &TrusSample) -> Result<f64> {
        let bmode = batch_from_video(&sample.bmode);
        let swe = batch_from_video(&sample.swe);
        let pass = self.forward(&bmode, &swe, Phase::Eval)?;
        let probs = softmax_rows(&pass.logits);
        Ok(probs[[0, 1]])
    }
}

/// (T, H, W, C) f32 video to a single-sample (1, C, T, H, W) f64 batch.
pub fn batch_from_video(video: &ndarray::Array4<f32>) -> Feat {
    let (t, h, w, c) = video.dim();
    Feat::from_shape_fn((1, c, t, h, w), |(_, ci, ti, hi, wi)| {
        video[[ti, hi, wi, ci]] as f64
    })
}

/// Stack samples into batches: (N, C, T, H, W) per modality plus labels.
pub fn batch_from_samples(samples: &[&TrusSample]) -> Result<(Feat, Feat, Vec<u8>)> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let (t, h, w, c) = samples[0].dims();
    let n = samples.len();
    let mut bmode = Feat::zeros((n, c, t, h, w));
    let mut swe = Feat::zeros((n, c, t, h, w));
    let mut labels = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        if s.dims() != (t, h, w, c) {
            return Err(Error::Invalid(format!(
                "sample {} shape {:?} differs from batch shape {:?}",
                s.id,
                s.dims(),
                (t, h, w, c)
            )));
        }
        for ci in 0..c {
            for ti in 0..t {
                for hi in 0..h {
                    for wi in 0..w {
                        bmode[[i, ci, ti, hi, wi]] = s.bmode[[ti, hi, wi, ci]] as f64;
                        swe[[i, ci, ti, hi, wi]] = s.swe[[ti, hi, wi, ci]] as f64;
                    }
                }
            }
        }
        labels.push(s.label);
    }
    Ok((bmode, swe, labels))
}
