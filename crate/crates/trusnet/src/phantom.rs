//! Seeded synthetic paired-video generator with ground-truth lesion masks.
//!
//! The label is decidable only by combining both modalities: a true lesion is
//! simultaneously hypoechoic (dark) in B-mode and stiff (bright) in SWE at
//! the same location, while distractors carry the same cue in a single
//! modality only. Backgrounds are multiplicative Rayleigh speckle.

use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videodata::{normalize_intensities, save_sample, DatasetManifest, SplitTag, TrusSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub n_samples: usize,
    pub positive_fraction: f64,
    /// (T, H, W, C)
    pub dims: (usize, usize, usize, usize),
    /// Amplitude of the multiplicative Rayleigh speckle.
    pub speckle_scale: f64,
    /// Fractional intensity drop inside a B-mode-visible blob.
    pub bmode_contrast: f64,
    /// Fractional intensity lift inside an SWE-visible blob.
    pub swe_stiffness_gain: f64,
    /// Spatial radius range as a fraction of min(H, W).
    pub lesion_radius_range: (f64, f64),
    /// Probability that a sample carries one single-modality distractor.
    pub distractor_rate: f64,
    pub master_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_samples: 160,
            positive_fraction: 0.5,
            dims: (16, 32, 32, 1),
            speckle_scale: 0.3,
            bmode_contrast: 0.4,
            swe_stiffness_gain: 0.5,
            lesion_radius_range: (0.12, 0.22),
            distractor_rate: 0.5,
            master_seed: 17,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (t, h, w, c) = self.dims;
        if t < 4 || h < 8 || w < 8 || c < 1 {
            return Err(Error::Invalid(format!(
                "phantom dims must be at least (4,8,8,1), got ({t},{h},{w},{c})"
            )));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::Invalid(format!(
                "positive_fraction must lie in (0,1), got {}",
                self.positive_fraction
            )));
        }
        if self.speckle_scale <= 0.0 {
            return Err(Error::Invalid("speckle_scale must be > 0".into()));
        }
        if !(self.bmode_contrast > 0.0 && self.bmode_contrast < 1.0) {
            return Err(Error::Invalid("bmode_contrast must lie in (0,1)".into()));
        }
        if self.swe_stiffness_gain <= 0.0 {
            return Err(Error::Invalid("swe_stiffness_gain must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Invalid("distractor_rate must lie in [0,1]".into()));
        }
        let (lo, hi) = self.lesion_radius_range;
        let min_hw = h.min(w) as f64;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Invalid(format!(
                "lesion_radius_range ({lo},{hi}) must satisfy 0 < min <= max"
            )));
        }
        if hi * min_hw > (min_hw - 1.0) / 2.0 {
            return Err(Error::Invalid(format!(
                "lesion radius range ({lo},{hi}) incompatible with dims: max radius {} exceeds {}",
                hi * min_hw,
                (min_hw - 1.0) / 2.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LesionKind {
    TrueLesion,
    BmodeOnlyDistractor,
    SweOnlyDistractor,
}

/// An ellipsoidal blob in (t, h, w) voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionSpec {
    pub center: (f64, f64, f64),
    pub radii: (f64, f64, f64),
    pub kind: LesionKind,
}

impl LesionSpec {
    fn visible_in_bmode(&self) -> bool {
        matches!(self.kind, LesionKind::TrueLesion | LesionKind::BmodeOnlyDistractor)
    }
    fn visible_in_swe(&self) -> bool {
        matches!(self.kind, LesionKind::TrueLesion | LesionKind::SweOnlyDistractor)
    }
}

/// Splittable counter hash (SplitMix64 finalizer over a golden-ratio
/// stride), so per-sample seeds are order-independent.
pub fn derive_sample_seed(master_seed: u64, index: u64) -> u64 {
    let z = master_seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    let z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_spec(
    rng: &mut ChaCha12Rng,
    cfg: &PhantomConfig,
    kind: LesionKind,
    avoid: Option<&LesionSpec>,
) -> Option<LesionSpec> {
    let (t, h, w, _) = cfg.dims;
    let min_hw = h.min(w) as f64;
    let (lo, hi) = cfg.lesion_radius_range;
    let t_f = t as f64;
    // Temporal radius keeps a contiguous window of at least half the frames
    // while the ellipsoid stays fully inside the volume.
    let rt_hi = (0.45 * t_f).min((t_f - 1.0) / 2.0);
    let rt_lo = (0.25 * t_f).min(rt_hi);
    for _ in 0..64 {
        let rt = rng.gen_range(rt_lo..=rt_hi);
        let rh = rng.gen_range(lo * min_hw..=hi * min_hw);
        let rw = rng.gen_range(lo * min_hw..=hi * min_hw);
        let ct = rng.gen_range(rt..=(t_f - 1.0 - rt));
        let ch = rng.gen_range(rh..=(h as f64 - 1.0 - rh));
        let cw = rng.gen_range(rw..=(w as f64 - 1.0 - rw));
        let spec = LesionSpec {
            center: (ct, ch, cw),
            radii: (rt, rh, rw),
            kind,
        };
        let clear = match avoid {
            None => true,
            Some(other) => {
                let d = ((ct - other.center.0) / (rt + other.radii.0)).powi(2)
                    + ((ch - other.center.1) / (rh + other.radii.1)).powi(2)
                    + ((cw - other.center.2) / (rw + other.radii.2)).powi(2);
                d.sqrt() >= 1.05
            }
        };
        if clear {
            return Some(spec);
        }
    }
    None
}

/// Normalized ellipsoid distance of a voxel from a spec's center.
fn norm_dist(spec: &LesionSpec, t: f64, h: f64, w: f64) -> f64 {
    (((t - spec.center.0) / spec.radii.0).powi(2)
        + ((h - spec.center.1) / spec.radii.1).powi(2)
        + ((w - spec.center.2) / spec.radii.2).powi(2))
    .sqrt()
}

/// Smooth blob membership: 1 inside the ellipsoid, raised-cosine taper over
/// roughly two voxels past the boundary, 0 beyond.
fn membership(spec: &LesionSpec, t: f64, h: f64, w: f64) -> f64 {
    let d = norm_dist(spec, t, h, w);
    let min_r = spec.radii.0.min(spec.radii.1).min(spec.radii.2);
    let taper = 2.0 / min_r;
    if d <= 1.0 {
        1.0
    } else if d <= 1.0 + taper {
        0.5 * (1.0 + (std::f64::consts::PI * (d - 1.0) / taper).cos())
    } else {
        0.0
    }
}

fn apply_blob(field: &mut Array3<f64>, spec: &LesionSpec, factor: impl Fn(f64) -> f64) {
    let (t_len, h_len, w_len) = field.dim();
    let min_r = spec.radii.0.min(spec.radii.1).min(spec.radii.2);
    let reach = |c: f64, r: f64, len: usize| -> (usize, usize) {
        let pad = r * (1.0 + 2.0 / min_r) + 1.0;
        let lo = (c - pad).floor().max(0.0) as usize;
        let hi = ((c + pad).ceil() as usize).min(len - 1);
        (lo, hi)
    };
    let (t0, t1) = reach(spec.center.0, spec.radii.0, t_len);
    let (h0, h1) = reach(spec.center.1, spec.radii.1, h_len);
    let (w0, w1) = reach(spec.center.2, spec.radii.2, w_len);
    for t in t0..=t1 {
        for h in h0..=h1 {
            for w in w0..=w1 {
                let m = membership(spec, t as f64, h as f64, w as f64);
                if m > 0.0 {
                    field[[t, h, w]] *= factor(m);
                }
            }
        }
    }
}

/// Generate one sample. Deterministic given (config, sample_seed, label);
/// the returned sample id encodes the seed and may be renamed by callers.
pub fn generate_sample(cfg: &PhantomConfig, sample_seed: u64, label: u8) -> Result<TrusSample> {
    cfg.validate()?;
    if label > 1 {
        return Err(Error::Invalid(format!("label must be 0 or 1, got {label}")));
    }
    let (t, h, w, c) = cfg.dims;
    let mut rng = ChaCha12Rng::seed_from_u64(sample_seed);

    let mut specs: Vec<LesionSpec> = Vec::new();
    let true_lesion = if label == 1 {
        let spec = sample_spec(&mut rng, cfg, LesionKind::TrueLesion, None).ok_or_else(|| {
            Error::Invalid("failed to place a lesion; radius range too large for dims".into())
        })?;
        specs.push(spec.clone());
        Some(spec)
    } else {
        None
    };
    if rng.gen::<f64>() < cfg.distractor_rate {
        let kind = if rng.gen::<bool>() {
            LesionKind::BmodeOnlyDistractor
        } else {
            LesionKind::SweOnlyDistractor
        };
        // A distractor that cannot be placed clear of the lesion is dropped.
        if let Some(spec) = sample_spec(&mut rng, cfg, kind, true_lesion.as_ref()) {
            specs.push(spec);
        }
    }

    let mut bmode_field = Array3::<f64>::from_elem((t, h, w), 1.0);
    let mut swe_field = Array3::<f64>::from_elem((t, h, w), 1.0);
    for spec in &specs {
        if spec.visible_in_bmode() {
            apply_blob(&mut bmode_field, spec, |m| 1.0 - cfg.bmode_contrast * m);
        }
        if spec.visible_in_swe() {
            apply_blob(&mut swe_field, spec, |m| 1.0 + cfg.swe_stiffness_gain * m);
        }
    }

    // Multiplicative Rayleigh speckle with unit mean, independent per
    // modality, replicated across channels. Inverse-CDF sampling:
    // R = sigma * sqrt(-2 ln(1 - U)) with sigma chosen for mean 1.
    let sigma = (2.0 / std::f64::consts::PI).sqrt();
    let speckled = |field: &Array3<f64>, rng: &mut ChaCha12Rng| -> Array3<f64> {
        let mut out = field.clone();
        for v in out.iter_mut() {
            let u: f64 = rng.gen();
            let r = sigma * (-2.0 * (1.0 - u).ln()).sqrt();
            let factor = (1.0 + cfg.speckle_scale * (r - 1.0)).max(0.0);
            *v *= factor;
        }
        out
    };
    let bmode_noisy = speckled(&bmode_field, &mut rng);
    let swe_noisy = speckled(&swe_field, &mut rng);

    let expand = |vol: &Array3<f64>| -> Array4<f32> {
        Array4::from_shape_fn((t, h, w, c), |(ti, hi, wi, _)| vol[[ti, hi, wi]] as f32)
    };
    let bmode = normalize_intensities(&expand(&bmode_noisy))?;
    let swe = normalize_intensities(&expand(&swe_noisy))?;

    let mut mask = Array3::<u8>::zeros((t, h, w));
    if let Some(spec) = &true_lesion {
        for ((ti, hi, wi), v) in mask.indexed_iter_mut() {
            if norm_dist(spec, ti as f64, hi as f64, wi as f64) <= 1.0 {
                *v = 1;
            }
        }
    }

    let sample = TrusSample {
        id: format!("p{sample_seed:016x}"),
        bmode,
        swe,
        label,
        lesion_mask: Some(mask),
    };
    sample.validate()?;
    Ok(sample)
}

/// Generate and write a full dataset: container pairs, masks, and the
/// manifest (`manifest.toml` under `out_dir`). The positive count is
/// `round(n_samples * positive_fraction)`.
pub fn generate_dataset(cfg: &PhantomConfig, out_dir: &std::path::Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let n_pos = (cfg.n_samples as f64 * cfg.positive_fraction).round() as usize;
    let mut entries = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let label = u8::from(i < n_pos);
        let seed = derive_sample_seed(cfg.master_seed, i as u64);
        let mut sample = generate_sample(cfg, seed, label)?;
        sample.id = format!("s{i:04}");
        entries.push(save_sample(&sample, out_dir)?);
    }
    let manifest = DatasetManifest::new(cfg.master_seed, SplitTag::All, entries);
    manifest.save(&out_dir.join("manifest.toml"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use tempfile::tempdir;

    #[test]
    fn seed_derivation_deterministic_and_collision_free() {
        assert_eq!(derive_sample_seed(42, 7), derive_sample_seed(42, 7));
        // Collision scan across indices for random masters.
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..100 {
            let master: u64 = rng.gen();
            let mut seen = HashSet::new();
            for i in 0..100u64 {
                assert!(seen.insert(derive_sample_seed(master, i)));
            }
        }
        // Distinct masters map the same index to distinct seeds.
        let mut seen = HashSet::new();
        let mut masters = HashSet::new();
        for _ in 0..10_000 {
            let master: u64 = rng.gen();
            if masters.insert(master) {
                assert!(seen.insert(derive_sample_seed(master, 3)));
            }
        }
    }

    #[test]
    fn negative_without_distractor_has_empty_mask() {
        let cfg = PhantomConfig {
            distractor_rate: 0.0,
            ..PhantomConfig::default()
        };
        let s = generate_sample(&cfg, 99, 0).unwrap();
        assert!(s.lesion_mask.unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = PhantomConfig::default();
        let a = generate_sample(&cfg, 1234, 1).unwrap();
        let b = generate_sample(&cfg, 1234, 1).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&cfg, 1235, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn contrast_and_stiffness_cues_measurable() {
        let cfg = PhantomConfig {
            bmode_contrast: 0.4,
            swe_stiffness_gain: 0.5,
            distractor_rate: 0.0,
            ..PhantomConfig::default()
        };
        for seed in [5u64, 6, 7] {
            let s = generate_sample(&cfg, seed, 1).unwrap();
            let mask = s.lesion_mask.as_ref().unwrap();
            assert!(mask.iter().any(|&v| v == 1));
            let mean_in_out = |vid: &ndarray::Array4<f32>| -> (f64, f64) {
                let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
                for ((t, h, w, _), &v) in vid.indexed_iter() {
                    if mask[[t, h, w]] == 1 {
                        si += v as f64;
                        ni += 1;
                    } else {
                        so += v as f64;
                        no += 1;
                    }
                }
                (si / ni as f64, so / no as f64)
            };
            let (b_in, b_out) = mean_in_out(&s.bmode);
            assert!(
                b_in <= 0.75 * b_out,
                "seed {seed}: bmode inside {b_in:.3} vs outside {b_out:.3}"
            );
            let (s_in, s_out) = mean_in_out(&s.swe);
            assert!(
                s_in >= 1.25 * s_out,
                "seed {seed}: swe inside {s_in:.3} vs outside {s_out:.3}"
            );
        }
    }

    #[test]
    fn mask_nonempty_iff_positive_and_inside_volume() {
        let cfg = PhantomConfig {
            distractor_rate: 1.0,
            ..PhantomConfig::default()
        };
        for i in 0..12u64 {
            let label = (i % 2) as u8;
            let s = generate_sample(&cfg, derive_sample_seed(3, i), label).unwrap();
            let mask = s.lesion_mask.as_ref().unwrap();
            let nonempty = mask.iter().any(|&v| v == 1);
            assert_eq!(nonempty, label == 1);
            let (t, h, w) = mask.dim();
            // Boundary voxels stay clear: the ellipsoid is strictly inside.
            for ((ti, hi, wi), &v) in mask.indexed_iter() {
                if v == 1 {
                    assert!(ti > 0 && ti < t - 1 || t <= 2);
                    assert!(hi > 0 && hi < h - 1);
                    assert!(wi > 0 && wi < w - 1);
                }
            }
            for vid in [&s.bmode, &s.swe] {
                assert!(vid.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn temporal_window_contiguous_and_at_least_half() {
        let cfg = PhantomConfig::default();
        for seed in 0..8u64 {
            let s = generate_sample(&cfg, derive_sample_seed(11, seed), 1).unwrap();
            let mask = s.lesion_mask.as_ref().unwrap();
            let (t_len, _, _) = mask.dim();
            let frames: Vec<bool> = (0..t_len)
                .map(|t| {
                    mask.index_axis(ndarray::Axis(0), t)
                        .iter()
                        .any(|&v| v == 1)
                })
                .collect();
            let count = frames.iter().filter(|&&b| b).count();
            assert!(count * 2 >= t_len, "window {count} of {t_len}");
            let first = frames.iter().position(|&b| b).unwrap();
            let last = frames.iter().rposition(|&b| b).unwrap();
            assert_eq!(count, last - first + 1, "window must be contiguous");
        }
    }

    #[test]
    fn dataset_counts_and_reproducibility() {
        let cfg = PhantomConfig {
            n_samples: 10,
            positive_fraction: 0.5,
            dims: (4, 8, 8, 1),
            ..PhantomConfig::default()
        };
        let dir = tempdir().unwrap();
        let m = generate_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(m.positives, 5);
        assert_eq!(m.negatives, 5);

        let dir2 = tempdir().unwrap();
        let m2 = generate_dataset(&cfg, dir2.path()).unwrap();
        assert_eq!(m, m2);
        for e in &m.entries {
            let a = std::fs::read(dir.path().join(&e.bmode_path)).unwrap();
            let b = std::fs::read(dir2.path().join(&e.bmode_path)).unwrap();
            assert_eq!(a, b, "regeneration must be byte-identical");
        }
    }

    #[test]
    fn dataset_prevalence_rounding() {
        // n = 200 at the reference train prevalence 271/400 rounds to 136.
        let cfg = PhantomConfig {
            n_samples: 200,
            positive_fraction: 271.0 / 400.0,
            dims: (4, 8, 8, 1),
            ..PhantomConfig::default()
        };
        let n_pos = (cfg.n_samples as f64 * cfg.positive_fraction).round() as usize;
        assert_eq!(n_pos, 136);
    }

    #[test]
    fn incompatible_radius_range_rejected() {
        let cfg = PhantomConfig {
            lesion_radius_range: (0.4, 0.6),
            ..PhantomConfig::default()
        };
        assert!(generate_sample(&cfg, 0, 1).is_err());
    }
}
