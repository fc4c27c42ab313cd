//! Sample and manifest data model: paired-modality video samples, the binary
//! tensor container, preprocessing, and stratified dataset splitting.

pub mod container;
pub mod preprocess;

use std::path::Path;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use container::TensorData;

pub use preprocess::{normalize_intensities, resize_video};

/// One paired B-mode/SWE video with a binary label and, for synthetic data,
/// a ground-truth lesion mask. Video axes are (T, H, W, C); the mask is
/// (T, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct TrusSample {
    pub id: String,
    pub bmode: Array4<f32>,
    pub swe: Array4<f32>,
    /// 1 = csPCa, 0 = non-csPCa.
    pub label: u8,
    pub lesion_mask: Option<Array3<u8>>,
}

impl TrusSample {
    /// Check the structural invariants: matching modality shapes, values in
    /// [0, 1], and a mask that matches the video's (T, H, W).
    pub fn validate(&self) -> Result<()> {
        if self.bmode.dim() != self.swe.dim() {
            return Err(Error::Invalid(format!(
                "sample {}: bmode shape {:?} != swe shape {:?}",
                self.id,
                self.bmode.dim(),
                self.swe.dim()
            )));
        }
        if self.label > 1 {
            return Err(Error::Invalid(format!(
                "sample {}: label must be 0 or 1, got {}",
                self.id, self.label
            )));
        }
        for (name, arr) in [("bmode", &self.bmode), ("swe", &self.swe)] {
            for (idx, &v) in arr.indexed_iter() {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(Error::Invalid(format!(
                        "sample {}: {name} value {v} outside [0,1] at (t,h,w,c)=({},{},{},{})",
                        self.id, idx.0, idx.1, idx.2, idx.3
                    )));
                }
            }
        }
        if let Some(mask) = &self.lesion_mask {
            let (t, h, w, _) = self.bmode.dim();
            if mask.dim() != (t, h, w) {
                return Err(Error::Invalid(format!(
                    "sample {}: mask shape {:?} does not match video (T,H,W)=({t},{h},{w})",
                    self.id,
                    mask.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.bmode.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    All,
}

/// One manifest row: identifiers, container paths relative to the manifest
/// location, the label, and an optional mask path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub bmode_path: String,
    pub swe_path: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

/// An enumerable dataset: entries plus the master seed that generated them
/// and recorded per-class counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub master_seed: u64,
    pub split_tag: SplitTag,
    pub positives: usize,
    pub negatives: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(master_seed: u64, split_tag: SplitTag, entries: Vec<ManifestEntry>) -> Self {
        let positives = entries.iter().filter(|e| e.label == 1).count();
        let negatives = entries.len() - positives;
        DatasetManifest {
            master_seed,
            split_tag,
            positives,
            negatives,
            entries,
        }
    }

    /// Structural invariants: unique ids, binary labels, counts consistent
    /// with the entries.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample id {}", e.id)));
            }
            if e.label > 1 {
                return Err(Error::Invalid(format!(
                    "entry {}: label must be 0 or 1, got {}",
                    e.id, e.label
                )));
            }
        }
        let pos = self.entries.iter().filter(|e| e.label == 1).count();
        if pos != self.positives || self.entries.len() - pos != self.negatives {
            return Err(Error::Invalid(format!(
                "manifest label counts ({}/{}) disagree with entries ({}/{})",
                self.positives,
                self.negatives,
                pos,
                self.entries.len() - pos
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Invalid(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Load a manifest and verify every referenced container exists
    /// relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
        manifest.validate()?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        for e in &manifest.entries {
            for rel in [Some(&e.bmode_path), Some(&e.swe_path), e.mask_path.as_ref()]
                .into_iter()
                .flatten()
            {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(Error::format(
                        path,
                        format!("entry {} references missing file {}", e.id, p.display()),
                    ));
                }
            }
        }
        Ok(manifest)
    }
}

fn rel_names(id: &str, has_mask: bool) -> (String, String, Option<String>) {
    (
        format!("{id}.bmode.trus"),
        format!("{id}.swe.trus"),
        has_mask.then(|| format!("{id}.mask.trus")),
    )
}

/// Write one sample as container files (one per modality, plus the mask when
/// present) under `dir`, returning the manifest entry that references them.
pub fn save_sample(sample: &TrusSample, dir: &Path) -> Result<ManifestEntry> {
    sample.validate()?;
    let (bmode_name, swe_name, mask_name) = rel_names(&sample.id, sample.lesion_mask.is_some());
    container::write_tensor(
        &dir.join(&bmode_name),
        &TensorData::F32(sample.bmode.clone().into_dyn()),
    )?;
    container::write_tensor(
        &dir.join(&swe_name),
        &TensorData::F32(sample.swe.clone().into_dyn()),
    )?;
    if let (Some(mask), Some(name)) = (&sample.lesion_mask, &mask_name) {
        container::write_tensor(&dir.join(name), &TensorData::U8(mask.clone().into_dyn()))?;
    }
    Ok(ManifestEntry {
        id: sample.id.clone(),
        bmode_path: bmode_name,
        swe_path: swe_name,
        label: sample.label,
        mask_path: mask_name,
    })
}

fn video_from(data: TensorData, path: &Path) -> Result<Array4<f32>> {
    match data {
        TensorData::F32(a) => {
            if a.ndim() != 4 {
                return Err(Error::format(
                    path,
                    format!("expected rank-4 video, got rank {}", a.ndim()),
                ));
            }
            Ok(a.into_dimensionality().unwrap())
        }
        other => Err(Error::format(
            path,
            format!("expected f32 video payload, got dtype {:?}", dtype_name(&other)),
        )),
    }
}

fn dtype_name(t: &TensorData) -> &'static str {
    match t {
        TensorData::F32(_) => "f32",
        TensorData::U8(_) => "u8",
        TensorData::F64(_) => "f64",
    }
}

/// Load one sample through its manifest entry; `root` is the manifest's
/// directory.
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<TrusSample> {
    let bmode_path = root.join(&entry.bmode_path);
    let bmode = video_from(container::read_tensor(&bmode_path)?, &bmode_path)?;
    let swe_path = root.join(&entry.swe_path);
    let swe = video_from(container::read_tensor(&swe_path)?, &swe_path)?;
    let lesion_mask = match &entry.mask_path {
        Some(rel) => {
            let mask_path = root.join(rel);
            match container::read_tensor(&mask_path)? {
                TensorData::U8(a) => {
                    if a.ndim() != 3 {
                        return Err(Error::format(
                            &mask_path,
                            format!("expected rank-3 mask, got rank {}", a.ndim()),
                        ));
                    }
                    Some(a.into_dimensionality().unwrap())
                }
                other => {
                    return Err(Error::format(
                        &mask_path,
                        format!("expected u8 mask payload, got dtype {}", dtype_name(&other)),
                    ))
                }
            }
        }
        None => None,
    };
    let sample = TrusSample {
        id: entry.id.clone(),
        bmode,
        swe,
        label: entry.label,
        lesion_mask,
    };
    sample.validate()?;
    Ok(sample)
}

/// Deterministic stratified split. Per-class test counts are
/// `round(test_fraction * class_count)`, clamped so both splits keep at
/// least one sample of each class.
pub fn split_manifest(
    manifest: &DatasetManifest,
    test_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Invalid(format!(
            "test_fraction must lie in (0,1), got {test_fraction}"
        )));
    }
    let mut pos: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.label == 1).collect();
    let mut neg: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.label == 0).collect();
    for (name, class) in [("positive", &pos), ("negative", &neg)] {
        if class.len() < 2 {
            return Err(Error::Invalid(format!(
                "stratified split impossible: {name} class has {} sample(s), need >= 2",
                class.len()
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let take = |n: usize| -> usize {
        let raw = (test_fraction * n as f64).round() as usize;
        raw.clamp(1, n - 1)
    };
    let n_test_pos = take(pos.len());
    let n_test_neg = take(neg.len());

    let mut test: Vec<ManifestEntry> = pos[..n_test_pos]
        .iter()
        .chain(neg[..n_test_neg].iter())
        .map(|e| (*e).clone())
        .collect();
    let mut train: Vec<ManifestEntry> = pos[n_test_pos..]
        .iter()
        .chain(neg[n_test_neg..].iter())
        .map(|e| (*e).clone())
        .collect();
    test.sort_by(|a, b| a.id.cmp(&b.id));
    train.sort_by(|a, b| a.id.cmp(&b.id));

    Ok((
        DatasetManifest::new(manifest.master_seed, SplitTag::Train, train),
        DatasetManifest::new(manifest.master_seed, SplitTag::Test, test),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn sample(id: &str, label: u8, with_mask: bool) -> TrusSample {
        let bmode = Array::from_shape_fn((3, 4, 4, 1), |(t, h, w, _)| {
            ((t * 16 + h * 4 + w) as f32 / 48.0).min(1.0)
        });
        let swe = bmode.mapv(|v| 1.0 - v);
        let mask = with_mask.then(|| {
            let mut m = Array3::zeros((3, 4, 4));
            m[[1, 2, 2]] = 1;
            m
        });
        TrusSample {
            id: id.into(),
            bmode,
            swe,
            label,
            lesion_mask: mask,
        }
    }

    #[test]
    fn sample_roundtrip_bitwise() {
        let dir = tempdir().unwrap();
        let s = sample("s0001", 1, true);
        let entry = save_sample(&s, dir.path()).unwrap();
        let back = load_sample(dir.path(), &entry).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn manifest_roundtrip_and_missing_file_detection() {
        let dir = tempdir().unwrap();
        let entries: Vec<ManifestEntry> = (0..4)
            .map(|i| {
                let s = sample(&format!("s{i:04}"), (i % 2) as u8, false);
                save_sample(&s, dir.path()).unwrap()
            })
            .collect();
        let m = DatasetManifest::new(7, SplitTag::All, entries);
        let mpath = dir.path().join("manifest.toml");
        m.save(&mpath).unwrap();
        let back = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(m, back);

        std::fs::remove_file(dir.path().join("s0002.swe.trus")).unwrap();
        let err = DatasetManifest::load(&mpath).unwrap_err();
        assert!(err.to_string().contains("s0002"), "{err}");
    }

    fn synthetic_manifest(n_pos: usize, n_neg: usize) -> DatasetManifest {
        let entries = (0..n_pos + n_neg)
            .map(|i| ManifestEntry {
                id: format!("s{i:04}"),
                bmode_path: format!("s{i:04}.bmode.trus"),
                swe_path: format!("s{i:04}.swe.trus"),
                label: u8::from(i < n_pos),
                mask_path: None,
            })
            .collect();
        DatasetManifest::new(0, SplitTag::All, entries)
    }

    #[test]
    fn split_matches_reference_counts() {
        // 512 entries at the reference prevalence, fraction 112/512.
        let m = synthetic_manifest(346, 166);
        let (train, test) = split_manifest(&m, 112.0 / 512.0, 3).unwrap();
        assert_eq!(train.entries.len(), 400);
        assert_eq!(test.entries.len(), 112);
    }

    #[test]
    fn split_is_deterministic() {
        let m = synthetic_manifest(20, 12);
        let a = split_manifest(&m, 0.25, 11).unwrap();
        let b = split_manifest(&m, 0.25, 11).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = split_manifest(&m, 0.25, 12).unwrap();
        assert_ne!(a.1.entries, c.1.entries);
    }

    #[test]
    fn small_split_stratification() {
        // 10 entries (5 positive), fraction 0.2: the test split holds
        // exactly one of each class.
        let m = synthetic_manifest(5, 5);
        let (train, test) = split_manifest(&m, 0.2, 5).unwrap();
        assert_eq!(test.positives, 1);
        assert_eq!(test.negatives, 1);
        assert_eq!(train.positives, 4);
        assert_eq!(train.negatives, 4);
    }

    #[test]
    fn tiny_class_rejected() {
        let m = synthetic_manifest(1, 8);
        assert!(split_manifest(&m, 0.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn split_disjoint_exhaustive_stratified(
            n_pos in 2usize..40,
            n_neg in 2usize..40,
            frac in 0.05f64..0.95,
            seed in 0u64..500,
        ) {
            let m = synthetic_manifest(n_pos, n_neg);
            let (train, test) = split_manifest(&m, frac, seed).unwrap();
            let mut ids: Vec<&str> = train.entries.iter().chain(test.entries.iter())
                .map(|e| e.id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), n_pos + n_neg);

            // Per-class test counts sit within one sample of frac * count.
            let expected_pos = frac * n_pos as f64;
            prop_assert!((test.positives as f64 - expected_pos).abs() <= 1.0);
            let expected_neg = frac * n_neg as f64;
            prop_assert!((test.negatives as f64 - expected_neg).abs() <= 1.0);
            prop_assert!(train.positives >= 1 && train.negatives >= 1);
            prop_assert!(test.positives >= 1 && test.negatives >= 1);
        }
    }
}
