//! Intensity normalization and spatial-temporal resizing.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

/// Min-max normalize a whole video to [0, 1]. A constant video maps to all
/// zeros. Non-finite values are rejected with the first offending index.
pub fn normalize_intensities(raw: &Array4<f32>) -> Result<Array4<f32>> {
    if raw.is_empty() {
        return Err(Error::Invalid("cannot normalize an empty video".into()));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (idx, &v) in raw.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::Invalid(format!(
                "non-finite value {v} at (t,h,w,c)=({},{},{},{})",
                idx.0, idx.1, idx.2, idx.3
            )));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        return Ok(Array4::zeros(raw.raw_dim()));
    }
    let span = hi - lo;
    Ok(raw.mapv(|v| (v - lo) / span))
}

/// Trilinear resize of a (T, H, W) volume with endpoint-to-endpoint index
/// mapping. Linear interpolation cannot overshoot the input value range.
pub(crate) fn resize_trilinear(vol: &Array3<f64>, target: (usize, usize, usize)) -> Array3<f64> {
    let resized_t = resample_axis0(vol, target.0);
    let swapped = resized_t.permuted_axes([1, 0, 2]).as_standard_layout().to_owned();
    let resized_h = resample_axis0(&swapped, target.1);
    let swapped = resized_h.permuted_axes([2, 1, 0]).as_standard_layout().to_owned();
    let resized_w = resample_axis0(&swapped, target.2);
    // axes are now (W', T', H'); restore (T', H', W')
    resized_w.permuted_axes([1, 2, 0]).as_standard_layout().to_owned()
}

/// Linear resample along axis 0 of a 3-D array.
fn resample_axis0(vol: &Array3<f64>, out_len: usize) -> Array3<f64> {
    let (src_len, d1, d2) = vol.dim();
    let mut out = Array3::zeros((out_len, d1, d2));
    for j in 0..out_len {
        let src = if out_len > 1 {
            j as f64 * (src_len - 1) as f64 / (out_len - 1) as f64
        } else {
            0.0
        };
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        let w1 = src - i0 as f64;
        let w0 = 1.0 - w1;
        for a in 0..d1 {
            for b in 0..d2 {
                out[[j, a, b]] = w0 * vol[[i0, a, b]] + w1 * vol[[i1, a, b]];
            }
        }
    }
    out
}

/// Trilinear resize over (T, H, W); channels are resampled independently.
pub fn resize_video(video: &Array4<f32>, target: (usize, usize, usize)) -> Result<Array4<f32>> {
    if video.is_empty() {
        return Err(Error::Invalid("cannot resize an empty video".into()));
    }
    let (t2, h2, w2) = target;
    if t2 == 0 || h2 == 0 || w2 == 0 {
        return Err(Error::Invalid(format!(
            "resize target dims must be >= 1, got ({t2},{h2},{w2})"
        )));
    }
    let (_, _, _, channels) = video.dim();
    let mut out = Array4::<f32>::zeros((t2, h2, w2, channels));
    for c in 0..channels {
        let chan = video
            .index_axis(ndarray::Axis(3), c)
            .mapv(|v| v as f64)
            .as_standard_layout()
            .to_owned();
        let resized = resize_trilinear(&chan, target);
        for ((t, h, w), &v) in resized.indexed_iter() {
            out[[t, h, w, c]] = v as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};
    use proptest::prelude::*;

    #[test]
    fn already_normalized_unchanged() {
        let v = Array4::from_shape_vec((1, 1, 2, 1), vec![0.0f32, 1.0]).unwrap();
        let out = normalize_intensities(&v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn min_max_formula() {
        let v = Array4::from_shape_vec((1, 1, 3, 1), vec![10.0f32, 20.0, 30.0]).unwrap();
        let out = normalize_intensities(&v).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn constant_video_maps_to_zeros() {
        let v = Array4::from_elem((2, 2, 2, 1), 7.5f32);
        let out = normalize_intensities(&v).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_named_by_index() {
        let mut v = Array4::zeros((2, 2, 2, 1));
        v[[1, 0, 1, 0]] = f32::NAN;
        let err = normalize_intensities(&v).unwrap_err();
        assert!(err.to_string().contains("(1,0,1,0)"), "{err}");
    }

    #[test]
    fn identity_resize() {
        let v = Array4::from_shape_fn((3, 4, 5, 2), |(t, h, w, c)| {
            (t * 100 + h * 10 + w + c) as f32 / 50.0
        });
        let out = resize_video(&v, (3, 4, 5)).unwrap();
        for (a, b) in v.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_video_resizes_to_constant() {
        let v = Array4::from_elem((2, 3, 3, 1), 0.25f32);
        let out = resize_video(&v, (5, 7, 2)).unwrap();
        for &x in out.iter() {
            assert!((x - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_profile_upsample() {
        // {0, 1} along W upsampled to length 3 must give {0, 0.5, 1}.
        let v = Array4::from_shape_vec((1, 1, 2, 1), vec![0.0f32, 1.0]).unwrap();
        let out = resize_video(&v, (1, 1, 3)).unwrap();
        assert_eq!(out.as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn zero_target_rejected() {
        let v = Array4::from_elem((2, 2, 2, 1), 1.0f32);
        assert!(resize_video(&v, (0, 2, 2)).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(vals in proptest::collection::vec(-100.0f32..100.0, 8)) {
            let v = Array4::from_shape_vec((2, 2, 2, 1), vals).unwrap();
            let once = normalize_intensities(&v).unwrap();
            let twice = normalize_intensities(&once).unwrap();
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }

        #[test]
        fn resize_preserves_bounds(
            vals in proptest::collection::vec(-5.0f32..5.0, 24),
            t2 in 1usize..6, h2 in 1usize..6, w2 in 1usize..6,
        ) {
            let v = Array4::from_shape_vec((2, 3, 4, 1), vals).unwrap();
            let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let out = resize_video(&v, (t2, h2, w2)).unwrap();
            for &x in out.iter() {
                prop_assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
            }
        }
    }
}
