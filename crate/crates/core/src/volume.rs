//! Volumes, samples, and minimal preprocessing.
//!
//! Images are `Array3<f32>` indexed `[x, y, z]`; labels are binary
//! `Array3<u8>`. Preprocessing is deliberately minimal: min-max rescale to
//! `[0, 1]` followed by centre crop / zero pad to a target shape. Cropping
//! removes the same margin on both sides (the extra voxel of an odd margin
//! goes to the high side); padding mirrors that convention.

use ndarray::Array3;

use crate::error::{Error, Result};

/// One case: image, binary label, domain index, and a stable identifier.
#[derive(Debug, Clone)]
pub struct VolumeSample {
    pub case_id: String,
    pub image: Array3<f32>,
    pub label: Array3<u8>,
    /// Index into the run's [`crate::config::DomainSet`].
    pub domain: usize,
}

impl VolumeSample {
    /// Check the invariants: matching shapes, binary label, image in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.label.dim() {
            let (i, l) = (self.image.dim(), self.label.dim());
            return Err(Error::ShapeMismatch { image: [i.0, i.1, i.2], label: [l.0, l.1, l.2] });
        }
        if let Some(&v) = self.label.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinaryLabel(v as f64));
        }
        if let Some(&v) = self.image.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Format {
                path: self.case_id.clone().into(),
                msg: format!("image intensity {v} outside [0, 1]"),
            });
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.image.dim();
        [d.0, d.1, d.2]
    }
}

/// Min-max rescale to `[0, 1]`. Errors on constant volumes, where the mapping
/// is undefined.
pub fn rescale_unit(raw: &Array3<f32>) -> Result<Array3<f32>> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in raw.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
        return Err(Error::ConstantIntensity);
    }
    let span = hi - lo;
    Ok(raw.mapv(|v| (v - lo) / span))
}

/// Centre crop and/or zero pad `vol` to `target`, independently per axis.
pub fn crop_pad<T: Copy>(vol: &Array3<T>, target: [usize; 3], fill: T) -> Array3<T> {
    let src = vol.dim();
    let src = [src.0, src.1, src.2];
    let mut out = Array3::from_elem((target[0], target[1], target[2]), fill);
    // Per axis: how far into the source / destination the copied block starts.
    let mut src_off = [0usize; 3];
    let mut dst_off = [0usize; 3];
    let mut len = [0usize; 3];
    for a in 0..3 {
        if src[a] >= target[a] {
            src_off[a] = (src[a] - target[a]) / 2;
            dst_off[a] = 0;
            len[a] = target[a];
        } else {
            src_off[a] = 0;
            dst_off[a] = (target[a] - src[a]) / 2;
            len[a] = src[a];
        }
    }
    for x in 0..len[0] {
        for y in 0..len[1] {
            for z in 0..len[2] {
                out[[dst_off[0] + x, dst_off[1] + y, dst_off[2] + z]] =
                    vol[[src_off[0] + x, src_off[1] + y, src_off[2] + z]];
            }
        }
    }
    out
}

/// Minimal preprocessing: rescale to `[0, 1]`, then centre crop / pad to
/// `target`.
pub fn preprocess_minimal(raw: &Array3<f32>, target: [usize; 3]) -> Result<Array3<f32>> {
    Ok(crop_pad(&rescale_unit(raw)?, target, 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    #[test]
    fn rescale_maps_extremes_to_unit_interval() {
        let mut v = Array3::<f32>::zeros((2, 2, 2));
        v[[0, 0, 0]] = 10.0;
        v[[0, 0, 1]] = 20.0;
        v[[0, 1, 0]] = 30.0;
        let r = rescale_unit(&v).unwrap();
        // 0 -> 0, 10 -> 1/3, 20 -> 2/3, 30 -> 1
        assert_abs_diff_eq!(r[[0, 0, 0]], 1.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r[[0, 0, 1]], 2.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r[[0, 1, 0]], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(r[[1, 1, 1]], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn rescale_of_exact_unit_field_is_identity() {
        let mut v = Array3::<f32>::zeros((3, 3, 3));
        v[[0, 0, 0]] = 1.0;
        v[[1, 1, 1]] = 0.25;
        v[[2, 2, 2]] = 0.75;
        let r = rescale_unit(&v).unwrap();
        for (a, b) in v.iter().zip(r.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 0.0);
        }
    }

    #[test]
    fn rescale_rejects_constant_volume() {
        let v = Array3::<f32>::from_elem((4, 4, 4), 3.5);
        assert!(matches!(rescale_unit(&v), Err(Error::ConstantIntensity)));
    }

    #[test]
    fn crop_matches_index_arithmetic_oracle() {
        // 7x6x5 volume with a unique value per voxel, cropped to 4x4x4.
        let v = Array3::from_shape_fn((7, 6, 5), |(x, y, z)| (x * 100 + y * 10 + z) as f32);
        let c = crop_pad(&v, [4, 4, 4], -1.0);
        // Offsets: (7-4)/2 = 1, (6-4)/2 = 1, (5-4)/2 = 0.
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    assert_eq!(c[[x, y, z]], v[[x + 1, y + 1, z]]);
                }
            }
        }
    }

    #[test]
    fn pad_centres_source_block() {
        let v = Array3::from_elem((2, 2, 2), 7u8);
        let p = crop_pad(&v, [5, 4, 2], 0u8);
        // Offsets: (5-2)/2 = 1, (4-2)/2 = 1, 0.
        let mut sevens = 0;
        for x in 0..5 {
            for y in 0..4 {
                for z in 0..2 {
                    let inside = (1..3).contains(&x) && (1..3).contains(&y);
                    assert_eq!(p[[x, y, z]], if inside { 7 } else { 0 });
                    sevens += (p[[x, y, z]] == 7) as usize;
                }
            }
        }
        assert_eq!(sevens, 8);
    }

    #[test]
    fn crop_then_pad_roundtrips_interior() {
        let v = Array3::from_shape_fn((6, 6, 6), |(x, y, z)| (x + 10 * y + 100 * z) as f32);
        let small = crop_pad(&v, [4, 4, 4], 0.0);
        let back = crop_pad(&small, [6, 6, 6], 0.0);
        for x in 1..5 {
            for y in 1..5 {
                for z in 1..5 {
                    assert_eq!(back[[x, y, z]], v[[x, y, z]]);
                }
            }
        }
    }

    #[test]
    fn sample_validation_catches_problems() {
        let good = VolumeSample {
            case_id: "c0".into(),
            image: Array3::zeros((3, 3, 3)),
            label: Array3::zeros((3, 3, 3)),
            domain: 0,
        };
        good.validate().unwrap();

        let mut bad_label = good.clone();
        bad_label.label[[1, 1, 1]] = 2;
        assert!(matches!(bad_label.validate(), Err(Error::NonBinaryLabel(_))));

        let mut bad_shape = good.clone();
        bad_shape.label = Array3::zeros((3, 3, 2));
        assert!(matches!(bad_shape.validate(), Err(Error::ShapeMismatch { .. })));

        let mut bad_range = good;
        bad_range.image[[0, 0, 0]] = 1.5;
        assert!(bad_range.validate().is_err());
    }
}
