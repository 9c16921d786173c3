//! Training-time data augmentation.
//!
//! Eight transforms applied in a fixed order, each firing independently
//! with its configured probability: joint rotation+scaling, additive
//! Gaussian noise, Gaussian blur, brightness, contrast, gamma,
//! low-resolution simulation, and mirroring. Spatial steps (rotation+
//! scaling, mirroring) move the image and label together — trilinear
//! interpolation for the image, nearest-neighbour for the label, so labels
//! stay strictly binary. Intensity steps never touch the label.
//!
//! All randomness comes from the caller's stream, so a given `(seed, case)`
//! pair always produces the same augmentation. Outputs may leave `[0, 1]`
//! (noise and brightness can overshoot); downstream consumers must not
//! revalidate intensity bounds on augmented samples. Degenerate parameter
//! ranges are clamped rather than rejected.

use ndarray::{Array3, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::AugmentConfig;
use crate::volume::VolumeSample;

/// Trilinear sample of `a` at fractional index `q`, zero outside.
fn sample_trilinear(a: &Array3<f32>, q: [f64; 3]) -> f32 {
    let dim = a.dim();
    let n = [dim.0, dim.1, dim.2];
    let mut acc = 0.0f64;
    let base = [q[0].floor(), q[1].floor(), q[2].floor()];
    let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    for corner in 0..8usize {
        let mut w = 1.0f64;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for (axis, &b) in base.iter().enumerate() {
            let hi = corner >> axis & 1 == 1;
            w *= if hi { frac[axis] } else { 1.0 - frac[axis] };
            let coord = b as isize + hi as isize;
            if coord < 0 || coord as usize >= n[axis] {
                inside = false;
                break;
            }
            idx[axis] = coord as usize;
        }
        if inside && w > 0.0 {
            acc += w * a[idx] as f64;
        }
    }
    acc as f32
}

/// Nearest-neighbour sample of a label volume at fractional index `q`,
/// zero outside.
fn sample_nearest(a: &Array3<u8>, q: [f64; 3]) -> u8 {
    let dim = a.dim();
    let n = [dim.0, dim.1, dim.2];
    let mut idx = [0usize; 3];
    for (axis, &coord) in q.iter().enumerate() {
        let r = coord.round();
        if r < 0.0 || r as usize >= n[axis] {
            return 0;
        }
        idx[axis] = r as usize;
    }
    a[idx]
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: Mat3, b: Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Rotation matrix: Rz(az) · Ry(ay) · Rx(ax), angles in radians, acting on
/// array coordinates (axis 0, 1, 2).
fn rotation(ax: f64, ay: f64, az: f64) -> Mat3 {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(rz, matmul(ry, rx))
}

/// Rotate about the volume centre and scale by `scale` (> 1 enlarges the
/// content), resampling the image trilinearly and the label by nearest
/// neighbour. Regions that map outside the source become 0.
pub fn rotate_scale(
    image: &Array3<f32>,
    label: &Array3<u8>,
    angles_deg: [f64; 3],
    scale: f64,
) -> (Array3<f32>, Array3<u8>) {
    let r = rotation(
        angles_deg[0].to_radians(),
        angles_deg[1].to_radians(),
        angles_deg[2].to_radians(),
    );
    let scale = scale.max(0.05);
    let dim = image.dim();
    let centre = [
        (dim.0 as f64 - 1.0) / 2.0,
        (dim.1 as f64 - 1.0) / 2.0,
        (dim.2 as f64 - 1.0) / 2.0,
    ];
    // Inverse map target -> source: undo the scaling, then the rotation
    // (transpose = inverse for a pure rotation).
    let source = |p: [usize; 3]| -> [f64; 3] {
        let d = [
            (p[0] as f64 - centre[0]) / scale,
            (p[1] as f64 - centre[1]) / scale,
            (p[2] as f64 - centre[2]) / scale,
        ];
        std::array::from_fn(|i| {
            centre[i] + r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2]
        })
    };
    let new_image =
        Array3::from_shape_fn(dim, |(x, y, z)| sample_trilinear(image, source([x, y, z])));
    let new_label =
        Array3::from_shape_fn(dim, |(x, y, z)| sample_nearest(label, source([x, y, z])));
    (new_image, new_label)
}

/// Separable Gaussian blur, kernel truncated at three standard deviations
/// and renormalised at the borders.
fn gaussian_blur(image: &Array3<f32>, sigma: f64) -> Array3<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> =
        (-radius..=radius).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let mut out = image.clone();
    for axis in 0..3 {
        let src = out.clone();
        Zip::from(out.lanes_mut(Axis(axis))).and(src.lanes(Axis(axis))).for_each(
            |mut o, lane| {
                let n = lane.len() as isize;
                for i in 0..n {
                    let mut acc = 0.0f64;
                    let mut norm = 0.0f64;
                    for (w, k) in weights.iter().zip(-radius..=radius) {
                        let j = i + k;
                        if j >= 0 && j < n {
                            acc += w * lane[j as usize] as f64;
                            norm += w;
                        }
                    }
                    o[i as usize] = (acc / norm) as f32;
                }
            },
        );
    }
    out
}

/// Trilinear resize to `shape` with corner alignment.
fn resize_trilinear(src: &Array3<f32>, shape: [usize; 3]) -> Array3<f32> {
    let sdim = src.dim();
    let sn = [sdim.0, sdim.1, sdim.2];
    let step = |axis: usize| -> f64 {
        if shape[axis] <= 1 {
            0.0
        } else {
            (sn[axis] - 1) as f64 / (shape[axis] - 1) as f64
        }
    };
    let steps = [step(0), step(1), step(2)];
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(x, y, z)| {
        sample_trilinear(src, [x as f64 * steps[0], y as f64 * steps[1], z as f64 * steps[2]])
    })
}

fn draw(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] >= range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

fn fires(rng: &mut ChaCha8Rng, prob: f64) -> bool {
    rng.random_range(0.0..1.0) < prob
}

/// Apply the eight-step augmentation pipeline to one sample.
pub fn augment(sample: &VolumeSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> VolumeSample {
    let mut image = sample.image.clone();
    let mut label = sample.label.clone();

    // (i) joint rotation + scaling.
    if fires(rng, cfg.rotation_scaling_prob) {
        let max = cfg.rotation_max_deg.abs();
        let angles = [
            draw(rng, [-max, max]),
            draw(rng, [-max, max]),
            draw(rng, [-max, max]),
        ];
        let scale = draw(rng, cfg.scale_range);
        (image, label) = rotate_scale(&image, &label, angles, scale);
    }

    // (ii) additive Gaussian noise.
    if fires(rng, cfg.noise_prob) {
        let sigma = draw(rng, cfg.noise_sigma_range).max(0.0);
        if sigma > 0.0 {
            let normal = Normal::new(0.0f64, sigma).unwrap();
            image.mapv_inplace(|v| v + normal.sample(rng) as f32);
        }
    }

    // (iii) Gaussian blur.
    if fires(rng, cfg.blur_prob) {
        let sigma = draw(rng, cfg.blur_sigma_range).max(0.0);
        image = gaussian_blur(&image, sigma);
    }

    // (iv) brightness: multiplicative.
    if fires(rng, cfg.brightness_prob) {
        let factor = draw(rng, cfg.brightness_range) as f32;
        image.mapv_inplace(|v| v * factor);
    }

    // (v) contrast: scale around the mean intensity.
    if fires(rng, cfg.contrast_prob) {
        let factor = draw(rng, cfg.contrast_range) as f32;
        let mean = image.mean().unwrap_or(0.0);
        image.mapv_inplace(|v| mean + factor * (v - mean));
    }

    // (vi) gamma on the volume's own intensity span.
    if fires(rng, cfg.gamma_prob) {
        let gamma = draw(rng, cfg.gamma_range).max(1e-3);
        let lo = image.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = image.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi - lo > 1e-6 {
            let span = hi - lo;
            image.mapv_inplace(|v| {
                lo + ((v - lo) / span).clamp(0.0, 1.0).powf(gamma as f32) * span
            });
        }
    }

    // (vii) low-resolution simulation: downsample, then back up.
    if fires(rng, cfg.lowres_prob) {
        let zoom = draw(rng, cfg.lowres_zoom_range).clamp(0.05, 1.0);
        let dim = image.dim();
        let full = [dim.0, dim.1, dim.2];
        let small = std::array::from_fn(|a| {
            ((full[a] as f64 * zoom).round() as usize).clamp(1, full[a])
        });
        if small != full {
            image = resize_trilinear(&resize_trilinear(&image, small), full);
        }
    }

    // (viii) mirroring: symmetric on image and label.
    if fires(rng, cfg.mirror_prob) {
        for axis in 0..3 {
            if fires(rng, 0.5) {
                image.invert_axis(Axis(axis));
                label.invert_axis(Axis(axis));
            }
        }
    }

    VolumeSample {
        case_id: sample.case_id.clone(),
        image,
        label,
        domain: sample.domain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn asymmetric_sample() -> VolumeSample {
        let image = Array3::from_shape_fn((8, 8, 8), |(x, y, z)| {
            (x as f32 * 0.31 + y as f32 * 0.07 + z as f32 * 0.011).sin() * 0.4 + 0.5
        });
        let mut label = Array3::<u8>::zeros((8, 8, 8));
        for x in 2..5 {
            for y in 1..3 {
                label[[x, y, 4]] = 1;
            }
        }
        VolumeSample { case_id: "aug".into(), image, label, domain: 0 }
    }

    #[test]
    fn zero_probabilities_are_the_identity() {
        let sample = asymmetric_sample();
        let mut rng = stream(1, "augment", &[0]);
        let out = augment(&sample, &AugmentConfig::disabled(), &mut rng);
        assert_eq!(out.image, sample.image);
        assert_eq!(out.label, sample.label);
    }

    #[test]
    fn mirroring_twice_with_the_same_draws_is_the_identity() {
        let sample = asymmetric_sample();
        let cfg = AugmentConfig { mirror_prob: 1.0, ..AugmentConfig::disabled() };
        // Seed chosen so at least one axis actually flips.
        let mut r1 = stream(5, "augment", &[1]);
        let once = augment(&sample, &cfg, &mut r1);
        assert_ne!(once.image, sample.image, "seed produced a no-op mirror");
        // Replaying the identical stream flips the identical axes.
        let mut r2 = stream(5, "augment", &[1]);
        let twice = augment(&once, &cfg, &mut r2);
        assert_eq!(twice.image, sample.image);
        assert_eq!(twice.label, sample.label);
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let sample = asymmetric_sample();
        let (image, label) = rotate_scale(&sample.image, &sample.label, [0.0, 0.0, 90.0], 1.0);
        // Rotating by 90 deg about axis 2 sends target (u, v) to source
        // (v, n-1-u): forward x' = -y, y' = x about the centre.
        let n = 8usize;
        for u in 0..n {
            for v in 0..n {
                for z in 0..n {
                    let want = sample.image[[v, n - 1 - u, z]];
                    let got = image[[u, v, z]];
                    assert!(
                        (want - got).abs() < 1e-5,
                        "image ({u},{v},{z}): {got} vs {want}"
                    );
                    assert_eq!(label[[u, v, z]], sample.label[[v, n - 1 - u, z]]);
                }
            }
        }
    }

    #[test]
    fn identity_transform_resamples_exactly() {
        let sample = asymmetric_sample();
        let (image, label) = rotate_scale(&sample.image, &sample.label, [0.0, 0.0, 0.0], 1.0);
        // Source coordinates are exact integers, so trilinear weights are
        // degenerate and the volume must round-trip bit-for-bit.
        assert_eq!(image, sample.image);
        assert_eq!(label, sample.label);
    }

    #[test]
    fn full_pipeline_preserves_shape_and_binary_labels() {
        let sample = asymmetric_sample();
        let cfg = AugmentConfig {
            rotation_scaling_prob: 1.0,
            noise_prob: 1.0,
            blur_prob: 1.0,
            brightness_prob: 1.0,
            contrast_prob: 1.0,
            gamma_prob: 1.0,
            lowres_prob: 1.0,
            mirror_prob: 1.0,
            ..AugmentConfig::default()
        };
        for trial in 0..10u64 {
            let mut rng = stream(9, "augment", &[trial]);
            let out = augment(&sample, &cfg, &mut rng);
            assert_eq!(out.image.dim(), sample.image.dim());
            assert_eq!(out.label.dim(), sample.label.dim());
            assert!(out.label.iter().all(|&v| v <= 1), "label left binary range");
            assert!(out.image.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn intensity_steps_never_touch_the_label() {
        let sample = asymmetric_sample();
        let cfg = AugmentConfig {
            noise_prob: 1.0,
            blur_prob: 1.0,
            brightness_prob: 1.0,
            contrast_prob: 1.0,
            gamma_prob: 1.0,
            lowres_prob: 1.0,
            ..AugmentConfig::disabled()
        };
        let mut rng = stream(13, "augment", &[0]);
        let out = augment(&sample, &cfg, &mut rng);
        assert_eq!(out.label, sample.label);
        assert_ne!(out.image, sample.image);
    }

    #[test]
    fn augmentation_is_reproducible_from_the_stream() {
        let sample = asymmetric_sample();
        let cfg = AugmentConfig::default();
        let out_a = augment(&sample, &cfg, &mut stream(21, "augment", &[4]));
        let out_b = augment(&sample, &cfg, &mut stream(21, "augment", &[4]));
        assert_eq!(out_a.image, out_b.image);
        assert_eq!(out_a.label, out_b.label);
        let out_c = augment(&sample, &cfg, &mut stream(21, "augment", &[5]));
        assert!(out_c.image != out_a.image || out_c.label != out_a.label);
    }
}
