//! Synthetic multi-domain lesion volumes.
//!
//! Each case is a smooth background with hyperintense ellipsoidal "lesions"
//! (which define the binary label), pushed through a domain-specific
//! appearance chain: multiplicative low-frequency bias field, additive
//! Gaussian noise, clamp to `[0, 1]`, gamma transform.
//!
//! Lesion geometry and the background are drawn from random streams keyed by
//! the case index alone — never the domain — so labels are identically
//! distributed across domains and the only domain signal is appearance. The
//! appearance draws are keyed by `(domain, case)`. Everything is
//! reproducible from one seed.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{write_sample, DatasetManifest, ManifestEntry, Split};
use crate::rng::stream;
use crate::volume::VolumeSample;

/// Appearance and lesion-geometry parameters for one synthetic domain.
///
/// Geometry ranges must agree across the domains of a dataset (labels are
/// shared in distribution); the appearance fields must *differ* somewhere,
/// or the domains are indistinguishable and unlearning has nothing to erase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainSpec {
    /// Strength of the multiplicative low-frequency bias field; the field is
    /// `1 + amplitude * g` with smooth `g` in `[-1, 1]`.
    pub bias_field_amplitude: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Exponent of the final gamma transform (applied in `[0, 1]`).
    pub gamma: f64,
    /// Inclusive range of lesions per case.
    pub lesion_count_range: [usize; 2],
    /// Range of ellipsoid semi-axes, voxels.
    pub lesion_radius_range: [f64; 2],
}

impl SyntheticDomainSpec {
    fn validate(&self, name: &str) -> Result<()> {
        let err = |why: &str| {
            Err(Error::DegenerateLesionSpec { name: name.to_string(), why: why.to_string() })
        };
        if self.lesion_count_range[0] > self.lesion_count_range[1] {
            return err("lesion count range is empty");
        }
        if self.lesion_count_range[1] == 0 {
            return err("lesion count range is [0, 0]; labels would always be empty");
        }
        if !(self.lesion_radius_range[0] <= self.lesion_radius_range[1]) {
            return err("lesion radius range is empty");
        }
        if !(self.lesion_radius_range[0] > 0.0) {
            return err("lesion radius must be positive");
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return err("gamma must be positive");
        }
        if !(self.bias_field_amplitude >= 0.0 && self.bias_field_amplitude < 1.0) {
            return err("bias amplitude must be in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0) {
            return err("noise sigma must be non-negative");
        }
        Ok(())
    }

    fn same_geometry(&self, other: &Self) -> bool {
        self.lesion_count_range == other.lesion_count_range
            && self.lesion_radius_range == other.lesion_radius_range
    }

    fn same_appearance(&self, other: &Self) -> bool {
        self.bias_field_amplitude == other.bias_field_amplitude
            && self.noise_sigma == other.noise_sigma
            && self.gamma == other.gamma
    }
}

/// Two shipped domains with strongly different appearance: a clean, linear
/// scanner and a noisy, biased, gamma-compressed one.
pub fn default_domain_specs() -> Vec<(String, SyntheticDomainSpec)> {
    let geometry = ([2usize, 5usize], [2.0, 4.5]);
    vec![
        (
            "site_a".to_string(),
            SyntheticDomainSpec {
                bias_field_amplitude: 0.05,
                noise_sigma: 0.02,
                gamma: 1.0,
                lesion_count_range: geometry.0,
                lesion_radius_range: geometry.1,
            },
        ),
        (
            "site_b".to_string(),
            SyntheticDomainSpec {
                bias_field_amplitude: 0.45,
                noise_sigma: 0.12,
                gamma: 0.55,
                lesion_count_range: geometry.0,
                lesion_radius_range: geometry.1,
            },
        ),
    ]
}

/// `n` domains whose appearance parameters interpolate linearly between the
/// two shipped defaults (clean → noisy/biased/gamma-compressed), all sharing
/// the default lesion geometry. `domain_spec_ladder(2)` equals
/// [`default_domain_specs`]. Names run `site_a`, `site_b`, …
pub fn domain_spec_ladder(n: usize) -> Result<Vec<(String, SyntheticDomainSpec)>> {
    if n < 2 {
        return Err(Error::TooFewDomains(n));
    }
    let ends = default_domain_specs();
    let (lo, hi) = (&ends[0].1, &ends[1].1);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let specs = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let mut name = String::new();
            let mut k = i;
            loop {
                name.insert(0, char::from(b'a' + (k % 26) as u8));
                k /= 26;
                if k == 0 {
                    break;
                }
                k -= 1;
            }
            (
                format!("site_{name}"),
                SyntheticDomainSpec {
                    bias_field_amplitude: lerp(lo.bias_field_amplitude, hi.bias_field_amplitude, t),
                    noise_sigma: lerp(lo.noise_sigma, hi.noise_sigma, t),
                    gamma: lerp(lo.gamma, hi.gamma, t),
                    ..lo.clone()
                },
            )
        })
        .collect::<Vec<_>>();
    validate_specs(&specs)?;
    Ok(specs)
}

fn validate_specs(specs: &[(String, SyntheticDomainSpec)]) -> Result<()> {
    if specs.len() < 2 {
        return Err(Error::TooFewDomains(specs.len()));
    }
    for (name, spec) in specs {
        spec.validate(name)?;
    }
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            let (a, b) = (&specs[i], &specs[j]);
            if !a.1.same_geometry(&b.1) {
                return Err(Error::GeometryRangesDiffer { a: a.0.clone(), b: b.0.clone() });
            }
            if a.1.same_appearance(&b.1) {
                return Err(Error::IndistinguishableSpecs { a: a.0.clone(), b: b.0.clone() });
            }
        }
    }
    Ok(())
}

/// Smooth random field in `[-1, 1]`: Gaussian values on a coarse grid,
/// trilinearly interpolated up to `shape`, then normalised by the max
/// magnitude. `grid` controls the spatial frequency.
fn smooth_field(shape: [usize; 3], grid: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let coarse =
        Array3::from_shape_simple_fn((grid, grid, grid), || normal.sample(rng));

    let mut field = Array3::<f64>::zeros((shape[0], shape[1], shape[2]));
    let scale = |i: usize, n: usize| -> f64 {
        if n == 1 {
            0.0
        } else {
            i as f64 / (n - 1) as f64 * (grid - 1) as f64
        }
    };
    for ((x, y, z), v) in field.indexed_iter_mut() {
        let (fx, fy, fz) = (scale(x, shape[0]), scale(y, shape[1]), scale(z, shape[2]));
        let (ix, iy, iz) = (fx.floor() as usize, fy.floor() as usize, fz.floor() as usize);
        let (tx, ty, tz) = (fx - ix as f64, fy - iy as f64, fz - iz as f64);
        let up = |i: usize| (i + 1).min(grid - 1);
        let c = |xi: usize, yi: usize, zi: usize| coarse[[xi, yi, zi]];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let v00 = lerp(c(ix, iy, iz), c(up(ix), iy, iz), tx);
        let v01 = lerp(c(ix, iy, up(iz)), c(up(ix), iy, up(iz)), tx);
        let v10 = lerp(c(ix, up(iy), iz), c(up(ix), up(iy), iz), tx);
        let v11 = lerp(c(ix, up(iy), up(iz)), c(up(ix), up(iy), up(iz)), tx);
        *v = lerp(lerp(v00, v10, ty), lerp(v01, v11, ty), tz);
    }

    let max = field.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-9);
    field.mapv_inplace(|v| v / max);
    field
}

/// Lesion geometry for one case: centres and per-axis semi-axes.
struct LesionSet {
    lesions: Vec<([f64; 3], [f64; 3])>,
}

fn sample_lesions(
    shape: [usize; 3],
    spec: &SyntheticDomainSpec,
    rng: &mut ChaCha8Rng,
) -> LesionSet {
    let [c_lo, c_hi] = spec.lesion_count_range;
    let [r_lo, r_hi] = spec.lesion_radius_range;
    let count = rng.random_range(c_lo..=c_hi);
    let lesions = (0..count)
        .map(|_| {
            let radii = [
                rng.random_range(r_lo..=r_hi),
                rng.random_range(r_lo..=r_hi),
                rng.random_range(r_lo..=r_hi),
            ];
            let centre = std::array::from_fn(|a| {
                let r = radii[a].ceil().min(shape[a] as f64 / 2.0 - 1.0).max(0.0);
                rng.random_range(r..=shape[a] as f64 - 1.0 - r)
            });
            (centre, radii)
        })
        .collect();
    LesionSet { lesions }
}

fn paint_lesions(
    image: &mut Array3<f64>,
    label: &mut Array3<u8>,
    set: &LesionSet,
    rng: &mut ChaCha8Rng,
) {
    for (centre, radii) in &set.lesions {
        let intensity = rng.random_range(0.80..0.95);
        let lo = |a: usize| (centre[a] - radii[a]).floor().max(0.0) as usize;
        let hi =
            |a: usize, n: usize| ((centre[a] + radii[a]).ceil() as usize + 1).min(n);
        let dims = image.dim();
        let bounds = [(lo(0), hi(0, dims.0)), (lo(1), hi(1, dims.1)), (lo(2), hi(2, dims.2))];
        for x in bounds[0].0..bounds[0].1 {
            for y in bounds[1].0..bounds[1].1 {
                for z in bounds[2].0..bounds[2].1 {
                    let d = [x, y, z]
                        .iter()
                        .enumerate()
                        .map(|(a, &p)| {
                            let t = (p as f64 - centre[a]) / radii[a];
                            t * t
                        })
                        .sum::<f64>();
                    if d <= 1.0 {
                        image[[x, y, z]] = intensity;
                        label[[x, y, z]] = 1;
                    }
                }
            }
        }
    }
}

/// Generate one case for one domain. `case` keys the shared geometry and
/// background; `domain_idx` additionally keys the appearance draws.
fn generate_case(
    seed: u64,
    shape: [usize; 3],
    domain_idx: usize,
    spec: &SyntheticDomainSpec,
    case: u64,
    case_id: String,
) -> VolumeSample {
    // Domain-independent streams: anatomy is shared in distribution.
    let mut bg_rng = stream(seed, "synth-background", &[case]);
    let mut lesion_rng = stream(seed, "synth-lesions", &[case]);
    // Domain-specific stream: appearance.
    let mut app_rng = stream(seed, "synth-appearance", &[domain_idx as u64, case]);

    // Background: mid-grey with slow spatial variation, comfortably darker
    // than any lesion.
    let bg = smooth_field(shape, 3, &mut bg_rng);
    let mut image = bg.mapv(|v| 0.35 + 0.10 * v);
    let mut label = Array3::<u8>::zeros((shape[0], shape[1], shape[2]));

    let lesions = sample_lesions(shape, spec, &mut lesion_rng);
    paint_lesions(&mut image, &mut label, &lesions, &mut lesion_rng);

    // Appearance chain: bias, noise, clamp, gamma.
    let bias = smooth_field(shape, 3, &mut app_rng);
    ndarray::azip!((v in &mut image, &b in &bias) {
        *v *= 1.0 + spec.bias_field_amplitude * b;
    });
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    for v in image.iter_mut() {
        *v += spec.noise_sigma * normal.sample(&mut app_rng);
        *v = v.clamp(0.0, 1.0);
        *v = v.powf(spec.gamma);
    }

    VolumeSample {
        case_id,
        image: image.mapv(|v| v as f32),
        label,
        domain: domain_idx,
    }
}

/// Generate `n_per_domain` cases for every domain. Case `k` shares lesion
/// geometry and background across domains; outputs are ordered domain-major
/// (`specs[0]`'s cases first).
pub fn generate_synthetic(
    specs: &[(String, SyntheticDomainSpec)],
    n_per_domain: usize,
    shape: [usize; 3],
    seed: u64,
) -> Result<Vec<VolumeSample>> {
    validate_specs(specs)?;
    let mut out = Vec::with_capacity(specs.len() * n_per_domain);
    for (d, (name, spec)) in specs.iter().enumerate() {
        for k in 0..n_per_domain {
            let case_id = format!("{name}_{k:03}");
            out.push(generate_case(seed, shape, d, spec, k as u64, case_id));
        }
    }
    Ok(out)
}

/// Cases per domain for each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Generate a full dataset on disk: NIfTI images and labels plus
/// `manifest.csv` under `dir`. Split geometry streams are disjoint (split is
/// folded into the case key), and case `k` of a split still shares geometry
/// across domains.
pub fn write_dataset(
    dir: &Path,
    specs: &[(String, SyntheticDomainSpec)],
    counts: SplitCounts,
    shape: [usize; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    validate_specs(specs)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;

    let splits = [(Split::Train, counts.train, 0u64), (Split::Val, counts.val, 1), (Split::Test, counts.test, 2)];
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (split, n, split_key) in splits {
        for (d, (name, spec)) in specs.iter().enumerate() {
            for k in 0..n {
                let case_id = format!("{name}_{split}_{k:03}");
                let case_key = split_key * 1_000_000 + k as u64;
                let sample = generate_case(seed, shape, d, spec, case_key, case_id);
                entries.push(write_sample(dir, &sample, name, split)?);
            }
        }
    }
    let manifest = DatasetManifest::new(entries, dir);
    manifest.save_csv(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Per-sample features for the separability probe: mean and variance of the
/// voxel intensities.
pub fn intensity_features(sample: &VolumeSample) -> [f64; 2] {
    let n = sample.image.len() as f64;
    let mean = sample.image.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var =
        sample.image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    [mean, var]
}

/// Group samples' domain names for reporting.
pub fn domains_of(specs: &[(String, SyntheticDomainSpec)]) -> BTreeMap<usize, String> {
    specs.iter().enumerate().map(|(i, (n, _))| (i, n.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::label_components;

    fn shape() -> [usize; 3] {
        [24, 24, 24]
    }

    #[test]
    fn generation_is_deterministic() {
        let specs = default_domain_specs();
        let a = generate_synthetic(&specs, 2, shape(), 99).unwrap();
        let b = generate_synthetic(&specs, 2, shape(), 99).unwrap();
        assert_eq!(a.len(), 4);
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(s.case_id, t.case_id);
            assert_eq!(s.image, t.image);
            assert_eq!(s.label, t.label);
        }
        let c = generate_synthetic(&specs, 2, shape(), 100).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn spec_ladder_interpolates_between_the_defaults() {
        assert_eq!(domain_spec_ladder(2).unwrap(), default_domain_specs());
        assert!(matches!(domain_spec_ladder(1), Err(Error::TooFewDomains(1))));

        let four = domain_spec_ladder(4).unwrap();
        assert_eq!(four.len(), 4);
        assert_eq!(four[0].0, "site_a");
        assert_eq!(four[3].0, "site_d");
        assert_eq!(four[0].1, default_domain_specs()[0].1);
        assert_eq!(four[3].1, default_domain_specs()[1].1);
        for w in four.windows(2) {
            assert!(w[0].1.bias_field_amplitude < w[1].1.bias_field_amplitude);
            assert!(w[0].1.noise_sigma < w[1].1.noise_sigma);
            assert!(w[0].1.gamma > w[1].1.gamma);
        }
        // Name synthesis stays well-defined past one alphabet.
        let many = domain_spec_ladder(30).unwrap();
        assert_eq!(many[25].0, "site_z");
        assert_eq!(many[26].0, "site_aa");
    }

    #[test]
    fn labels_are_shared_across_domains_and_nonempty() {
        let specs = default_domain_specs();
        let samples = generate_synthetic(&specs, 3, shape(), 7).unwrap();
        for k in 0..3 {
            let a = &samples[k]; // site_a case k
            let b = &samples[3 + k]; // site_b case k
            assert_eq!(a.label, b.label, "case {k} labels must coincide");
            assert_ne!(a.image, b.image, "case {k} appearance must differ");
            assert!(a.label.iter().any(|&v| v == 1), "case {k} has no lesion");
            a.validate().unwrap();
            b.validate().unwrap();
        }
    }

    #[test]
    fn noisier_spec_produces_higher_voxel_variance() {
        let mut specs = default_domain_specs();
        // Isolate the noise axis: same bias and gamma, different sigma.
        specs[0].1 = SyntheticDomainSpec {
            bias_field_amplitude: 0.1,
            noise_sigma: 0.01,
            gamma: 1.0,
            ..specs[0].1.clone()
        };
        specs[1].1 = SyntheticDomainSpec {
            bias_field_amplitude: 0.1,
            noise_sigma: 0.1,
            gamma: 1.0,
            ..specs[1].1.clone()
        };
        let samples = generate_synthetic(&specs, 10, shape(), 11).unwrap();
        let mean_var = |range: std::ops::Range<usize>| -> f64 {
            range.map(|i| intensity_features(&samples[i])[1]).sum::<f64>() / 10.0
        };
        let (var_a, var_b) = (mean_var(0..10), mean_var(10..20));
        assert!(
            var_b > var_a,
            "noise 0.1 domain variance {var_b} should exceed noise 0.01 domain {var_a}"
        );
    }

    #[test]
    fn lesion_counts_match_across_domains() {
        let specs = default_domain_specs();
        let n = 50;
        let samples = generate_synthetic(&specs, n, [20, 20, 20], 13).unwrap();
        let mean_count = |range: std::ops::Range<usize>| -> f64 {
            range
                .map(|i| label_components(&samples[i].label).count() as f64)
                .sum::<f64>()
                / n as f64
        };
        let a = mean_count(0..n);
        let b = mean_count(n..2 * n);
        // Shared geometry makes these *equal*, comfortably within the ±1 the
        // label-distribution contract asks for.
        assert!((a - b).abs() <= 1.0, "mean counts {a} vs {b}");
        assert!(a >= 1.0, "lesions should exist on average, got {a}");
    }

    #[test]
    fn default_domains_are_linearly_separable_by_intensity_statistics() {
        // Two-feature linear probe (mean, variance) fitted as Fisher's
        // discriminant: project onto `w = (S_a + S_b)^-1 (m_b - m_a)` and
        // threshold halfway between the projected class means.
        let specs = default_domain_specs();
        let n = 50; // 100 samples total
        let samples = generate_synthetic(&specs, n, shape(), 17).unwrap();
        let feats: Vec<[f64; 2]> = samples.iter().map(intensity_features).collect();

        let mean2 = |r: std::ops::Range<usize>| -> [f64; 2] {
            let mut m = [0.0; 2];
            for i in r.clone() {
                m[0] += feats[i][0];
                m[1] += feats[i][1];
            }
            [m[0] / r.len() as f64, m[1] / r.len() as f64]
        };
        let (ma, mb) = (mean2(0..n), mean2(n..2 * n));
        let mut cov = [[0.0f64; 2]; 2];
        for (r, m) in [(0..n, ma), (n..2 * n, mb)] {
            for i in r {
                let d = [feats[i][0] - m[0], feats[i][1] - m[1]];
                for (p, dp) in d.iter().enumerate() {
                    for (q, dq) in d.iter().enumerate() {
                        cov[p][q] += dp * dq;
                    }
                }
            }
        }
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        assert!(det.abs() > 1e-30);
        let diff = [mb[0] - ma[0], mb[1] - ma[1]];
        let w = [
            (cov[1][1] * diff[0] - cov[0][1] * diff[1]) / det,
            (-cov[1][0] * diff[0] + cov[0][0] * diff[1]) / det,
        ];
        let project = |f: &[f64; 2]| f[0] * w[0] + f[1] * w[1];
        let threshold = (project(&ma) + project(&mb)) / 2.0;
        let flip = project(&mb) < project(&ma);

        let correct = feats
            .iter()
            .enumerate()
            .filter(|(i, f)| {
                let said_b = (project(f) > threshold) != flip;
                said_b == (*i >= n)
            })
            .count();
        let acc = correct as f64 / (2 * n) as f64;
        assert!(acc > 0.9, "linear probe accuracy {acc}");
    }

    #[test]
    fn degenerate_and_duplicate_specs_are_rejected() {
        let mut specs = default_domain_specs();
        specs[0].1.lesion_count_range = [0, 0];
        assert!(matches!(
            generate_synthetic(&specs, 1, shape(), 1),
            Err(Error::DegenerateLesionSpec { .. })
        ));

        let mut specs = default_domain_specs();
        specs[1].1 = specs[0].1.clone();
        assert!(matches!(
            generate_synthetic(&specs, 1, shape(), 1),
            Err(Error::IndistinguishableSpecs { .. })
        ));

        let mut specs = default_domain_specs();
        specs[1].1.lesion_count_range = [1, 2];
        assert!(matches!(
            generate_synthetic(&specs, 1, shape(), 1),
            Err(Error::GeometryRangesDiffer { .. })
        ));

        assert!(matches!(
            generate_synthetic(&default_domain_specs()[..1], 1, shape(), 1),
            Err(Error::TooFewDomains(1))
        ));
    }

    #[test]
    fn written_dataset_round_trips_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let specs = default_domain_specs();
        let counts = SplitCounts { train: 2, val: 1, test: 1 };
        let manifest = write_dataset(dir.path(), &specs, counts, [16, 16, 16], 5).unwrap();
        assert_eq!(manifest.entries().len(), 2 * (2 + 1 + 1));

        let loaded = DatasetManifest::load_csv(&dir.path().join("manifest.csv")).unwrap();
        let domains = crate::config::DomainSet::new(vec!["site_a".into(), "site_b".into()]).unwrap();
        loaded.validate(&domains, 2).unwrap();
        let train = loaded.load_split(Split::Train, &domains).unwrap();
        assert_eq!(train.len(), 4);
        for s in &train {
            s.validate().unwrap();
            assert_eq!(s.shape(), [16, 16, 16]);
        }

        // Bit-identical regeneration: the generator, not the files, is the
        // source of truth. Stored voxels are exact f32; loading min-max
        // rescales the image, so regeneration must match after the same
        // rescale.
        let again = generate_case(
            5,
            [16, 16, 16],
            0,
            &specs[0].1,
            0,
            "site_a_train_000".to_string(),
        );
        let first = train.iter().find(|s| s.case_id == "site_a_train_000").unwrap();
        assert_eq!(first.image, crate::volume::rescale_unit(&again.image).unwrap());
        assert_eq!(first.label, again.label);
    }
}
