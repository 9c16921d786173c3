//! Shared helpers for layer tests: random tensors, an inner-product test
//! loss, and central-difference gradient checks.
//!
//! The test loss is `L = <f(x), r>` for a fixed random `r`, whose analytic
//! input gradient is exactly what `backward` returns when fed `r`. Finite
//! differences run in `f32` arithmetic but accumulate the loss in `f64`;
//! with central differences that leaves ~1e-3 relative accuracy, so checks
//! use a 2e-2 tolerance — loose enough to be stable, tight enough that a
//! wrong term or sign (off by >= 100%) cannot slip through.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::visit::VisitParams;
use super::Feat;

pub fn random_feat(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Feat {
    let mut f = Feat::zeros(shape);
    for v in f.iter_mut() {
        *v = rng.random_range(-1.0f32..1.0);
    }
    f
}

pub fn random_feat_like(like: &Feat, rng: &mut ChaCha8Rng) -> Feat {
    let d = like.raw_dim();
    random_feat([d[0], d[1], d[2], d[3], d[4]], rng)
}

/// `<y, r>` accumulated in f64.
pub fn loss_inner(y: &Feat, r: &Feat) -> f64 {
    y.iter().zip(r.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Deterministically spread `count` probe indices over `len` slots.
fn probe_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}

fn check_one(analytic: f64, numeric: f64, what: &str, idx: usize, tol: f64) {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    let rel = (analytic - numeric).abs() / denom;
    assert!(
        rel <= tol,
        "{what}[{idx}]: analytic {analytic:.6e} vs numeric {numeric:.6e} (rel {rel:.3e})"
    );
}

/// Compare accumulated parameter gradients against central differences of
/// `loss` for a probe subset of parameters.
pub fn check_param_fd<L, F>(layer: &mut L, mut loss: F, analytic: &[f32], probes: usize, tol: f64)
where
    L: VisitParams,
    F: FnMut(&L) -> f64,
{
    // Flatten parameter layout: (slot start offset, len) pairs in visit order.
    let mut lens = Vec::new();
    layer.visit_params(&mut |slot| lens.push(slot.value.len()));
    let total: usize = lens.iter().sum();
    assert_eq!(total, analytic.len());

    for idx in probe_indices(total, probes) {
        let eps = 1e-2f32;
        let probe = |delta: f32, layer: &mut L| {
            let mut seen = 0usize;
            layer.visit_params(&mut |slot| {
                if idx >= seen && idx < seen + slot.value.len() {
                    slot.value[idx - seen] += delta;
                }
                seen += slot.value.len();
            });
        };
        probe(eps, layer);
        let up = loss(layer);
        probe(-2.0 * eps, layer);
        let down = loss(layer);
        probe(eps, layer); // restore
        let numeric = (up - down) / (2.0 * eps as f64);
        check_one(analytic[idx] as f64, numeric, "param grad", idx, tol);
    }
}

/// Like [`check_param_fd`], but probe the `probes` coordinates with the
/// largest analytic gradient magnitude, with a wider step.
///
/// Whole-network losses accumulate enough f32 rounding noise that central
/// differences on near-zero gradients measure noise, not slope (the noise
/// floor on a derivative is roughly `forward_noise / (2 eps)`). Restricting
/// probes to the largest gradients and widening `eps` keeps the comparison
/// about wiring — a dropped or double-counted term still shifts large
/// gradients by order 100 % — without chasing noise. Pair with
/// [`check_directional_fd`] so small coordinates are still covered in
/// aggregate.
pub fn check_param_fd_largest<L, F>(layer: &mut L, mut loss: F, analytic: &[f32], probes: usize, tol: f64)
where
    L: VisitParams,
    F: FnMut(&L) -> f64,
{
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
    order.truncate(probes);
    assert!(analytic[order[0]] != 0.0, "all-zero gradient vector");

    for idx in order {
        let eps = 2e-2f32;
        let probe = |delta: f32, layer: &mut L| {
            let mut seen = 0usize;
            layer.visit_params(&mut |slot| {
                if idx >= seen && idx < seen + slot.value.len() {
                    slot.value[idx - seen] += delta;
                }
                seen += slot.value.len();
            });
        };
        probe(eps, layer);
        let up = loss(layer);
        probe(-2.0 * eps, layer);
        let down = loss(layer);
        probe(eps, layer);
        let numeric = (up - down) / (2.0 * eps as f64);
        check_one(analytic[idx] as f64, numeric, "param grad", idx, tol);
    }
}

/// Directional derivative check: perturb *all* parameters along random ±1
/// directions and compare `(L(θ+εu) − L(θ−εu)) / 2ε` with `<g, u>`.
///
/// One direction exercises every coordinate of the gradient at once, so
/// systematically wrong subsets (a missing skip-connection term, a stage
/// backpropagated twice) shift the result even when each coordinate is
/// individually too small for a stable per-coordinate difference.
pub fn check_directional_fd<L, F>(
    layer: &mut L,
    mut loss: F,
    analytic: &[f32],
    directions: usize,
    rng: &mut ChaCha8Rng,
    tol: f64,
) where
    L: VisitParams,
    F: FnMut(&L) -> f64,
{
    for dir in 0..directions {
        let u: Vec<f32> = (0..analytic.len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let eps = 1e-3f32;
        let shift = |scale: f32, layer: &mut L| {
            let mut seen = 0usize;
            layer.visit_params(&mut |slot| {
                let len = slot.value.len();
                for (v, ui) in slot.value.iter_mut().zip(&u[seen..seen + len]) {
                    *v += scale * ui;
                }
                seen += len;
            });
        };
        shift(eps, layer);
        let up = loss(layer);
        shift(-2.0 * eps, layer);
        let down = loss(layer);
        shift(eps, layer);
        let numeric = (up - down) / (2.0 * eps as f64);
        let analytic_dir: f64 = analytic.iter().zip(&u).map(|(&g, &ui)| g as f64 * ui as f64).sum();
        check_one(analytic_dir, numeric, "directional grad", dir, tol);
    }
}

/// Compare an input gradient against central differences of `loss`.
pub fn check_input_fd<F>(x: &Feat, mut loss: F, analytic: &Feat, probes: usize, tol: f64)
where
    F: FnMut(&Feat) -> f64,
{
    let flat_analytic: Vec<f32> = analytic.iter().copied().collect();
    let mut xp = x.clone();
    for idx in probe_indices(x.len(), probes) {
        let eps = 1e-2f32;
        let orig = xp.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + eps;
        let up = loss(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - eps;
        let down = loss(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        let numeric = (up - down) / (2.0 * eps as f64);
        check_one(flat_analytic[idx] as f64, numeric, "input grad", idx, tol);
    }
}

pub fn assert_close(a: &Feat, b: &Feat, tol: f32) {
    assert_eq!(a.dim(), b.dim());
    for (i, (&x, &y)) in a.iter().zip(b.iter()).enumerate() {
        let denom = x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() / denom <= tol, "element {i}: {x} vs {y}");
    }
}
