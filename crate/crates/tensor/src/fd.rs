//! Central finite-difference oracle for gradient checks.
//!
//! Independent of the tape's backward pass by construction: it only calls a
//! user-supplied scalar function twice per probed coordinate.

use ndarray::ArrayD;

/// Central difference of `f` at `x` along flat coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, i: usize, h: f64) -> f64 {
    let mut xp = x.clone();
    let mut xm = x.clone();
    xp.as_slice_mut().unwrap()[i] += h;
    xm.as_slice_mut().unwrap()[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

/// Checks analytic against central-difference gradients on a subset of
/// coordinates. `analytic` is indexed flat; `coords` selects which entries to
/// probe. Returns the worst relative error observed.
pub fn check_coords(
    f: &mut dyn FnMut(&ArrayD<f64>) -> f64,
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    coords: &[usize],
    h: f64,
) -> f64 {
    let an = analytic.as_slice().unwrap();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let numeric = central_diff(f, x, i, h);
        worst = worst.max(rel_err(an[i], numeric));
    }
    worst
}

/// Deterministic spread of `k` probe coordinates over `len` entries.
pub fn probe_coords(len: usize, k: usize) -> Vec<usize> {
    let k = k.min(len);
    (0..k).map(|j| j * len / k).collect()
}
