//! Central finite-difference oracle for analytic gradients. Tests build a
//! scalar function over a flat parameter vector and compare its numeric
//! gradient against what backward produced.

/// Central finite differences of `f` at `x` with step `h` per coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst relative disagreement between two gradients. The denominator floors
/// at `floor` so near-zero coordinates are compared absolutely against it.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = (a - n).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Convenience assertion used across the gradient suites.
pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
    let err = max_rel_error(analytic, numeric, 1e-4);
    assert!(
        err <= tol,
        "{what}: gradient mismatch, max rel error {err:.3e} > {tol:.1e}\n analytic: {:?}\n numeric:  {:?}",
        &analytic[..analytic.len().min(12)],
        &numeric[..numeric.len().min(12)],
    );
}
