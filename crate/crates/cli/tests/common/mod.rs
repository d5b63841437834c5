//! Shared helpers for the integration suites: a central-finite-difference
//! gradient checker and tolerance bookkeeping.

/// Central difference of `f` at `x0`, one entry per coordinate in `indices`
/// (or all coordinates when `indices` is empty).
pub fn central_diff(
    f: &mut dyn FnMut(&[f32]) -> f64,
    x0: &[f32],
    indices: &[usize],
    eps: f32,
) -> Vec<(usize, f64)> {
    let all: Vec<usize>;
    let idx: &[usize] = if indices.is_empty() {
        all = (0..x0.len()).collect();
        &all
    } else {
        indices
    };
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx {
        let orig = x[i];
        x[i] = orig + eps;
        let fp = f(&x);
        x[i] = orig - eps;
        let fm = f(&x);
        x[i] = orig;
        out.push((i, (fp - fm) / (2.0 * eps as f64)));
    }
    out
}

/// Asserts `analytic[i] ≈ numeric` with relative tolerance `rel` and a small
/// absolute floor that absorbs f32 evaluation noise in the difference
/// quotient.
pub fn assert_grad_close(
    context: &str,
    analytic: &[f32],
    numeric: &[(usize, f64)],
    rel: f64,
    abs: f64,
) {
    for &(i, n) in numeric {
        let a = analytic[i] as f64;
        let tol = rel * a.abs().max(n.abs()) + abs;
        assert!(
            (a - n).abs() <= tol,
            "{context}[{i}]: analytic {a} vs finite-difference {n} (tol {tol})"
        );
    }
}

/// Richardson-extrapolated central difference: combining steps `h` and `h/2`
/// cancels the leading O(h²) truncation term, which matters for strongly
/// curved composites (softmax chains) where a single step size cannot be both
/// noise- and truncation-safe in f32.
pub fn richardson_diff(
    f: &mut dyn FnMut(&[f32]) -> f64,
    x0: &[f32],
    indices: &[usize],
    h: f32,
) -> Vec<(usize, f64)> {
    let coarse = central_diff(f, x0, indices, h);
    let fine = central_diff(f, x0, indices, h / 2.0);
    coarse
        .into_iter()
        .zip(fine)
        .map(|((i, c), (_, d))| (i, (4.0 * d - c) / 3.0))
        .collect()
}

/// Standard check: all coordinates, eps 5e-3, relative 1e-3 with a 2e-4
/// absolute floor.
pub fn check_all(context: &str, f: &mut dyn FnMut(&[f32]) -> f64, x0: &[f32], analytic: &[f32]) {
    assert_eq!(x0.len(), analytic.len(), "{context}: gradient length");
    let numeric = central_diff(f, x0, &[], 5e-3);
    assert_grad_close(context, analytic, &numeric, 1e-3, 2e-4);
}
