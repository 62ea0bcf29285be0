//! Small numeric helpers shared by the optimizers.

/// Golden-section search for the maximum of a unimodal `f` on [a, b].
/// Returns (argmax, max). Terminates when the bracket is shorter than `tol`.
pub fn golden_section_max<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: f64) -> (f64, f64) {
    debug_assert!(a <= b);
    const INV_PHI: f64 = 0.618_033_988_749_894_9; // (√5 − 1)/2
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
    }
    let xm = 0.5 * (lo + hi);
    let fm = f(xm);
    // Keep the best sampled point in case f is flat or slightly multimodal.
    if f1 >= fm && f1 >= f2 {
        (x1, f1)
    } else if f2 >= fm {
        (x2, f2)
    } else {
        (xm, fm)
    }
}

/// `n` evenly spaced points from `a` to `b` inclusive. `n` must be ≥ 2.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    debug_assert!(n >= 2);
    let step = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { b } else { a + step * i as f64 })
        .collect()
}

/// Scans `n` evenly spaced points and golden-refines around the best one.
/// Returns (argmax, max). The refinement bracket spans one grid step on each
/// side of the best sample, so a unimodal peak is never lost.
pub fn scan_then_refine<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    n: usize,
    tol: f64,
) -> (f64, f64) {
    let xs = linspace(a, b, n);
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        let v = f(x);
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    let lo = if best == 0 { xs[0] } else { xs[best - 1] };
    let hi = if best + 1 == xs.len() { xs[best] } else { xs[best + 1] };
    let (x, v) = golden_section_max(&mut f, lo, hi, tol);
    if v >= best_val {
        (x, v)
    } else {
        (xs[best], best_val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn golden_finds_parabola_peak() {
        let (x, v) = golden_section_max(|x| 1.0 - (x - 0.3) * (x - 0.3), -1.0, 1.0, 1e-10);
        assert_abs_diff_eq!(x, 0.3, epsilon = 1e-8);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn golden_handles_boundary_maximum() {
        let (x, v) = golden_section_max(|x| x, 0.0, 2.0, 1e-10);
        assert_abs_diff_eq!(x, 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(v, 2.0, epsilon = 1e-8);
    }

    #[test]
    fn linspace_endpoints_exact() {
        let xs = linspace(-0.5, 1.5, 5);
        assert_eq!(xs.len(), 5);
        assert_eq!(xs[0], -0.5);
        assert_eq!(xs[4], 1.5);
        assert_abs_diff_eq!(xs[2], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn scan_refine_finds_sharp_peak() {
        // Narrow Gaussian a coarse scan alone would resolve poorly.
        let f = |x: f64| (-(x - 0.701).powi(2) / 1e-4).exp();
        let (x, v) = scan_then_refine(f, 0.0, 1.0, 101, 1e-10);
        assert_abs_diff_eq!(x, 0.701, epsilon = 1e-8);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scan_refine_never_worse_than_scan() {
        // Multimodal: refinement around the best sample must not regress.
        let f = |x: f64| (5.0 * x).sin() + 0.5 * (17.0 * x).cos();
        let xs = linspace(0.0, 3.0, 500);
        let scan_best = xs.iter().map(|&x| f(x)).fold(f64::NEG_INFINITY, f64::max);
        let (_, v) = scan_then_refine(f, 0.0, 3.0, 500, 1e-10);
        assert!(v >= scan_best - 1e-15);
    }
}
