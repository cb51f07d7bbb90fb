//! Refinement through the secular equation.
//!
//! For `λ > −min c`, `D v = λ v` is equivalent to `v = (C + λI)⁻¹ U y` with
//! `U = [a b]` and `y = Uᵀ v`, so `λ` is an eigenvalue exactly when the 2×2
//! matrix `G(λ) = Uᵀ (C + λI)⁻¹ U` has eigenvalue 1. Its largest eigenvalue
//! is strictly decreasing in `λ`, and the largest root is the top eigenvalue
//! of `D`. Every entry of `G` is a sum of nonnegative terms, so the root is
//! found without the cancellation that limits a residual test on `D` when
//! `λ ≪ c`.

use crate::numeric::NeumaierSum;

struct Gram {
    aa: f64,
    bb: f64,
    ab: f64,
}

impl Gram {
    fn at(a: &[f64], b: &[f64], c: &[f64], lambda: f64) -> Self {
        let mut aa = NeumaierSum::default();
        let mut bb = NeumaierSum::default();
        let mut ab = NeumaierSum::default();
        for i in 0..a.len() {
            let w = c[i] + lambda;
            aa.add(a[i] * a[i] / w);
            bb.add(b[i] * b[i] / w);
            ab.add(a[i] * b[i] / w);
        }
        Gram {
            aa: aa.value(),
            bb: bb.value(),
            ab: ab.value(),
        }
    }

    /// Largest eigenvalue and its nonnegative eigenvector, both computed
    /// without subtracting like-signed quantities.
    fn top(&self) -> (f64, [f64; 2]) {
        let diff = self.aa - self.bb;
        let root = (diff * diff + 4.0 * self.ab * self.ab).sqrt();
        let mu = 0.5 * (self.aa + self.bb + root);
        let y = if diff >= 0.0 {
            [0.5 * (diff + root), self.ab]
        } else {
            [self.ab, 0.5 * (root - diff)]
        };
        let n = (y[0] * y[0] + y[1] * y[1]).sqrt();
        if n > 0.0 {
            (mu, [y[0] / n, y[1] / n])
        } else {
            (mu, [1.0, 0.0])
        }
    }
}

/// Newton on `μ_max(G(λ)) = 1` from `start`, safeguarded by bisection on
/// `(0, Σ (a² + b²)]`. Returns the root and the unit eigenvector
/// `(C + λI)⁻¹ U y`, or `None` if no positive root exists or the vector is
/// not one-signed.
pub(super) fn polish(a: &[f64], b: &[f64], c: &[f64], start: f64) -> Option<(f64, Vec<f64>)> {
    let h = |lambda: f64| {
        let g = Gram::at(a, b, c, lambda);
        let (mu, y) = g.top();
        let slope: f64 = (0..a.len())
            .map(|i| {
                let u = a[i] * y[0] + b[i] * y[1];
                let w = c[i] + lambda;
                -(u * u) / (w * w)
            })
            .sum();
        (mu - 1.0, slope, y)
    };

    let mut lo = 0.0;
    let mut hi: f64 = (0..a.len()).map(|i| a[i] * a[i] + b[i] * b[i]).sum();
    let h_lo = h(lo).0;
    if h_lo.is_nan() || h_lo <= 0.0 {
        return None;
    }
    let mut lambda = if start > lo && start < hi { start } else { 0.5 * hi };
    for _ in 0..200 {
        let (f, slope, _) = h(lambda);
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        let mut next = lambda - f / slope;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let step = (next - lambda).abs();
        lambda = next;
        if step <= 4.0 * f64::EPSILON * lambda || hi - lo <= 4.0 * f64::EPSILON * hi {
            break;
        }
    }

    let (_, _, y) = h(lambda);
    let mut v: Vec<f64> = (0..a.len())
        .map(|i| (a[i] * y[0] + b[i] * y[1]) / (c[i] + lambda))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    let one_signed = (0..a.len()).all(|i| (a[i] == 0.0 && b[i] == 0.0) || v[i] > 0.0);
    one_signed.then_some((lambda, v))
}
