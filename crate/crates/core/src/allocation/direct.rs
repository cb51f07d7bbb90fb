//! Single-stage equal precision without the eigenproblem.
//!
//! With Neyman allocation inside every subpopulation, `T_j = s_j² / n_j − c_j`
//! where `s_j = Σ_h √A_jh`. Equal precision `T` therefore needs
//! `n_j = s_j² / (T + c_j)` and the budget gives the scalar equation
//!
//! ```text
//! g(T) = Σ_j s_j² / (T + c_j) = n.
//! ```
//!
//! `g` is strictly decreasing and convex on `(0, ∞)` with supremum
//! `g(0) = Σ s_j²/c_j`, so a positive root exists iff `n` is below it.

use super::{check_scheme, AllocationError, Budgets, SchemeId};
use crate::numeric::NeumaierSum;
use crate::population::DerivedCoefficients;

const MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct DirectSolution {
    pub t: f64,
    /// `n_j`.
    pub subpop_sizes: Vec<f64>,
    /// `n_jh`.
    pub first_stage: Vec<Vec<f64>>,
    pub iterations: usize,
}

pub fn solve_t_direct(
    coeffs: &DerivedCoefficients,
    scheme: SchemeId,
    n: f64,
) -> Result<DirectSolution, AllocationError> {
    if !matches!(scheme, SchemeId::SingleStageSrswor | SchemeId::SingleStageNeymanWithin) {
        return Err(AllocationError::SchemeMismatch(format!(
            "{scheme} has no direct root-finding path"
        )));
    }
    check_scheme(coeffs, scheme, &Budgets::single(n))?;

    let s: Vec<f64> = coeffs
        .subpops
        .iter()
        .map(|sp| sp.cells.iter().map(|c| c.a.sqrt()).collect::<NeumaierSum>().value())
        .collect();
    let s2: Vec<f64> = s.iter().map(|s| s * s).collect();
    let c: Vec<f64> = coeffs.subpops.iter().map(|sp| sp.c).collect();
    if let Some(j) = c.iter().position(|c| c.is_nan() || *c <= 0.0) {
        return Err(AllocationError::SchemeMismatch(format!(
            "subpop[{j}] has nonpositive c = {}",
            c[j]
        )));
    }

    let g = |t: f64| -> f64 {
        s2.iter().zip(&c).map(|(s2, c)| s2 / (t + c)).collect::<NeumaierSum>().value()
    };
    let dg = |t: f64| -> f64 {
        s2.iter()
            .zip(&c)
            .map(|(s2, c)| s2 / ((t + c) * (t + c)))
            .collect::<NeumaierSum>()
            .value()
    };

    let supremum = g(0.0);
    if n.is_nan() || n >= supremum {
        return Err(AllocationError::BudgetTooLarge { budget: n, supremum });
    }

    // g(T) < Σ s²/T, so the root lies below Σ s²/n.
    let mut lo = 0.0;
    let mut hi = s2.iter().copied().collect::<NeumaierSum>().value() / n;
    // Newton from the left end never overshoots a convex decreasing
    // function; the bracket only guards against rounding.
    let mut t = 0.0;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let f = g(t) - n;
        if f == 0.0 {
            break;
        }
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let mut next = t + f / dg(t);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - t).abs() <= 2.0 * f64::EPSILON * next.abs() {
            t = next;
            break;
        }
        t = next;
    }

    let subpop_sizes: Vec<f64> = s2.iter().zip(&c).map(|(s2, c)| s2 / (t + c)).collect();
    let first_stage = coeffs
        .subpops
        .iter()
        .zip(&subpop_sizes)
        .zip(&s)
        .map(|((sp, nj), sj)| {
            sp.cells
                .iter()
                .map(|cell| if *sj > 0.0 { nj * cell.a.sqrt() / sj } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(DirectSolution { t, subpop_sizes, first_stage, iterations })
}
