//! The perturbed diagonal eigenproblem behind every allocation scheme.
//!
//! All schemes reduce to `D = a aᵀ + b bᵀ − diag(c)` with `a, b ≥ 0` and
//! `c > 0`. When `D` has exactly one positive eigenvalue, that eigenvalue is
//! the optimal common squared CV and its (one-signed) eigenvector fixes the
//! split of the budgets between subpopulations.
//!
//! The solver normalizes the vectors by `max c`, shifts by `2·max c` so the
//! matrix is entrywise nonnegative, and runs power iteration with a Rayleigh
//! quotient residual test. If the iteration stalls it falls back to a full
//! Jacobi decomposition. Either way the eigenpair is then polished on the
//! secular equation, which keeps full relative accuracy when `λ ≪ c`.

mod jacobi;
mod secular;

pub use jacobi::{symmetric_eigen, SymmetricSpectrum};

use thiserror::Error;

use crate::numeric::NeumaierSum;

/// Default absolute tolerance on the Rayleigh residual.
pub const DEFAULT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EigenError {
    #[error("problem has no subpopulations")]
    Empty,
    #[error("dimension mismatch: a has {a} entries, b has {b}, c has {c}")]
    DimensionMismatch { a: usize, b: usize, c: usize },
    #[error("c[{index}] = {value} is not strictly positive")]
    NonpositiveC { index: usize, value: f64 },
    #[error("{name}[{index}] = {value} is negative or not finite")]
    InvalidEntry {
        name: &'static str,
        index: usize,
        value: f64,
    },
    #[error("every entry of a is zero")]
    ZeroLoad,
    #[error("uniqueness condition not satisfied (margin {margin:e}); rerun with force to inspect the spectrum")]
    ConditionNotSatisfied { margin: f64 },
    #[error("matrix has no positive eigenvalue (largest is {largest:e})")]
    NoPositiveEigenvalue { largest: f64 },
    #[error("matrix has {} positive eigenvalues: {values:?}", values.len())]
    MultiplePositiveEigenvalues { values: Vec<f64> },
    #[error("eigensolver did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("dominant eigenvector has mixed signs")]
    IndefiniteEigenvector,
}

/// The load vectors `a`, `b` and the correction mass `c`, one entry per
/// subpopulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationVectors {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl PerturbationVectors {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self, EigenError> {
        if a.len() != b.len() || a.len() != c.len() {
            return Err(EigenError::DimensionMismatch {
                a: a.len(),
                b: b.len(),
                c: c.len(),
            });
        }
        if a.is_empty() {
            return Err(EigenError::Empty);
        }
        for (name, v) in [("a", &a), ("b", &b)] {
            if let Some((index, &value)) = v
                .iter()
                .enumerate()
                .find(|(_, x)| !(x.is_finite() && **x >= 0.0))
            {
                return Err(EigenError::InvalidEntry { name, index, value });
            }
        }
        if let Some((index, &value)) = c
            .iter()
            .enumerate()
            .find(|(_, x)| !(x.is_finite() && **x > 0.0))
        {
            return Err(EigenError::NonpositiveC { index, value });
        }
        if a.iter().all(|&x| x == 0.0) {
            return Err(EigenError::ZeroLoad);
        }
        Ok(Self { a, b, c })
    }

    /// Rank-one problem: `b = 0`.
    pub fn rank_one(a: Vec<f64>, c: Vec<f64>) -> Result<Self, EigenError> {
        let b = vec![0.0; a.len()];
        Self::new(a, b, c)
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn is_rank_one(&self) -> bool {
        self.b.iter().all(|&x| x == 0.0)
    }

    /// Margin of the applicable uniqueness condition; positive means the
    /// condition holds.
    pub fn condition_margin(&self) -> f64 {
        condition_margin_rank2(&self.a, &self.b, &self.c)
    }
}

/// Symmetric `d × d` matrix `a aᵀ + b bᵀ − diag(c)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedMatrix {
    entries: Vec<f64>,
    source: PerturbationVectors,
}

impl PerturbedMatrix {
    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim() + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.dim()).map(<[f64]>::to_vec).collect()
    }

    pub fn source(&self) -> &PerturbationVectors {
        &self.source
    }

    /// `‖D v − λ v‖∞`.
    pub fn residual(&self, lambda: f64, v: &[f64]) -> f64 {
        let d = self.dim();
        (0..d)
            .map(|i| {
                let dv: f64 = (0..d).map(|j| self.get(i, j) * v[j]).sum();
                (dv - lambda * v[i]).abs()
            })
            .fold(0.0, f64::max)
    }
}

pub fn build_matrix(vectors: &PerturbationVectors) -> PerturbedMatrix {
    PerturbedMatrix {
        entries: assemble(vectors.a(), vectors.b(), vectors.c()),
        source: vectors.clone(),
    }
}

fn assemble(a: &[f64], b: &[f64], c: &[f64]) -> Vec<f64> {
    let d = a.len();
    let mut entries = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let off = a[i] * a[j] + b[i] * b[j];
            if i == j {
                entries[i * d + i] = off - c[i];
            } else {
                entries[i * d + j] = off;
                entries[j * d + i] = off;
            }
        }
    }
    entries
}

/// `Σ a_i²/c_i − 1`, summed with compensation.
pub fn condition_margin_rank1(a: &[f64], c: &[f64]) -> f64 {
    let mut s = NeumaierSum::default();
    for (ai, ci) in a.iter().zip(c) {
        s.add(ai * ai / ci);
    }
    s.value() - 1.0
}

pub fn check_condition_rank1(a: &[f64], c: &[f64]) -> bool {
    condition_margin_rank1(a, c) > 0.0
}

/// `Σ (a_i² + b_i²)/c_i − Σ_{i≠j} (a_i b_j − a_j b_i)²/(c_i c_j) − 1`, the
/// second sum over ordered pairs. Equals [`condition_margin_rank1`] bit for
/// bit when `b = 0`.
pub fn condition_margin_rank2(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let d = a.len();
    let mut diag = NeumaierSum::default();
    for i in 0..d {
        diag.add((a[i] * a[i] + b[i] * b[i]) / c[i]);
    }
    let mut cross = NeumaierSum::default();
    for i in 0..d {
        for j in i + 1..d {
            let w = a[i] * b[j] - a[j] * b[i];
            if w != 0.0 {
                cross.add(w * w / (c[i] * c[j]));
            }
        }
    }
    (diag.value() - 2.0 * cross.value()) - 1.0
}

pub fn check_condition_rank2(a: &[f64], b: &[f64], c: &[f64]) -> bool {
    condition_margin_rank2(a, b, c) > 0.0
}

/// The unique positive eigenvalue of `D` and its positive unit eigenvector.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub lambda: f64,
    pub v: Vec<f64>,
    pub method: SolveMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    ClosedForm,
    PowerIteration { iterations: usize },
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    /// Skip the sufficient condition and certify uniqueness from the full
    /// spectrum instead.
    pub force: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            force: false,
        }
    }
}

impl SolverOptions {
    pub fn forced() -> Self {
        Self {
            force: true,
            ..Self::default()
        }
    }

    fn iteration_cap(&self, d: usize) -> usize {
        let digits = (-self.tolerance.log10()).ceil().max(1.0) as usize;
        10 * d * digits
    }
}

/// All eigenvalues of `D`, ascending.
pub fn spectrum(matrix: &PerturbedMatrix) -> Result<Vec<f64>, EigenError> {
    let (scale, normalized) = normalized_entries(matrix.source());
    let d = matrix.dim();
    let spec = symmetric_eigen(&normalized, d).ok_or(EigenError::NonConvergence {
        iterations: d * d,
    })?;
    Ok(spec.values.iter().map(|x| x * scale).collect())
}

fn normalized_entries(vectors: &PerturbationVectors) -> (f64, Vec<f64>) {
    let scale = vectors.c().iter().copied().fold(0.0, f64::max);
    let root = scale.sqrt();
    let a: Vec<f64> = vectors.a().iter().map(|x| x / root).collect();
    let b: Vec<f64> = vectors.b().iter().map(|x| x / root).collect();
    let c: Vec<f64> = vectors.c().iter().map(|x| x / scale).collect();
    (scale, assemble(&a, &b, &c))
}

pub fn unique_positive_eigenpair(
    matrix: &PerturbedMatrix,
    options: &SolverOptions,
) -> Result<EigenPair, EigenError> {
    let src = matrix.source();
    let d = src.dim();

    if d == 1 {
        let lambda = matrix.get(0, 0);
        if lambda <= 0.0 {
            return Err(EigenError::NoPositiveEigenvalue { largest: lambda });
        }
        return Ok(EigenPair {
            lambda,
            v: vec![1.0],
            method: SolveMethod::ClosedForm,
        });
    }

    if !options.force {
        let margin = src.condition_margin();
        if margin <= 0.0 {
            return Err(EigenError::ConditionNotSatisfied { margin });
        }
    }

    let (scale, normalized) = normalized_entries(src);
    let decoupled: Vec<bool> = (0..d).map(|j| src.a()[j] == 0.0 && src.b()[j] == 0.0).collect();

    let (lambda_n, v, method) = if options.force {
        let spec = symmetric_eigen(&normalized, d)
            .ok_or(EigenError::NonConvergence { iterations: d * d })?;
        let positive: Vec<f64> = spec
            .values
            .iter()
            .copied()
            .filter(|&x| x > options.tolerance)
            .collect();
        match positive.len() {
            0 => {
                return Err(EigenError::NoPositiveEigenvalue {
                    largest: spec.values[d - 1] * scale,
                })
            }
            1 => {}
            _ => {
                return Err(EigenError::MultiplePositiveEigenvalues {
                    values: positive.iter().map(|x| x * scale).collect(),
                })
            }
        }
        (spec.values[d - 1], spec.vectors[d - 1].clone(), SolveMethod::Jacobi)
    } else {
        match power_iteration(&normalized, d, src, scale, options) {
            Some((lambda, v, iterations)) => {
                (lambda, v, SolveMethod::PowerIteration { iterations })
            }
            None => {
                let spec = symmetric_eigen(&normalized, d).ok_or(EigenError::NonConvergence {
                    iterations: options.iteration_cap(d),
                })?;
                (spec.values[d - 1], spec.vectors[d - 1].clone(), SolveMethod::Jacobi)
            }
        }
    };

    if lambda_n <= 0.0 {
        return Err(EigenError::NoPositiveEigenvalue {
            largest: lambda_n * scale,
        });
    }
    let v = orient(v, &decoupled)?;
    let root = scale.sqrt();
    let a: Vec<f64> = src.a().iter().map(|x| x / root).collect();
    let b: Vec<f64> = src.b().iter().map(|x| x / root).collect();
    let c: Vec<f64> = src.c().iter().map(|x| x / scale).collect();
    let (lambda_n, v) = secular::polish(&a, &b, &c, lambda_n).unwrap_or((lambda_n, v));
    Ok(EigenPair {
        lambda: lambda_n * scale,
        v,
        method,
    })
}

/// Power iteration on the shifted, normalized matrix. Returns `None` when the
/// residual has not dropped below tolerance within the iteration cap.
fn power_iteration(
    normalized: &[f64],
    d: usize,
    src: &PerturbationVectors,
    scale: f64,
    options: &SolverOptions,
) -> Option<(f64, Vec<f64>, usize)> {
    // c is normalized to max 1, so 2·max c = 2.
    let shift = 2.0;
    let mut v: Vec<f64> = (0..d).map(|j| src.a()[j] + src.b()[j]).collect();
    normalize(&mut v);
    let norm_inf = (0..d)
        .map(|i| (0..d).map(|j| normalized[i * d + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + shift;
    let floor = 64.0 * f64::EPSILON * norm_inf;

    let mut w = vec![0.0; d];
    let cap = options.iteration_cap(d);
    for iteration in 1..=cap {
        for i in 0..d {
            let row = &normalized[i * d..(i + 1) * d];
            w[i] = row.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>() + shift * v[i];
        }
        let rho: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - rho * vi).abs())
            .fold(0.0, f64::max);
        let lambda = rho - shift;
        // Tolerance is stated in the caller's units, the iteration runs in
        // units of max c.
        let target = (options.tolerance * 1e-2 * (1.0 / scale).max(lambda)).max(floor);
        if residual <= target {
            return Some((lambda, v, iteration));
        }
        std::mem::swap(&mut v, &mut w);
        normalize(&mut v);
    }
    None
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Flips the eigenvector to the positive orthant and pins decoupled rows
/// (those with `a_j = b_j = 0`, whose eigenvector entry is exactly zero).
fn orient(mut v: Vec<f64>, decoupled: &[bool]) -> Result<Vec<f64>, EigenError> {
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    for (x, &dec) in v.iter_mut().zip(decoupled) {
        if dec {
            *x = 0.0;
        } else if *x <= 0.0 {
            return Err(EigenError::IndefiniteEigenvector);
        }
    }
    normalize(&mut v);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &[f64], b: &[f64], c: &[f64]) -> Result<EigenPair, EigenError> {
        let vecs = PerturbationVectors::new(a.to_vec(), b.to_vec(), c.to_vec()).unwrap();
        unique_positive_eigenpair(&build_matrix(&vecs), &SolverOptions::default())
    }

    #[test]
    fn build_one_by_one() {
        let m = build_matrix(&PerturbationVectors::rank_one(vec![2.0], vec![1.0]).unwrap());
        assert_eq!(m.entries(), &[3.0]);
    }

    #[test]
    fn build_swap_matrix() {
        let m = build_matrix(&PerturbationVectors::rank_one(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap());
        assert_eq!(m.rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn build_symmetric_single_stage_instance() {
        // N = 100, S = 10, t = 1000, n = 20: A = 1, so a_j² = 1/20; c_j = 0.01.
        let a = (1.0f64 / 20.0).sqrt();
        let m = build_matrix(&PerturbationVectors::rank_one(vec![a, a], vec![0.01, 0.01]).unwrap());
        assert!((m.get(0, 0) - 0.04).abs() < 1e-15);
        assert!((m.get(0, 1) - 0.05).abs() < 1e-15);
        assert_eq!(m.get(0, 1), m.get(1, 0));
    }

    #[test]
    fn build_extreme_magnitudes_stay_finite() {
        for &mag in &[1e-30, 1e30] {
            let v = PerturbationVectors::new(vec![mag, 1.0], vec![mag, mag], vec![mag, 1.0]).unwrap();
            assert!(build_matrix(&v).entries().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn invalid_vectors_rejected() {
        assert!(matches!(
            PerturbationVectors::new(vec![1.0], vec![0.0, 0.0], vec![1.0]),
            Err(EigenError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            PerturbationVectors::rank_one(vec![1.0, 1.0], vec![1.0, 0.0]),
            Err(EigenError::NonpositiveC { index: 1, .. })
        ));
        assert!(matches!(
            PerturbationVectors::rank_one(vec![0.0, 0.0], vec![1.0, 1.0]),
            Err(EigenError::ZeroLoad)
        ));
        assert!(matches!(
            PerturbationVectors::new(vec![1.0], vec![-1.0], vec![1.0]),
            Err(EigenError::InvalidEntry { name: "b", .. })
        ));
    }

    #[test]
    fn rank1_condition_examples() {
        assert!(check_condition_rank1(&[2.0], &[1.0]));
        assert!(!check_condition_rank1(&[0.5], &[1.0]));
        assert!(check_condition_rank1(&[1.0, 1.0], &[1.0, 1.0]));
    }

    #[test]
    fn rank2_condition_examples() {
        assert!(!check_condition_rank2(&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]));
        assert!((condition_margin_rank2(&[1.0, 0.0], &[0.0, 1.0], &[0.5, 0.5]) - (-5.0)).abs() < 1e-15);
        assert!(check_condition_rank2(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]));
    }

    #[test]
    fn rank2_reduces_to_rank1_bitwise() {
        let a = [0.3, 0.7, 1.1, 0.05];
        let c = [0.2, 0.9, 0.4, 0.01];
        assert_eq!(
            condition_margin_rank1(&a, &c).to_bits(),
            condition_margin_rank2(&a, &[0.0; 4], &c).to_bits()
        );
    }

    #[test]
    fn analytic_eigenpairs() {
        let p = pair(&[2.0], &[0.0], &[1.0]).unwrap();
        assert_eq!(p.lambda, 3.0);
        assert_eq!(p.v, vec![1.0]);

        let p = pair(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((p.lambda - 1.0).abs() < 1e-12);
        for x in &p.v {
            assert!((x - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }

        let a = (0.05f64).sqrt();
        let p = pair(&[a, a], &[0.0, 0.0], &[0.01, 0.01]).unwrap();
        assert!((p.lambda - 0.09).abs() < 1e-12);
    }

    #[test]
    fn one_by_one_nonpositive_is_error() {
        assert!(matches!(
            pair(&[0.5], &[0.0], &[1.0]),
            Err(EigenError::NoPositiveEigenvalue { .. })
        ));
    }

    #[test]
    fn failed_condition_needs_force() {
        let vecs = PerturbationVectors::new(vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let m = build_matrix(&vecs);
        assert!(matches!(
            unique_positive_eigenpair(&m, &SolverOptions::default()),
            Err(EigenError::ConditionNotSatisfied { .. })
        ));
        match unique_positive_eigenpair(&m, &SolverOptions::forced()) {
            Err(EigenError::MultiplePositiveEigenvalues { values }) => {
                assert_eq!(values.len(), 2);
                assert!(values.iter().all(|v| (v - 0.5).abs() < 1e-12));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn force_reports_missing_positive_eigenvalue() {
        let vecs = PerturbationVectors::rank_one(vec![0.1, 0.1], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            unique_positive_eigenpair(&build_matrix(&vecs), &SolverOptions::forced()),
            Err(EigenError::NoPositiveEigenvalue { .. })
        ));
    }

    #[test]
    fn force_certifies_perron_case_outside_condition() {
        // Entrywise positive D (one positive eigenvalue by Perron-Frobenius)
        // where the sufficient condition still fails.
        let vecs = PerturbationVectors::new(vec![1.0, 1.0], vec![1.0, 0.0], vec![1.5, 0.9]).unwrap();
        assert!(vecs.condition_margin() <= 0.0);
        let m = build_matrix(&vecs);
        assert!(m.entries().iter().all(|&x| x > 0.0));
        let spec = spectrum(&m).unwrap();
        assert!(spec[0] < 0.0 && spec[1] > 0.0);
        let p = unique_positive_eigenpair(&m, &SolverOptions::forced()).unwrap();
        assert!((p.lambda - spec[1]).abs() < 1e-12);
        assert!(p.v.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn decoupled_row_gets_zero_weight() {
        let p = pair(&[1.0, 0.0], &[0.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((p.lambda - 0.5).abs() < 1e-12);
        assert_eq!(p.v[1], 0.0);
        assert!((p.v[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn large_scale_inputs() {
        // Totals in the billions give tiny c; scaling must not matter.
        let a: Vec<f64> = vec![3e-3, 4e-3, 5e-3];
        let c: Vec<f64> = vec![1e-7, 2e-7, 3e-7];
        let vecs = PerturbationVectors::rank_one(a, c).unwrap();
        let m = build_matrix(&vecs);
        let p = unique_positive_eigenpair(&m, &SolverOptions::default()).unwrap();
        assert!(m.residual(p.lambda, &p.v) <= 1e-12 * p.lambda.max(1.0));
    }
}
