//! Optimal equal-precision allocation.
//!
//! For coefficients `(A, B, α, c)` and budgets `x` (first stage) and `z`
//! (expected second-stage units) the optimum of `max_j T_j` equalizes every
//! `T_j` at the unique positive eigenvalue `λ` of `D = aaᵀ + bbᵀ − diag(c)`,
//! where
//!
//! ```text
//! a_j = x^{-1/2} Σ_h √A_jh        b_j = z^{-1/2} Σ_h Σ_i √(α_jhi B_jhi)
//! ```
//!
//! and the sample sizes follow from its eigenvector `v`:
//!
//! ```text
//! x_jh  = x v_j √A_jh / Σ_k v_k Σ_g √A_kg
//! z_jhi = z v_j √(B_jhi/α_jhi) / (x_jh Σ_k v_k Σ_g Σ_l √(α_kgl B_kgl))
//! ```

mod direct;
mod rounding;

pub use direct::{solve_t_direct, DirectSolution};
pub use rounding::{round_allocation, RoundedAllocation, RoundingOptions};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::eigen::{
    build_matrix, unique_positive_eigenpair, EigenError, PerturbationVectors, SolveMethod,
    SolverOptions,
};
use crate::numeric::NeumaierSum;
use crate::population::{
    derive_hr, derive_single_stage, derive_two_stage_fixed_ssu, derive_two_stage_srswor,
    CoefficientFamily, DerivedCoefficients, Population, PopulationError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeId {
    /// Stratified SRSWOR within every subpopulation.
    SingleStageStratified,
    /// Unstratified SRSWOR within every subpopulation.
    SingleStageSrswor,
    /// Stratified SRSWOR with Neyman allocation inside each subpopulation,
    /// solved by root finding on the subpopulation totals.
    SingleStageNeymanWithin,
    TwoStageSrswor,
    TwoStageFixedSsu,
    TwoStageHr,
    TwoStageHrFixedSsu,
}

impl SchemeId {
    pub const ALL: [SchemeId; 7] = [
        SchemeId::SingleStageStratified,
        SchemeId::SingleStageSrswor,
        SchemeId::SingleStageNeymanWithin,
        SchemeId::TwoStageSrswor,
        SchemeId::TwoStageFixedSsu,
        SchemeId::TwoStageHr,
        SchemeId::TwoStageHrFixedSsu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::SingleStageStratified => "single-stage-stratified",
            SchemeId::SingleStageSrswor => "single-stage-srswor",
            SchemeId::SingleStageNeymanWithin => "single-stage-neyman-within",
            SchemeId::TwoStageSrswor => "two-stage-srswor",
            SchemeId::TwoStageFixedSsu => "two-stage-fixed-ssu",
            SchemeId::TwoStageHr => "two-stage-hr",
            SchemeId::TwoStageHrFixedSsu => "two-stage-hr-fixed-ssu",
        }
    }

    pub fn family(self) -> CoefficientFamily {
        match self {
            SchemeId::SingleStageStratified
            | SchemeId::SingleStageSrswor
            | SchemeId::SingleStageNeymanWithin => CoefficientFamily::SingleStage,
            SchemeId::TwoStageSrswor => CoefficientFamily::TwoStageSrswor,
            SchemeId::TwoStageFixedSsu => CoefficientFamily::TwoStageFixedSsu,
            SchemeId::TwoStageHr => CoefficientFamily::TwoStageHr,
            SchemeId::TwoStageHrFixedSsu => CoefficientFamily::TwoStageHrFixedSsu,
        }
    }

    pub fn is_two_stage(self) -> bool {
        self.family().is_two_stage()
    }

    pub fn is_hartley_rao(self) -> bool {
        matches!(self, SchemeId::TwoStageHr | SchemeId::TwoStageHrFixedSsu)
    }

    /// Derives the coefficients this scheme consumes.
    pub fn derive(self, pop: &Population) -> Result<DerivedCoefficients, PopulationError> {
        match self.family() {
            CoefficientFamily::SingleStage => derive_single_stage(&pop.clone().into_single_stage()?),
            CoefficientFamily::TwoStageSrswor => {
                derive_two_stage_srswor(&pop.clone().into_two_stage()?)
            }
            CoefficientFamily::TwoStageFixedSsu => {
                derive_two_stage_fixed_ssu(&pop.clone().into_two_stage()?)
            }
            CoefficientFamily::TwoStageHr => derive_hr(&pop.clone().into_two_stage()?, false),
            CoefficientFamily::TwoStageHrFixedSsu => {
                derive_hr(&pop.clone().into_two_stage()?, true)
            }
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = String;

    /// Accepts `two-stage-hr` as well as `TWO_STAGE_HR`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        SchemeId::ALL
            .into_iter()
            .find(|id| id.name() == key)
            .ok_or_else(|| {
                let names: Vec<&str> = SchemeId::ALL.iter().map(|s| s.name()).collect();
                format!("unknown scheme '{s}' (expected one of {})", names.join(", "))
            })
    }
}

/// `x` is the first-stage size (units for single-stage schemes, PSUs for
/// two-stage ones); `z` the expected number of second-stage units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budgets {
    pub x: f64,
    pub z: Option<f64>,
}

impl Budgets {
    pub fn single(n: f64) -> Self {
        Budgets { x: n, z: None }
    }

    pub fn two_stage(m: f64, n: f64) -> Self {
        Budgets { x: m, z: Some(n) }
    }
}

#[derive(Debug, Error)]
pub enum AllocationError {
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Population(#[from] PopulationError),
    #[error("scheme mismatch: {0}")]
    SchemeMismatch(String),
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("budget {budget} is not below the supremum {supremum}; no positive precision solves the budget equation")]
    BudgetTooLarge { budget: f64, supremum: f64 },
    #[error("subpop[{subpop}]/stratum[{stratum}] has a zero sample size but positive variance mass")]
    ZeroCell { subpop: usize, stratum: usize },
    #[error("infeasible under capacity caps: {0}")]
    InfeasibleCap(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    pub scheme: SchemeId,
    pub budgets: Budgets,
    /// Coefficients the allocation was computed from, priorities included.
    pub coefficients: DerivedCoefficients,
    /// `x_jh`, indexed `[j][h]`.
    pub first_stage: Vec<Vec<f64>>,
    /// `z_jhi`, indexed `[j][h][k]` following `coefficients` second-stage cells.
    pub second_stage: Vec<Vec<Vec<f64>>>,
    /// Eigenvalue of the (priority-scaled) problem.
    pub lambda: f64,
    /// Common optimal squared CV of the scaled problem; equals `lambda`.
    pub t: f64,
    pub v: Vec<f64>,
    /// Achieved squared CV per subpopulation, `κ_j` times the scaled value.
    pub per_subpop_t: Vec<f64>,
    pub condition_margin: f64,
    /// `None` for allocations not produced by the eigen solver.
    pub method: Option<SolveMethod>,
    pub rounded: Option<RoundedAllocation>,
}

impl AllocationResult {
    pub fn with_rounding(mut self, options: &RoundingOptions) -> Result<Self, AllocationError> {
        self.rounded = Some(round_allocation(&self, options)?);
        Ok(self)
    }

    /// `Σ x_jh`.
    pub fn first_stage_total(&self) -> f64 {
        self.first_stage.iter().flatten().copied().collect::<NeumaierSum>().value()
    }

    /// `Σ α_jhi x_jh z_jhi`, the expected number of second-stage units.
    pub fn expected_second_stage_total(&self) -> f64 {
        let mut sum = NeumaierSum::default();
        for (j, sp) in self.coefficients.subpops.iter().enumerate() {
            for (h, cell) in sp.cells.iter().enumerate() {
                for (k, s) in cell.second.iter().enumerate() {
                    sum.add(s.alpha * self.first_stage[j][h] * self.second_stage[j][h][k]);
                }
            }
        }
        sum.value()
    }
}

fn check_scheme(
    coeffs: &DerivedCoefficients,
    scheme: SchemeId,
    budgets: &Budgets,
) -> Result<(), AllocationError> {
    if coeffs.family != scheme.family() {
        return Err(AllocationError::SchemeMismatch(format!(
            "{scheme} needs {:?} coefficients, got {:?}",
            scheme.family(),
            coeffs.family
        )));
    }
    if coeffs.subpops.is_empty() {
        return Err(AllocationError::SchemeMismatch("no subpopulations".into()));
    }
    if scheme == SchemeId::SingleStageSrswor {
        if let Some(j) = coeffs.subpops.iter().position(|s| s.cells.len() != 1) {
            return Err(AllocationError::SchemeMismatch(format!(
                "{scheme} needs one stratum per subpopulation; subpop[{j}] has {}",
                coeffs.subpops[j].cells.len()
            )));
        }
    }
    if !(budgets.x.is_finite() && budgets.x > 0.0) {
        return Err(AllocationError::InvalidBudget(format!("x = {}", budgets.x)));
    }
    match (scheme.is_two_stage(), budgets.z) {
        (true, None) => Err(AllocationError::SchemeMismatch(format!(
            "{scheme} needs a second-stage budget"
        ))),
        (false, Some(_)) => Err(AllocationError::SchemeMismatch(format!(
            "{scheme} takes no second-stage budget"
        ))),
        (true, Some(z)) if !(z.is_finite() && z > 0.0) => {
            Err(AllocationError::InvalidBudget(format!("z = {z}")))
        }
        _ => Ok(()),
    }
}

/// `(Σ_h √A_jh, Σ_h Σ_i √(α B))` per subpopulation.
fn loads(coeffs: &DerivedCoefficients) -> (Vec<f64>, Vec<f64>) {
    coeffs
        .subpops
        .iter()
        .map(|sp| {
            let mut sa = NeumaierSum::default();
            let mut sb = NeumaierSum::default();
            for cell in &sp.cells {
                sa.add(cell.a.sqrt());
                for s in &cell.second {
                    sb.add((s.alpha * s.b).sqrt());
                }
            }
            (sa.value(), sb.value())
        })
        .unzip()
}

/// The perturbation vectors `(a, b, c)` for a scheme and budget.
pub fn perturbation_vectors(
    coeffs: &DerivedCoefficients,
    scheme: SchemeId,
    budgets: &Budgets,
) -> Result<PerturbationVectors, AllocationError> {
    check_scheme(coeffs, scheme, budgets)?;
    let (sa, sb) = loads(coeffs);
    let rx = budgets.x.sqrt();
    let a: Vec<f64> = sa.iter().map(|s| s / rx).collect();
    let c: Vec<f64> = coeffs.subpops.iter().map(|s| s.c).collect();
    let pv = match budgets.z {
        Some(z) => {
            let rz = z.sqrt();
            PerturbationVectors::new(a, sb.iter().map(|s| s / rz).collect(), c)?
        }
        None => PerturbationVectors::rank_one(a, c)?,
    };
    Ok(pv)
}

pub fn allocate(
    coeffs: &DerivedCoefficients,
    scheme: SchemeId,
    budgets: &Budgets,
    options: &SolverOptions,
) -> Result<AllocationResult, AllocationError> {
    let pv = perturbation_vectors(coeffs, scheme, budgets)?;
    let margin = pv.condition_margin();
    let pair = unique_positive_eigenpair(&build_matrix(&pv), options)?;
    let v = pair.v;

    let (sa, sb) = loads(coeffs);
    let norm_a: f64 = v.iter().zip(&sa).map(|(v, s)| v * s).collect::<NeumaierSum>().value();
    let norm_b: f64 = v.iter().zip(&sb).map(|(v, s)| v * s).collect::<NeumaierSum>().value();

    let mut first_stage = Vec::with_capacity(coeffs.subpops.len());
    let mut second_stage = Vec::with_capacity(coeffs.subpops.len());
    for (sp, &vj) in coeffs.subpops.iter().zip(&v) {
        let mut xs = Vec::with_capacity(sp.cells.len());
        let mut zs = Vec::with_capacity(sp.cells.len());
        for cell in &sp.cells {
            let x = budgets.x * vj * cell.a.sqrt() / norm_a;
            let z = cell
                .second
                .iter()
                .map(|s| match budgets.z {
                    Some(zb) if x > 0.0 && s.b > 0.0 => {
                        zb * vj * (s.b / s.alpha).sqrt() / (x * norm_b)
                    }
                    _ => 0.0,
                })
                .collect();
            xs.push(x);
            zs.push(z);
        }
        first_stage.push(xs);
        second_stage.push(zs);
    }

    let per_subpop_t = actual_precision(coeffs, &first_stage, &second_stage)?;
    Ok(AllocationResult {
        scheme,
        budgets: *budgets,
        coefficients: coeffs.clone(),
        first_stage,
        second_stage,
        lambda: pair.lambda,
        t: pair.lambda,
        v,
        per_subpop_t,
        condition_margin: margin,
        method: Some(pair.method),
        rounded: None,
    })
}

/// `T_j = Σ_h (1/x_jh)(A_jh + Σ_i B_jhi / z_jhi) − c_j` on the given
/// coefficients. Cells with no variance mass may have zero size.
pub fn evaluate_precision(
    coeffs: &DerivedCoefficients,
    first_stage: &[Vec<f64>],
    second_stage: &[Vec<Vec<f64>>],
) -> Result<Vec<f64>, AllocationError> {
    if first_stage.len() != coeffs.subpops.len() || second_stage.len() != coeffs.subpops.len() {
        return Err(AllocationError::SchemeMismatch(
            "allocation shape does not match coefficients".into(),
        ));
    }
    let mut out = Vec::with_capacity(coeffs.subpops.len());
    for (j, sp) in coeffs.subpops.iter().enumerate() {
        if first_stage[j].len() != sp.cells.len() || second_stage[j].len() != sp.cells.len() {
            return Err(AllocationError::SchemeMismatch(format!(
                "allocation shape does not match coefficients in subpop[{j}]"
            )));
        }
        let mut t = NeumaierSum::default();
        for (h, cell) in sp.cells.iter().enumerate() {
            let x = first_stage[j][h];
            let z = &second_stage[j][h];
            if z.len() != cell.second.len() {
                return Err(AllocationError::SchemeMismatch(format!(
                    "second-stage shape does not match in subpop[{j}]/stratum[{h}]"
                )));
            }
            let mut inner = NeumaierSum::default();
            inner.add(cell.a);
            for (s, &zk) in cell.second.iter().zip(z) {
                if s.b > 0.0 {
                    if zk <= 0.0 {
                        return Err(AllocationError::ZeroCell { subpop: j, stratum: h });
                    }
                    inner.add(s.b / zk);
                }
            }
            let mass = inner.value();
            if mass > 0.0 {
                if x <= 0.0 {
                    return Err(AllocationError::ZeroCell { subpop: j, stratum: h });
                }
                t.add(mass / x);
            }
        }
        t.add(-sp.c);
        out.push(t.value());
    }
    Ok(out)
}

/// [`evaluate_precision`] with each subpopulation's priority multiplied back in.
pub(crate) fn actual_precision(
    coeffs: &DerivedCoefficients,
    first_stage: &[Vec<f64>],
    second_stage: &[Vec<Vec<f64>>],
) -> Result<Vec<f64>, AllocationError> {
    Ok(evaluate_precision(coeffs, first_stage, second_stage)?
        .into_iter()
        .zip(&coeffs.subpops)
        .map(|(t, sp)| t * sp.kappa)
        .collect())
}

/// Baseline: first-stage sizes proportional to cell capacity (`N_jh` or
/// `M_jh`) and, for two-stage schemes, one common second-stage sampling
/// fraction chosen so the expected second-stage total equals `z`.
pub fn proportional_allocation(
    coeffs: &DerivedCoefficients,
    scheme: SchemeId,
    budgets: &Budgets,
) -> Result<AllocationResult, AllocationError> {
    check_scheme(coeffs, scheme, budgets)?;
    let total_cap: f64 = coeffs
        .subpops
        .iter()
        .flat_map(|s| &s.cells)
        .map(|c| c.capacity as f64)
        .sum();
    let first_stage: Vec<Vec<f64>> = coeffs
        .subpops
        .iter()
        .map(|sp| {
            sp.cells
                .iter()
                .map(|c| budgets.x * c.capacity as f64 / total_cap)
                .collect()
        })
        .collect();
    let mut second_stage: Vec<Vec<Vec<f64>>> = coeffs
        .subpops
        .iter()
        .map(|sp| {
            sp.cells
                .iter()
                .map(|c| c.second.iter().map(|s| s.capacity as f64).collect())
                .collect()
        })
        .collect();
    if let Some(z) = budgets.z {
        let mut expected = NeumaierSum::default();
        for (j, sp) in coeffs.subpops.iter().enumerate() {
            for (h, cell) in sp.cells.iter().enumerate() {
                for (k, s) in cell.second.iter().enumerate() {
                    expected.add(s.alpha * first_stage[j][h] * second_stage[j][h][k]);
                }
            }
        }
        let fraction = z / expected.value();
        second_stage
            .iter_mut()
            .flatten()
            .flatten()
            .for_each(|n| *n *= fraction);
    }
    let per_subpop_t = actual_precision(coeffs, &first_stage, &second_stage)?;
    let worst = per_subpop_t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(AllocationResult {
        scheme,
        budgets: *budgets,
        coefficients: coeffs.clone(),
        first_stage,
        second_stage,
        lambda: worst,
        t: worst,
        v: Vec::new(),
        per_subpop_t,
        condition_margin: f64::NAN,
        method: None,
        rounded: None,
    })
}
