//! Optimal equal-precision sample allocation for stratified single-stage and
//! two-stage survey designs.
//!
//! The pipeline is: load a population frame ([`population`]), derive the
//! per-cell variance coefficients for a sampling scheme, solve the perturbed
//! diagonal eigenproblem ([`eigen`]) and turn its eigenpair into per-cell
//! sample sizes ([`allocation`]). The [`simulator`] draws samples from
//! unit-level frames to check the resulting precision empirically.

pub mod allocation;
pub mod eigen;
pub mod numeric;
pub mod population;
pub mod simulator;

pub use allocation::{
    allocate, evaluate_precision, round_allocation, solve_t_direct, AllocationError,
    AllocationResult, Budgets, RoundedAllocation, RoundingOptions, SchemeId,
};
pub use eigen::{
    build_matrix, check_condition_rank1, check_condition_rank2, unique_positive_eigenpair,
    EigenError, EigenPair, PerturbationVectors, PerturbedMatrix, SolverOptions,
};
pub use population::{
    derive_hr, derive_single_stage, derive_two_stage_fixed_ssu, derive_two_stage_srswor,
    load_population, save_population, DerivedCoefficients, Population, PopulationError,
    SingleStagePopulation, TwoStagePopulation,
};
pub use simulator::{run_experiment, SimulationError, SimulationReport};
