//! Monte-Carlo validation of allocations on unit-level frames.
//!
//! Replicate `r` of an experiment draws from its own ChaCha8 stream
//! (`seed`, stream `r`), so results do not depend on thread count or
//! scheduling. Both arms of a paired experiment see the same streams.

mod draw;
mod estimate;
mod generate;

pub use draw::{draw_hartley_rao, draw_srswor};
pub use estimate::{
    bootstrap_cv, draw_selection, ht_total, observe, single_stage_design, unit_frame,
    BootstrapEstimate, FirstStage, PsuDraw, Sample, SampleDesign, SampledPsu, Selection,
    SsuRounding, StratumDesign,
};
pub use generate::{generate_frame, GeneratorParams, SyntheticFrame};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::allocation::AllocationError;
use crate::numeric::NeumaierSum;
use crate::population::{PopulationError, TwoStagePopulation};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("sample size {n} outside 1..={universe}")]
    SampleSize { n: usize, universe: usize },
    #[error("inclusion probability {pi} of PSU {psu} exceeds 1")]
    InclusionOverflow { psu: usize, pi: f64 },
    #[error("size measure: {0}")]
    SizeMeasure(String),
    #[error("subpop[{subpop}]/stratum[{stratum}] has fewer than two sampled PSUs; the bootstrap needs two")]
    SingletonStratum { subpop: usize, stratum: usize },
    #[error("no frame with positive gamma after {attempts} attempts")]
    GammaInfeasible { attempts: usize },
    #[error("the frame carries no unit values")]
    MissingUnits,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("design: {0}")]
    Design(String),
    #[error(transparent)]
    Allocation(#[from] AllocationError),
    #[error(transparent)]
    Population(#[from] PopulationError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentConfig {
    pub replicates: usize,
    /// Bootstrap replicates per Monte-Carlo replicate; 0 skips the bootstrap.
    pub bootstrap: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubpopSummary {
    pub total: f64,
    /// `√T_j` the design is expected to achieve.
    pub theoretical_cv: f64,
    pub mean_estimate: f64,
    /// `√(mean (t̂ − t)²) / t` over the replicates.
    pub mc_cv: f64,
    /// Delta-method standard error of `mc_cv`; NaN for one replicate.
    pub mc_cv_se: f64,
    /// Mean bootstrap CV over replicates; NaN without bootstrap.
    pub bootstrap_cv: f64,
    /// Standard error of `bootstrap_cv` over replicates.
    pub bootstrap_cv_se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub replicates: usize,
    pub bootstrap: usize,
    pub seed: u64,
    pub subpops: Vec<SubpopSummary>,
    /// Design first-stage size and the realized mean (always equal for the
    /// fixed-size first-stage designs used here).
    pub psu_target: f64,
    pub psu_mean: f64,
    pub psu_se: f64,
    /// Expected second-stage units of the design and the realized mean.
    pub ssu_expected: f64,
    pub ssu_mean: f64,
    pub ssu_se: f64,
    /// Standard errors need at least two replicates (and two bootstrap
    /// replicates for the bootstrap column).
    pub se_defined: bool,
    pub warnings: Vec<String>,
}

struct Replicate {
    estimates: Vec<f64>,
    boot_cv: Option<Vec<f64>>,
    psus: usize,
    ssus: usize,
}

fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

fn run_replicate(
    frame: &TwoStagePopulation,
    design: &SampleDesign,
    config: &ExperimentConfig,
    r: usize,
) -> Result<Replicate, SimulationError> {
    let mut rng = replicate_rng(config.seed, r);
    let selection = draw_selection(frame, design, &mut rng)?;
    let sample = observe(frame, design, &selection)?;
    let estimates = ht_total(&sample);
    let boot_cv = if config.bootstrap > 0 {
        Some(bootstrap_cv(&sample, config.bootstrap, &mut rng)?.cv)
    } else {
        None
    };
    Ok(Replicate {
        estimates,
        boot_cv,
        psus: sample.psu_count(),
        ssus: sample.ssu_count(),
    })
}

fn mean_se(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().collect::<NeumaierSum>().value() / n;
    if n < 2.0 {
        return (mean, f64::NAN);
    }
    let var = values.map(|x| (x - mean) * (x - mean)).collect::<NeumaierSum>().value() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs `config.replicates` independent draws of `design` on `frame`.
pub fn simulate(
    frame: &TwoStagePopulation,
    design: &SampleDesign,
    config: &ExperimentConfig,
) -> Result<SimulationReport, SimulationError> {
    if config.replicates == 0 {
        return Err(SimulationError::InvalidParams("need at least one replicate".into()));
    }
    if !frame.has_units() {
        return Err(SimulationError::MissingUnits);
    }
    let reps: Vec<Replicate> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(frame, design, config, r))
        .collect::<Result<_, _>>()?;

    let totals: Vec<f64> = frame.subpopulations.iter().map(|s| s.total()).collect();
    let subpops = totals
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let est = reps.iter().map(|r| r.estimates[j]);
            let (mean_estimate, _) = mean_se(est.clone());
            let sq = reps.iter().map(|r| (r.estimates[j] - t).powi(2));
            let (mse, mse_se) = mean_se(sq);
            let mc_cv = mse.sqrt() / t.abs();
            let mc_cv_se = mse_se / (2.0 * mse.sqrt() * t.abs());
            let (bootstrap_cv, bootstrap_cv_se) = if config.bootstrap > 0 {
                mean_se(reps.iter().map(|r| r.boot_cv.as_ref().unwrap()[j]))
            } else {
                (f64::NAN, f64::NAN)
            };
            SubpopSummary {
                total: t,
                theoretical_cv: design.expected_t[j].sqrt(),
                mean_estimate,
                mc_cv,
                mc_cv_se,
                bootstrap_cv,
                bootstrap_cv_se,
            }
        })
        .collect();
    let (psu_mean, psu_se) = mean_se(reps.iter().map(|r| r.psus as f64));
    let (ssu_mean, ssu_se) = mean_se(reps.iter().map(|r| r.ssus as f64));

    let mut warnings = Vec::new();
    if config.replicates < 2 {
        warnings.push("one replicate: Monte-Carlo standard errors are undefined".to_string());
    }
    if config.bootstrap == 1 {
        warnings.push("one bootstrap replicate: the bootstrap variance rests on a single draw".to_string());
    }
    Ok(SimulationReport {
        replicates: config.replicates,
        bootstrap: config.bootstrap,
        seed: config.seed,
        subpops,
        psu_target: design.psu_count() as f64,
        psu_mean,
        psu_se,
        ssu_expected: design.expected_ssu_count(frame),
        ssu_mean,
        ssu_se,
        se_defined: config.replicates >= 2 && config.bootstrap != 1,
        warnings,
    })
}

/// Paired comparison of two designs on common random numbers.
pub fn run_experiment(
    frame: &TwoStagePopulation,
    first: &SampleDesign,
    second: &SampleDesign,
    config: &ExperimentConfig,
) -> Result<(SimulationReport, SimulationReport), SimulationError> {
    Ok((simulate(frame, first, config)?, simulate(frame, second, config)?))
}
