//! Synthetic unit-level frames.
//!
//! Unit `k` of SSU stratum `g` in PSU `i` of PSU stratum `h` of
//! subpopulation `j` gets
//!
//! ```text
//! y = μ_j (1 + spread · h) + σ_j (g / 2 + √ρ u_i + √(1 − ρ) e_k)
//! ```
//!
//! with independent standard normal `u_i` (PSU effect) and `e_k`. The PSU
//! size measure is its unit count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::SimulationError;
use crate::population::{
    derive_hr, derive_two_stage_srswor, Psu, PsuStratum, PopulationError, SsuStratum,
    TwoStagePopulation, TwoStageSubpop,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub subpops: usize,
    pub psu_strata: usize,
    pub psus_per_stratum: usize,
    pub ssu_strata: usize,
    /// Inclusive range of units per SSU stratum.
    pub units_per_ssu_stratum: (usize, usize),
    /// Per-subpopulation mean level, recycled if shorter than `subpops`.
    pub means: Vec<f64>,
    /// Per-subpopulation unit standard deviation, recycled likewise.
    pub sds: Vec<f64>,
    /// Relative step of the mean between consecutive PSU strata.
    pub stratum_spread: f64,
    /// Share of unit variance due to the PSU effect, in `[0, 1)`.
    pub rho: f64,
    /// Attach `z̃ ∝` unit count to every PSU.
    pub size_measure: bool,
    /// Regenerate until every derived `γ_jh` is positive. Ignored for
    /// single-PSU strata, where `D² = 0` makes `γ` negative by definition.
    pub require_positive_gamma: bool,
    pub max_attempts: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            subpops: 3,
            psu_strata: 2,
            psus_per_stratum: 30,
            ssu_strata: 1,
            units_per_ssu_stratum: (20, 90),
            means: vec![10.0, 20.0, 15.0],
            sds: vec![4.0, 12.0, 25.0],
            stratum_spread: 0.3,
            rho: 0.3,
            size_measure: true,
            require_positive_gamma: true,
            max_attempts: 50,
        }
    }
}

impl GeneratorParams {
    fn check(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidParams(m.to_string()));
        if self.subpops == 0 || self.psu_strata == 0 || self.psus_per_stratum == 0 || self.ssu_strata == 0 {
            return bad("counts must be at least 1");
        }
        let (lo, hi) = self.units_per_ssu_stratum;
        if lo == 0 || lo > hi {
            return bad("units_per_ssu_stratum must be a nonempty range of positive counts");
        }
        if self.means.is_empty() || self.sds.is_empty() {
            return bad("means and sds need at least one entry");
        }
        if self.sds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("sds must be nonnegative");
        }
        if self.means.iter().any(|m| !m.is_finite()) || !self.stratum_spread.is_finite() {
            return bad("means and stratum_spread must be finite");
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1)");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub population: TwoStagePopulation,
    pub params: GeneratorParams,
    pub seed: u64,
    /// Attempt (0-based) that produced the frame; also its RNG stream.
    pub attempt: usize,
}

pub fn generate_frame(params: &GeneratorParams, seed: u64) -> Result<SyntheticFrame, SimulationError> {
    params.check()?;
    let check_gamma = params.require_positive_gamma && params.psus_per_stratum > 1;
    for attempt in 0..params.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let population = draw_population(params, &mut rng);
        if check_gamma && !gamma_positive(&population, params.size_measure)? {
            continue;
        }
        population.validate()?;
        return Ok(SyntheticFrame {
            population,
            params: params.clone(),
            seed,
            attempt,
        });
    }
    Err(SimulationError::GammaInfeasible {
        attempts: params.max_attempts,
    })
}

fn gamma_positive(pop: &TwoStagePopulation, hr: bool) -> Result<bool, SimulationError> {
    let ok = |r: Result<_, PopulationError>| match r {
        Ok(_) => Ok(true),
        Err(PopulationError::NonpositiveGamma { .. }) => Ok(false),
        Err(e) => Err(SimulationError::Population(e)),
    };
    Ok(ok(derive_two_stage_srswor(pop))? && (!hr || ok(derive_hr(pop, false))?))
}

fn draw_population(params: &GeneratorParams, rng: &mut ChaCha8Rng) -> TwoStagePopulation {
    let (lo, hi) = params.units_per_ssu_stratum;
    let between = params.rho.sqrt();
    let within = (1.0 - params.rho).sqrt();
    let subpopulations = (0..params.subpops)
        .map(|j| {
            let mean = params.means[j % params.means.len()];
            let sd = params.sds[j % params.sds.len()];
            let psu_strata = (0..params.psu_strata)
                .map(|h| {
                    let mu = mean * (1.0 + params.stratum_spread * h as f64);
                    let mut psus: Vec<Psu> = (0..params.psus_per_stratum)
                        .map(|_| {
                            let effect: f64 = rng.sample(StandardNormal);
                            let ssu_strata = (0..params.ssu_strata)
                                .map(|g| {
                                    let n = rng.random_range(lo..=hi);
                                    let units = (0..n)
                                        .map(|_| {
                                            let e: f64 = rng.sample(StandardNormal);
                                            mu + sd * (0.5 * g as f64 + between * effect + within * e)
                                        })
                                        .collect();
                                    SsuStratum::from_units(units)
                                })
                                .collect();
                            Psu::from_ssu_strata(None, ssu_strata).expect("units present")
                        })
                        .collect();
                    if params.size_measure {
                        let sizes: Vec<f64> = psus.iter().map(|p| p.size() as f64).collect();
                        let total: f64 = sizes.iter().sum();
                        for (p, s) in psus.iter_mut().zip(sizes) {
                            p.z_tilde = Some(s / total);
                        }
                    }
                    PsuStratum::from_psus(psus)
                })
                .collect();
            TwoStageSubpop { psu_strata }
        })
        .collect();
    TwoStagePopulation { subpopulations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::Population;

    #[test]
    fn deterministic_for_seed() {
        let p = GeneratorParams { psus_per_stratum: 5, ..GeneratorParams::default() };
        let a = generate_frame(&p, 11).unwrap();
        let b = generate_frame(&p, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_frame(&p, 12).unwrap();
        assert_ne!(a.population, c.population);
    }

    #[test]
    fn default_frame_is_valid_and_sized() {
        let f = generate_frame(&GeneratorParams::default(), 2024).unwrap();
        let units = f.population.unit_count();
        assert!((5_000..15_000).contains(&units), "{units}");
        assert!(f.population.has_size_measures());
        derive_hr(&f.population, false).unwrap();
        derive_two_stage_srswor(&f.population).unwrap();
    }

    #[test]
    fn single_psu_degenerate_frame() {
        let p = GeneratorParams {
            subpops: 1,
            psu_strata: 1,
            psus_per_stratum: 1,
            units_per_ssu_stratum: (50, 50),
            ..GeneratorParams::default()
        };
        let f = generate_frame(&p, 3).unwrap();
        let pop = Population::TwoStage(f.population.clone());
        pop.validate().unwrap();
        assert_eq!(f.population.subpopulations[0].psu_strata[0].d2, 0.0);
        let single = f.population.to_single_stage().unwrap();
        Population::SingleStage(single).validate().unwrap();
    }

    #[test]
    fn invalid_params() {
        for p in [
            GeneratorParams { rho: 1.0, ..GeneratorParams::default() },
            GeneratorParams { units_per_ssu_stratum: (5, 2), ..GeneratorParams::default() },
            GeneratorParams { subpops: 0, ..GeneratorParams::default() },
        ] {
            assert!(matches!(generate_frame(&p, 1), Err(SimulationError::InvalidParams(_))));
        }
    }

    #[test]
    fn gamma_retry_cap() {
        // With rho = 0 and equal PSU sizes γ is centred on zero, so a single
        // attempt fails for some seeds.
        let p = GeneratorParams {
            rho: 0.0,
            units_per_ssu_stratum: (10, 10),
            psus_per_stratum: 4,
            psu_strata: 4,
            max_attempts: 1,
            ..GeneratorParams::default()
        };
        let failures = (0..20)
            .filter(|&s| matches!(generate_frame(&p, s), Err(SimulationError::GammaInfeasible { attempts: 1 })))
            .count();
        assert!(failures > 0);
    }
}
