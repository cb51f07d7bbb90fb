//! Random instance builders shared by the integration tests.
#![allow(dead_code)]

use eqalloc::allocation::perturbation_vectors;
use eqalloc::population::{SingleStagePopulation, SingleStratum, SingleSubpop};
use eqalloc::simulator::{generate_frame, GeneratorParams};
use eqalloc::{Budgets, DerivedCoefficients, SchemeId, TwoStagePopulation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel(x: f64, y: f64) -> f64 {
    if x == y {
        0.0
    } else {
        (x - y).abs() / x.abs().max(y.abs())
    }
}

/// Perturbation vectors of length `d` in one of three shapes: `b = 0`,
/// `b` nearly parallel to `a`, or unrelated `a` and `b`.
pub fn random_vectors(rng: &mut impl Rng, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let shape = rng.random_range(0..3);
    let scale = 10f64.powf(rng.random_range(-1.0..1.0));
    let a: Vec<f64> = (0..d).map(|_| scale * rng.random_range(0.05..1.0)).collect();
    let t = rng.random_range(0.1..2.0);
    let b: Vec<f64> = match shape {
        0 => vec![0.0; d],
        1 => a.iter().map(|ai| t * ai * rng.random_range(0.95..1.05)).collect(),
        _ => (0..d).map(|_| scale * rng.random_range(0.05..1.0)).collect(),
    };
    let c: Vec<f64> = (0..d)
        .map(|i| (a[i] * a[i] + b[i] * b[i]) * 10f64.powf(rng.random_range(-1.0..1.5)))
        .collect();
    (a, b, c)
}

/// Summary-only single-stage frame with `J ≤ j_max` subpopulations and
/// `H_j ≤ h_max` strata.
pub fn random_single_stage(rng: &mut impl Rng, j_max: usize, h_max: usize) -> SingleStagePopulation {
    let j = rng.random_range(1..=j_max);
    let subpopulations = (0..j)
        .map(|_| {
            let h = rng.random_range(1..=h_max);
            let mut total = 0.0;
            let strata = (0..h)
                .map(|_| {
                    let size = rng.random_range(20..2000u64);
                    let mean = rng.random_range(5.0..100.0);
                    total += size as f64 * mean;
                    SingleStratum {
                        size,
                        sd: rng.random_range(0.5..30.0),
                        units: None,
                    }
                })
                .collect();
            SingleSubpop { total, strata }
        })
        .collect();
    SingleStagePopulation { subpopulations }
}

/// `Σ_j s_j² / c_j`, the supremum of admissible single-stage budgets.
pub fn single_stage_supremum(coeffs: &DerivedCoefficients) -> f64 {
    coeffs
        .subpops
        .iter()
        .map(|sp| {
            let s: f64 = sp.cells.iter().map(|c| c.a.sqrt()).sum();
            s * s / sp.c
        })
        .sum()
}

pub fn single_stage_budget(rng: &mut impl Rng, coeffs: &DerivedCoefficients) -> Budgets {
    Budgets::single(rng.random_range(0.05..0.9) * single_stage_supremum(coeffs))
}

/// Small synthetic two-stage frame with unit values and size measures.
pub fn random_frame(rng: &mut impl Rng, seed: u64) -> TwoStagePopulation {
    let params = GeneratorParams {
        subpops: rng.random_range(2..=4),
        psu_strata: rng.random_range(1..=3),
        psus_per_stratum: rng.random_range(4..=12),
        ssu_strata: rng.random_range(1..=2),
        units_per_ssu_stratum: (5, 30),
        rho: rng.random_range(0.2..0.6),
        ..GeneratorParams::default()
    };
    generate_frame(&params, seed).unwrap().population
}

/// A budget pair satisfying the uniqueness condition, found by halving a
/// random starting point.
pub fn two_stage_budget(
    rng: &mut impl Rng,
    coeffs: &DerivedCoefficients,
    scheme: SchemeId,
) -> Option<Budgets> {
    let psus: f64 = coeffs
        .subpops
        .iter()
        .flat_map(|s| &s.cells)
        .map(|c| c.capacity as f64)
        .sum();
    let mut x = rng.random_range(0.2..0.8) * psus;
    let mut z = x * rng.random_range(2.0..8.0);
    for _ in 0..40 {
        let b = Budgets::two_stage(x, z);
        if perturbation_vectors(coeffs, scheme, &b).ok()?.condition_margin() > 0.0 {
            return Some(b);
        }
        if rng.random_bool(0.5) {
            x *= 0.7;
        } else {
            z *= 0.7;
        }
    }
    None
}

/// Two-stage SRSWOR-shaped coefficients drawn directly: `cells[j]` first-stage
/// cells in subpopulation `j`, each with `second` second-stage cells of
/// weight `1/M`.
pub fn random_two_stage_coeffs(
    rng: &mut impl Rng,
    cells: &[usize],
    second: usize,
    capacity: u64,
) -> DerivedCoefficients {
    use eqalloc::population::{
        CellCoefficients, CoefficientFamily, SecondStageCell, SecondStageKey, SubpopCoefficients,
    };
    let subpops = cells
        .iter()
        .map(|&h| {
            let cells: Vec<CellCoefficients> = (0..h)
                .map(|_| CellCoefficients {
                    a: rng.random_range(0.01..1.0),
                    capacity,
                    second: (0..second)
                        .map(|i| SecondStageCell {
                            key: SecondStageKey::Cell { psu: i, ssu_stratum: 0 },
                            b: rng.random_range(0.01..1.0),
                            alpha: 1.0 / capacity as f64,
                            capacity: 10 * capacity,
                        })
                        .collect(),
                })
                .collect();
            let mass: f64 = cells.iter().map(|c| c.a).sum();
            SubpopCoefficients {
                c: mass * rng.random_range(0.002..0.02),
                kappa: 1.0,
                cells,
            }
        })
        .collect();
    DerivedCoefficients {
        family: CoefficientFamily::TwoStageSrswor,
        subpops,
    }
}
