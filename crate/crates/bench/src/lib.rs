//! Deterministic inputs shared by the benchmarks.

use eqalloc::simulator::{generate_frame, GeneratorParams};
use eqalloc::{PerturbationVectors, TwoStagePopulation};

/// Perturbation vectors of dimension `d` with a comfortable condition margin.
/// With `rank_two` the second vector is a skewed copy of the first.
pub fn vectors(d: usize, rank_two: bool) -> PerturbationVectors {
    let a: Vec<f64> = (0..d).map(|i| 1.0 + 0.5 * (i as f64).sin()).collect();
    let b: Vec<f64> = if rank_two {
        a.iter().enumerate().map(|(i, x)| 0.3 * x * (1.0 + 0.1 * (i as f64).cos())).collect()
    } else {
        vec![0.0; d]
    };
    // Σ (a² + b²)/c = 1.25
    let c = a.iter().zip(&b).map(|(x, y)| 0.8 * d as f64 * (x * x + y * y)).collect();
    let v = PerturbationVectors::new(a, b, c).expect("valid vectors");
    assert!(d == 1 || v.condition_margin() > 0.0, "fixture violates the condition at d = {d}");
    v
}

/// A synthetic frame with `subpops` subpopulations.
pub fn frame(subpops: usize) -> TwoStagePopulation {
    let params = GeneratorParams { subpops, rho: 0.3, ..GeneratorParams::default() };
    generate_frame(&params, 11).expect("generated frame").population
}
