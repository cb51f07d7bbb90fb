mod common;

use common::{
    random_frame, random_single_stage, random_two_stage_coeffs, rel, rng, single_stage_budget,
    single_stage_supremum, two_stage_budget,
};
use eqalloc::population::{SingleStratum, SingleSubpop};
use eqalloc::{
    allocate, derive_single_stage, evaluate_precision, solve_t_direct, AllocationError,
    AllocationResult, Budgets, DerivedCoefficients, EigenError, Population, RoundingOptions,
    SchemeId, SingleStagePopulation, SolverOptions,
};
use eqalloc_testkit::{minimax_allocation, OracleCell, OracleProblem};
use rand::Rng;

fn opts() -> SolverOptions {
    SolverOptions::default()
}

fn single(sizes: &[u64], sds: &[f64], total: f64) -> SingleSubpop {
    SingleSubpop {
        total,
        strata: sizes
            .iter()
            .zip(sds)
            .map(|(&size, &sd)| SingleStratum { size, sd, units: None })
            .collect(),
    }
}

fn max_t(t: &[f64]) -> f64 {
    t.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn expected_second(c: &DerivedCoefficients, x: &[Vec<f64>], z: &[Vec<Vec<f64>>]) -> f64 {
    let mut sum = 0.0;
    for (j, sp) in c.subpops.iter().enumerate() {
        for (h, cell) in sp.cells.iter().enumerate() {
            for (k, s) in cell.second.iter().enumerate() {
                sum += s.alpha * x[j][h] * z[j][h][k];
            }
        }
    }
    sum
}

fn assert_equal_precision(r: &AllocationResult, label: &str) {
    assert!(rel(r.t, r.lambda) <= 1e-12, "{label}");
    for t in &r.per_subpop_t {
        assert!(rel(*t, r.lambda) <= 1e-9, "{label}: T_j {t} vs λ {}", r.lambda);
    }
    let t = evaluate_precision(&r.coefficients, &r.first_stage, &r.second_stage).unwrap();
    for t in &t {
        assert!(rel(*t, r.lambda) <= 1e-9, "{label}");
    }
    assert!(rel(r.first_stage_total(), r.budgets.x) <= 1e-10, "{label}");
    if let Some(z) = r.budgets.z {
        let e = expected_second(&r.coefficients, &r.first_stage, &r.second_stage);
        assert!(rel(e, z) <= 1e-10, "{label}: Σαxz = {e} vs {z}");
    }
}

#[test]
fn eigen_and_direct_paths_agree() {
    let mut r = rng(301);
    for trial in 0..50 {
        let pop = random_single_stage(&mut r, 8, 5);
        let coeffs = derive_single_stage(&pop).unwrap();
        let b = single_stage_budget(&mut r, &coeffs);
        let direct = solve_t_direct(&coeffs, SchemeId::SingleStageNeymanWithin, b.x).unwrap();
        for scheme in [SchemeId::SingleStageStratified, SchemeId::SingleStageNeymanWithin] {
            let eig = allocate(&coeffs, scheme, &b, &opts()).unwrap();
            assert!(rel(eig.t, direct.t) <= 1e-8, "trial {trial}: {} vs {}", eig.t, direct.t);
            for (xs, ys) in eig.first_stage.iter().zip(&direct.first_stage) {
                for (x, y) in xs.iter().zip(ys) {
                    assert!(rel(*x, *y) <= 1e-8, "trial {trial}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn asymmetric_pair_matches_direct() {
    let pop = SingleStagePopulation {
        subpopulations: vec![single(&[100], &[10.0], 800.0), single(&[200], &[5.0], 900.0)],
    };
    let coeffs = derive_single_stage(&pop).unwrap();
    let eig = allocate(&coeffs, SchemeId::SingleStageSrswor, &Budgets::single(30.0), &opts()).unwrap();
    let direct = solve_t_direct(&coeffs, SchemeId::SingleStageSrswor, 30.0).unwrap();
    assert!(rel(eig.t, direct.t) <= 1e-8);
    assert!(rel(eig.first_stage[0][0], direct.subpop_sizes[0]) <= 1e-8);
    assert!(rel(eig.first_stage[1][0], direct.subpop_sizes[1]) <= 1e-8);
}

#[test]
fn rank_one_condition_is_the_budget_supremum() {
    let mut r = rng(302);
    for _ in 0..50 {
        let pop = random_single_stage(&mut r, 6, 3);
        let coeffs = derive_single_stage(&pop).unwrap();
        let sup = single_stage_supremum(&coeffs);
        let scheme = SchemeId::SingleStageStratified;
        assert!(allocate(&coeffs, scheme, &Budgets::single(sup * 0.999), &opts()).is_ok());
        let err = allocate(&coeffs, scheme, &Budgets::single(sup * 1.001), &opts()).unwrap_err();
        assert!(matches!(err, AllocationError::Eigen(EigenError::ConditionNotSatisfied { .. }) | AllocationError::Eigen(EigenError::NoPositiveEigenvalue { .. })), "{err}");
        assert!(matches!(
            solve_t_direct(&coeffs, SchemeId::SingleStageNeymanWithin, sup * 1.001),
            Err(AllocationError::BudgetTooLarge { .. })
        ));
    }
}

/// Multiplies every cell by `1 + eps u` and projects back onto both budgets.
fn perturb(
    r: &mut impl Rng,
    res: &AllocationResult,
    eps: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let mut x: Vec<Vec<f64>> = res
        .first_stage
        .iter()
        .map(|xs| xs.iter().map(|x| x * (1.0 + eps * r.random_range(-1.0..1.0))).collect())
        .collect();
    let sum: f64 = x.iter().flatten().sum();
    x.iter_mut().flatten().for_each(|v| *v *= res.budgets.x / sum);
    let mut z: Vec<Vec<Vec<f64>>> = res
        .second_stage
        .iter()
        .map(|zs| {
            zs.iter()
                .map(|z| z.iter().map(|z| z * (1.0 + eps * r.random_range(-1.0..1.0))).collect())
                .collect()
        })
        .collect();
    if let Some(target) = res.budgets.z {
        let e = expected_second(&res.coefficients, &x, &z);
        z.iter_mut().flatten().flatten().for_each(|v| *v *= target / e);
    }
    (x, z)
}

#[test]
fn no_perturbation_improves_the_worst_cv() {
    let mut r = rng(303);
    let mut cases: Vec<AllocationResult> = Vec::new();
    for _ in 0..5 {
        let pop = random_single_stage(&mut r, 5, 4);
        let coeffs = derive_single_stage(&pop).unwrap();
        let b = single_stage_budget(&mut r, &coeffs);
        cases.push(allocate(&coeffs, SchemeId::SingleStageStratified, &b, &opts()).unwrap());
    }
    for seed in 0..5 {
        let frame = Population::TwoStage(random_frame(&mut r, 310 + seed));
        for scheme in [SchemeId::TwoStageSrswor, SchemeId::TwoStageHr] {
            let coeffs = scheme.derive(&frame).unwrap();
            let b = two_stage_budget(&mut r, &coeffs, scheme).unwrap();
            cases.push(allocate(&coeffs, scheme, &b, &opts()).unwrap());
        }
    }
    for res in &cases {
        for k in 0..150 {
            let eps = [1e-1, 1e-3, 1e-6][k % 3];
            let (x, z) = perturb(&mut r, res, eps);
            let t = evaluate_precision(&res.coefficients, &x, &z).unwrap();
            assert!(max_t(&t) >= res.lambda - 1e-9, "{}: {} < {}", res.scheme, max_t(&t), res.lambda);
        }
    }
}

#[test]
fn lambda_decreases_along_budget_ladders() {
    let mut r = rng(304);
    for _ in 0..20 {
        let pop = random_single_stage(&mut r, 6, 3);
        let coeffs = derive_single_stage(&pop).unwrap();
        let sup = single_stage_supremum(&coeffs);
        let mut prev = f64::INFINITY;
        for k in 1..=20 {
            let b = Budgets::single(sup * k as f64 / 21.0);
            let l = allocate(&coeffs, SchemeId::SingleStageStratified, &b, &opts()).unwrap().lambda;
            assert!(l < prev);
            prev = l;
        }
    }
    for seed in 0..10 {
        let frame = Population::TwoStage(random_frame(&mut r, 320 + seed));
        let coeffs = SchemeId::TwoStageSrswor.derive(&frame).unwrap();
        let b = two_stage_budget(&mut r, &coeffs, SchemeId::TwoStageSrswor).unwrap();
        let z = b.z.unwrap();
        let run = |x: f64, z: f64| {
            allocate(&coeffs, SchemeId::TwoStageSrswor, &Budgets::two_stage(x, z), &SolverOptions::forced())
                .unwrap()
                .lambda
        };
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let l = run(b.x * (0.3 + 0.07 * k as f64), z);
            assert!(l < prev);
            prev = l;
        }
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let l = run(b.x, z * (0.3 + 0.07 * k as f64));
            assert!(l < prev);
            prev = l;
        }
    }
}

#[test]
fn priorities_scale_the_achieved_precision() {
    let mut r = rng(305);
    let kappa = [1.0, 2.0, 4.0];
    for _ in 0..10 {
        let mut pop = random_single_stage(&mut r, 3, 4);
        while pop.subpopulations.len() < 3 {
            pop = random_single_stage(&mut r, 3, 4);
        }
        let coeffs = derive_single_stage(&pop).unwrap().with_priorities(&kappa).unwrap();
        let b = single_stage_budget(&mut r, &coeffs);
        let res = allocate(&coeffs, SchemeId::SingleStageStratified, &b, &opts()).unwrap();
        for (t, k) in res.per_subpop_t.iter().zip(kappa) {
            assert!(rel(*t, k * res.lambda) <= 1e-9);
        }
    }
    let frame = eqalloc::simulator::generate_frame(&Default::default(), 9).unwrap().population;
    let coeffs = derive_hr_kappa(&frame, &kappa);
    let b = two_stage_budget(&mut r, &coeffs, SchemeId::TwoStageHr).unwrap();
    let res = allocate(&coeffs, SchemeId::TwoStageHr, &b, &opts()).unwrap();
    for (t, k) in res.per_subpop_t.iter().zip(kappa) {
        assert!(rel(*t / k, res.lambda) <= 1e-9);
    }
}

fn derive_hr_kappa(frame: &eqalloc::TwoStagePopulation, kappa: &[f64]) -> DerivedCoefficients {
    eqalloc::derive_hr(frame, false).unwrap().with_priorities(kappa).unwrap()
}

#[test]
fn single_subpopulation_is_neyman() {
    let pop = SingleStagePopulation {
        subpopulations: vec![single(&[30, 70], &[2.0, 1.0], 1000.0)],
    };
    let coeffs = derive_single_stage(&pop).unwrap();
    let res = allocate(&coeffs, SchemeId::SingleStageStratified, &Budgets::single(10.0), &opts()).unwrap();
    assert!(rel(res.first_stage[0][0], 10.0 * 60.0 / 130.0) <= 1e-12);
    assert!(rel(res.first_stage[0][1], 10.0 * 70.0 / 130.0) <= 1e-12);

    let mut r = rng(306);
    for _ in 0..100 {
        let mut pop = random_single_stage(&mut r, 1, 8);
        let sp = &mut pop.subpopulations[0];
        let weights: Vec<f64> = sp.strata.iter().map(|s| s.size as f64 * s.sd).collect();
        let total: f64 = weights.iter().sum();
        let coeffs = derive_single_stage(&pop).unwrap();
        let n = 0.5 * single_stage_supremum(&coeffs);
        let res = allocate(&coeffs, SchemeId::SingleStageStratified, &Budgets::single(n), &opts()).unwrap();
        for (x, w) in res.first_stage[0].iter().zip(&weights) {
            assert!(rel(*x, n * w / total) <= 1e-12, "{x} vs {}", n * w / total);
        }
    }
}

fn oracle_problem(c: &DerivedCoefficients, b: &Budgets) -> OracleProblem {
    let mut cells = Vec::new();
    for (j, sp) in c.subpops.iter().enumerate() {
        for cell in &sp.cells {
            cells.push(OracleCell {
                group: j,
                a: cell.a,
                second: cell.second.iter().map(|s| (s.b, s.alpha)).collect(),
            });
        }
    }
    OracleProblem {
        groups: c.subpops.len(),
        c: c.subpops.iter().map(|s| s.c).collect(),
        cells,
        x: b.x,
        z: b.z,
    }
}

fn check_against_oracle(res: &AllocationResult) {
    let sol = minimax_allocation(&oracle_problem(&res.coefficients, &res.budgets));
    assert!(sol.value >= res.lambda - 1e-6, "oracle {} below λ {}", sol.value, res.lambda);
    let x: Vec<f64> = res.first_stage.iter().flatten().copied().collect();
    let z: Vec<&Vec<f64>> = res.second_stage.iter().flatten().collect();
    for (k, (xo, xe)) in sol.first.iter().zip(&x).enumerate() {
        assert!(rel(*xo, *xe) <= 1e-4, "cell {k}: oracle {xo} vs {xe}");
        for (zo, ze) in sol.second[k].iter().zip(z[k]) {
            assert!(rel(*zo, *ze) <= 1e-4, "cell {k}: oracle {zo} vs {ze}");
        }
    }
}

#[test]
fn brute_force_oracle_single_stage() {
    let mut r = rng(307);
    let mut done = 0;
    while done < 30 {
        let pop = random_single_stage(&mut r, 3, 3);
        let coeffs = derive_single_stage(&pop).unwrap();
        if coeffs.subpops.iter().map(|s| s.cells.len()).sum::<usize>() > 6 {
            continue;
        }
        let b = single_stage_budget(&mut r, &coeffs);
        check_against_oracle(&allocate(&coeffs, SchemeId::SingleStageStratified, &b, &opts()).unwrap());
        done += 1;
    }
}

#[test]
fn brute_force_oracle_two_stage() {
    let mut r = rng(308);
    let shapes: [(&[usize], usize); 4] = [(&[1, 1], 2), (&[1, 1], 1), (&[1, 1, 1], 1), (&[2, 1], 1)];
    let mut done = 0;
    for trial in 0..200 {
        let (cells, second) = shapes[trial % shapes.len()];
        let coeffs = random_two_stage_coeffs(&mut r, cells, second, 20);
        let Some(b) = two_stage_budget(&mut r, &coeffs, SchemeId::TwoStageSrswor) else {
            continue;
        };
        check_against_oracle(&allocate(&coeffs, SchemeId::TwoStageSrswor, &b, &opts()).unwrap());
        done += 1;
        if done == 20 {
            break;
        }
    }
    assert_eq!(done, 20);
}

#[test]
fn equal_precision_for_every_scheme() {
    let mut r = rng(309);
    for scheme in SchemeId::ALL {
        let mut done = 0;
        let mut seed = 0;
        while done < 20 {
            seed += 1;
            let res = if scheme.is_two_stage() {
                let frame = Population::TwoStage(random_frame(&mut r, 1000 * seed));
                let Ok(coeffs) = scheme.derive(&frame) else {
                    continue;
                };
                let Some(b) = two_stage_budget(&mut r, &coeffs, scheme) else {
                    continue;
                };
                allocate(&coeffs, scheme, &b, &opts()).unwrap()
            } else {
                let h = if scheme == SchemeId::SingleStageSrswor { 1 } else { 5 };
                let pop = random_single_stage(&mut r, 8, h);
                let coeffs = derive_single_stage(&pop).unwrap();
                let b = single_stage_budget(&mut r, &coeffs);
                allocate(&coeffs, scheme, &b, &opts()).unwrap()
            };
            assert_equal_precision(&res, scheme.name());
            done += 1;
        }
    }
}

#[test]
fn rounding_degradation_with_large_cells() {
    let mut r = rng(310);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < 40 {
        attempts += 1;
        assert!(attempts < 10_000, "too few instances with large cells");
        let res = if done % 2 == 0 {
            let mut pop = random_single_stage(&mut r, 5, 4);
            for sp in &mut pop.subpopulations {
                sp.strata.iter_mut().for_each(|s| s.size *= 20);
            }
            let coeffs = derive_single_stage(&pop).unwrap();
            let b = Budgets::single(r.random_range(0.2..0.9) * single_stage_supremum(&coeffs));
            allocate(&coeffs, SchemeId::SingleStageStratified, &b, &opts()).unwrap()
        } else {
            let mut coeffs = random_two_stage_coeffs(&mut r, &[2, 3, 2], 4, 400);
            for s in coeffs.subpops.iter_mut().flat_map(|s| &mut s.cells).flat_map(|c| &mut c.second) {
                s.capacity = 1 << 32;
            }
            let b = Budgets::two_stage(r.random_range(200.0..600.0), r.random_range(2e4..6e4));
            match allocate(&coeffs, SchemeId::TwoStageSrswor, &b, &opts()) {
                Ok(res) => res,
                Err(_) => continue,
            }
        };
        let large = res.first_stage.iter().flatten().all(|x| *x >= 20.0)
            && res.second_stage.iter().flatten().flatten().all(|z| *z >= 20.0);
        if !large {
            continue;
        }
        let res = res.with_rounding(&RoundingOptions::default()).unwrap();
        let rounded = res.rounded.as_ref().unwrap();
        if rounded.capped {
            continue;
        }
        for t in &rounded.per_subpop_t {
            let d = rel(*t, res.lambda);
            worst = worst.max(d);
            assert!(d <= 0.05, "{}: rounded T {t} vs λ {}", res.scheme, res.lambda);
        }
        assert!(rounded.max_degradation <= 0.05);
        done += 1;
    }
    eprintln!("largest rounding degradation: {worst:.3e}");
}
