//! One function per subcommand. Each returns the rendered report; nothing
//! here prints.

use std::path::Path;

use eqalloc::allocation::{perturbation_vectors, proportional_allocation};
use eqalloc::eigen::{spectrum, SolveMethod};
use eqalloc::population::{write_population, FrameFormat, LoadOptions};
use eqalloc::simulator::{
    generate_frame, simulate as run_simulation, single_stage_design, ExperimentConfig,
    SampleDesign, SsuRounding,
};
use eqalloc::{
    allocate as solve, build_matrix, load_population, AllocationResult, Budgets,
    DerivedCoefficients, Population, RoundingOptions, SchemeId, SimulationReport as RawReport,
    SolverOptions,
};

use crate::config::{Baseline, ReportFormat, RunConfig};
use crate::report::{
    AllocationReport, Arm, ArmSubpop, CheckReport, Header, Render, Residuals, RoundingSummary,
    SecondStageRow, SimulationReport, StratumRow, SubpopRow,
};
use crate::{CliError, Output, EXIT_CONDITION};

fn load_frame(cfg: &RunConfig) -> Result<Population, CliError> {
    let path = cfg
        .frame
        .as_deref()
        .ok_or_else(|| CliError::Usage("no frame given (use --frame or `frame` in the config)".into()))?;
    Ok(load_population(path, None, &LoadOptions::default())?)
}

fn budgets(cfg: &RunConfig, scheme: SchemeId) -> Result<Option<Budgets>, CliError> {
    match (scheme.is_two_stage(), cfg.m, cfg.n) {
        (_, None, None) => Ok(None),
        (true, Some(m), Some(n)) => Ok(Some(Budgets::two_stage(m, n))),
        (true, _, _) => Err(CliError::Usage(format!("{scheme} needs both --m and --n"))),
        (false, None, Some(n)) => Ok(Some(Budgets::single(n))),
        (false, Some(_), _) => Err(CliError::Usage(format!(
            "{scheme} is single-stage: give the unit budget with --n only"
        ))),
    }
}

fn required_budgets(cfg: &RunConfig, scheme: SchemeId) -> Result<Budgets, CliError> {
    budgets(cfg, scheme)?.ok_or_else(|| {
        let need = if scheme.is_two_stage() { "--m and --n" } else { "--n" };
        CliError::Usage(format!("{scheme} needs budgets: {need}"))
    })
}

/// Scheme, coefficients with priorities folded in, and the weights used.
fn coefficients(cfg: &RunConfig, pop: &Population) -> Result<(SchemeId, DerivedCoefficients, Vec<f64>), CliError> {
    let scheme = cfg.scheme_for(matches!(pop, Population::TwoStage(_)));
    let coeffs = scheme.derive(pop)?;
    let kappa = cfg.kappa.clone().unwrap_or_else(|| vec![1.0; coeffs.subpop_count()]);
    let coeffs = coeffs.with_priorities(&kappa)?;
    Ok((scheme, coeffs, kappa))
}

fn header(cfg: &RunConfig, scheme: SchemeId, kappa: Vec<f64>) -> Header {
    Header {
        scheme: scheme.name().to_string(),
        frame: cfg.frame.as_deref().map(|p| p.display().to_string()),
        m: if scheme.is_two_stage() { cfg.m } else { None },
        n: cfg.n,
        kappa,
    }
}

fn finish(cfg: &RunConfig, text: String, diagnostics: Vec<String>, code: u8) -> Output {
    Output {
        text,
        out: cfg.out.clone(),
        diagnostics,
        code,
    }
}

pub fn check(cfg: &RunConfig) -> Result<Output, CliError> {
    let pop = load_frame(cfg)?;
    let (scheme, coeffs, kappa) = coefficients(cfg, &pop)?;
    let mut report = CheckReport {
        header: header(cfg, scheme, kappa),
        kind: pop.kind().to_string(),
        subpopulations: coeffs.subpop_count(),
        first_stage_cells: coeffs.subpops.iter().map(|s| s.cells.len()).sum(),
        condition_margin: None,
        condition_satisfied: None,
        spectrum: None,
    };
    let mut code = 0;
    if let Some(b) = budgets(cfg, scheme)? {
        let pv = perturbation_vectors(&coeffs, scheme, &b)?;
        let margin = pv.condition_margin();
        report.condition_margin = Some(margin);
        report.condition_satisfied = Some(margin > 0.0);
        if cfg.force {
            let mut values = spectrum(&build_matrix(&pv))?;
            values.reverse();
            let positive = values.iter().filter(|x| **x > 0.0).count();
            if positive != 1 {
                code = EXIT_CONDITION;
            }
            report.spectrum = Some(values);
        } else if margin <= 0.0 {
            code = EXIT_CONDITION;
        }
    }
    Ok(finish(cfg, report.render(cfg.format), Vec::new(), code))
}

fn method_name(m: Option<SolveMethod>) -> String {
    match m {
        Some(SolveMethod::ClosedForm) => "closed-form".into(),
        Some(SolveMethod::PowerIteration { iterations }) => {
            format!("power-iteration ({iterations} iterations)")
        }
        Some(SolveMethod::Jacobi) => "jacobi".into(),
        None => "baseline".into(),
    }
}

/// The optimal allocation for the configured frame, scheme and budgets.
pub fn optimal_allocation(cfg: &RunConfig, pop: &Population) -> Result<(AllocationResult, Vec<f64>), CliError> {
    let (scheme, coeffs, kappa) = coefficients(cfg, pop)?;
    let b = required_budgets(cfg, scheme)?;
    let options = SolverOptions {
        force: cfg.force,
        ..SolverOptions::default()
    };
    Ok((solve(&coeffs, scheme, &b, &options)?, kappa))
}

fn allocation_report(cfg: &RunConfig, res: &AllocationResult, kappa: Vec<f64>) -> AllocationReport {
    let coeffs = &res.coefficients;
    let rounded = res.rounded.as_ref();
    let subpops = coeffs
        .subpops
        .iter()
        .enumerate()
        .map(|(j, sp)| SubpopRow {
            subpop: j,
            kappa: sp.kappa,
            t: res.per_subpop_t[j],
            cv: res.per_subpop_t[j].sqrt(),
            t_rounded: rounded.map(|r| r.per_subpop_t[j]),
            cv_rounded: rounded.map(|r| r.per_subpop_t[j].sqrt()),
        })
        .collect();
    let two_stage = res.scheme.is_two_stage();
    let mut strata = Vec::new();
    let mut second_stage = Vec::new();
    for (j, sp) in coeffs.subpops.iter().enumerate() {
        for (h, cell) in sp.cells.iter().enumerate() {
            let x = res.first_stage[j][h];
            let expected: f64 = cell
                .second
                .iter()
                .zip(&res.second_stage[j][h])
                .map(|(s, z)| s.alpha * x * z)
                .sum();
            strata.push(StratumRow {
                subpop: j,
                stratum: h,
                capacity: cell.capacity,
                size: x,
                size_rounded: rounded.map(|r| r.first_stage[j][h]),
                ssu: two_stage.then_some(expected),
                ssu_rounded: rounded.filter(|_| two_stage).map(|r| r.expected_second_stage[j][h]),
            });
            for (k, s) in cell.second.iter().enumerate() {
                second_stage.push(SecondStageRow {
                    subpop: j,
                    stratum: h,
                    cell: s.key.to_string(),
                    capacity: s.capacity,
                    size: res.second_stage[j][h][k],
                    size_rounded: rounded.map(|r| r.second_stage[j][h][k]),
                });
            }
        }
    }
    let b = res.budgets;
    let residuals = Residuals {
        first_stage: res.first_stage_total() - b.x,
        second_stage: b.z.map(|z| res.expected_second_stage_total() - z),
        first_stage_rounded: rounded.map(|r| r.first_stage_total() as f64 - b.x.round()),
        second_stage_rounded: rounded
            .zip(b.z)
            .map(|(r, z)| r.expected_second_stage_total() - z),
    };
    AllocationReport {
        header: header(cfg, res.scheme, kappa),
        lambda: res.lambda,
        cv: res.lambda.sqrt(),
        condition_margin: res.condition_margin,
        method: method_name(res.method),
        rounding: rounded.map(|r| RoundingSummary {
            capped: r.capped,
            max_degradation: r.max_degradation,
        }),
        residuals,
        subpops,
        strata,
        second_stage,
    }
}

fn rounding_notes(res: &AllocationResult) -> Vec<String> {
    match &res.rounded {
        Some(r) if r.capped => vec![
            "some cells hit their capacity; the rounded allocation is not equal-precision optimal"
                .to_string(),
        ],
        _ => Vec::new(),
    }
}

pub fn allocate(cfg: &RunConfig) -> Result<Output, CliError> {
    let pop = load_frame(cfg)?;
    let (mut res, kappa) = optimal_allocation(cfg, &pop)?;
    if cfg.round {
        res = res.with_rounding(&RoundingOptions::default())?;
    }
    let notes = rounding_notes(&res);
    let report = allocation_report(cfg, &res, kappa);
    Ok(finish(cfg, report.render(cfg.format), notes, 0))
}

fn arm(name: &str, raw: RawReport) -> Arm {
    Arm {
        name: name.to_string(),
        psu_target: raw.psu_target,
        psu_mean: raw.psu_mean,
        psu_se: raw.psu_se,
        ssu_expected: raw.ssu_expected,
        ssu_mean: raw.ssu_mean,
        ssu_se: raw.ssu_se,
        subpops: raw
            .subpops
            .iter()
            .enumerate()
            .map(|(j, s)| ArmSubpop {
                subpop: j,
                total: s.total,
                cv_design: s.theoretical_cv,
                cv_mc: s.mc_cv,
                cv_mc_se: s.mc_cv_se,
                cv_boot: s.bootstrap_cv,
                cv_boot_se: s.bootstrap_cv_se,
                relative_bias: s.mean_estimate / s.total - 1.0,
            })
            .collect(),
        warnings: raw.warnings,
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<Output, CliError> {
    let pop = load_frame(cfg)?;
    if !pop.has_units() {
        return Err(eqalloc::simulator::SimulationError::MissingUnits.into());
    }
    let (res, kappa) = optimal_allocation(cfg, &pop)?;
    let rounding = RoundingOptions::default();
    let res = res.with_rounding(&rounding)?;
    let mut notes = rounding_notes(&res);
    if !cfg.round {
        notes.push("simulation always draws integer sample sizes; --no-round ignored".into());
    }
    let baseline = match cfg.baseline {
        Baseline::Proportional => {
            Some(proportional_allocation(&res.coefficients, res.scheme, &res.budgets)?.with_rounding(&rounding)?)
        }
        Baseline::None => None,
    };

    let (frame, designs) = match pop {
        Population::TwoStage(frame) => {
            let mut designs = vec![SampleDesign::from_allocation(&frame, &res, SsuRounding::Randomized)?];
            if let Some(b) = &baseline {
                designs.push(SampleDesign::from_allocation(&frame, b, SsuRounding::Randomized)?);
            }
            (frame, designs)
        }
        Population::SingleStage(ss) => {
            let (units, design) = single_stage_design(&ss, &res)?;
            let mut designs = vec![design];
            if let Some(b) = &baseline {
                designs.push(single_stage_design(&ss, b)?.1);
            }
            (units, designs)
        }
    };

    let config = ExperimentConfig {
        replicates: cfg.replicates,
        bootstrap: cfg.bootstrap,
        seed: cfg.seed,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} threads: {e}", cfg.threads)))?;
    let raws = pool.install(|| {
        designs
            .iter()
            .map(|d| run_simulation(&frame, d, &config))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let names = ["optimal", "proportional"];
    let arms: Vec<Arm> = raws.into_iter().zip(names).map(|(r, name)| arm(name, r)).collect();
    for a in &arms {
        notes.extend(a.warnings.iter().map(|w| format!("{}: {w}", a.name)));
    }
    let report = SimulationReport {
        header: header(cfg, res.scheme, kappa),
        lambda: res.lambda,
        cv: res.lambda.sqrt(),
        seed: cfg.seed,
        replicates: cfg.replicates,
        bootstrap: cfg.bootstrap,
        arms,
    };
    Ok(finish(cfg, report.render(cfg.format), notes, 0))
}

/// Frame format for `generate`: the output extension when it has a known
/// one, otherwise tree for `--format tree` and flat for `--format table`.
fn frame_format(out: Option<&Path>, format: ReportFormat) -> FrameFormat {
    out.and_then(FrameFormat::from_path).unwrap_or(match format {
        ReportFormat::Tree => FrameFormat::Tree,
        ReportFormat::Table => FrameFormat::Flat,
    })
}

pub fn generate(cfg: &RunConfig) -> Result<Output, CliError> {
    let synthetic = generate_frame(&cfg.generate.params(), cfg.seed)?;
    let units = synthetic.population.unit_count();
    let attempt = synthetic.attempt;
    let pop = Population::TwoStage(synthetic.population);
    let text = write_population(&pop, frame_format(cfg.out.as_deref(), cfg.format))?;
    let note = format!(
        "generated {units} units in {} subpopulations (seed {}, attempt {attempt})",
        pop.subpop_count(),
        cfg.seed
    );
    Ok(finish(cfg, text, vec![note], 0))
}
