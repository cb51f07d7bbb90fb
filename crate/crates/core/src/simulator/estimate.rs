//! Sample designs, sample draws, Horvitz-Thompson totals and the rescaled
//! bootstrap.

use rand::Rng;

use super::draw::{draw_hartley_rao, draw_srswor};
use super::SimulationError;
use crate::allocation::{AllocationResult, SchemeId};
use crate::numeric::NeumaierSum;
use crate::population::{
    Psu, PsuStratum, SecondStageKey, SingleStagePopulation, SsuStratum, TwoStagePopulation,
    TwoStageSubpop,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstStage {
    Srswor,
    HartleyRao,
}

/// How per-PSU second-stage sizes are turned into integers at draw time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SsuRounding {
    /// Use the rounded allocation as is.
    Deterministic,
    /// Draw `⌊z⌋` or `⌈z⌉` with the probabilities that make the expectation
    /// `z`, where `z` is the real per-PSU size rescaled to the integer
    /// first-stage size. The expected second-stage total then equals the
    /// real-valued budget. Fixed-SSU cells stay deterministic.
    #[default]
    Randomized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumDesign {
    pub first: FirstStage,
    pub m: usize,
    /// Per-PSU sample size targets, `[psu][ssu_stratum]`. Integers unless
    /// the design is randomized.
    pub ssu: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleDesign {
    /// `[j][h]`.
    pub strata: Vec<Vec<StratumDesign>>,
    pub randomized: bool,
    /// Squared CV per subpopulation the design is expected to achieve.
    pub expected_t: Vec<f64>,
}

impl SampleDesign {
    /// Builds a design for a two-stage frame (or the unit view of a
    /// single-stage frame, see [`unit_frame`]) from a rounded allocation.
    pub fn from_allocation(
        frame: &TwoStagePopulation,
        result: &AllocationResult,
        rounding: SsuRounding,
    ) -> Result<Self, SimulationError> {
        let rounded = result.rounded.as_ref().ok_or_else(|| {
            SimulationError::Design("the allocation has not been rounded".into())
        })?;
        let coeffs = &result.coefficients;
        if coeffs.subpops.len() != frame.subpopulations.len() {
            return Err(SimulationError::Design("frame and allocation disagree on J".into()));
        }
        let first = if result.scheme.is_hartley_rao() {
            FirstStage::HartleyRao
        } else {
            FirstStage::Srswor
        };
        let randomized = rounding == SsuRounding::Randomized && result.scheme.is_two_stage();
        let mut strata = Vec::with_capacity(coeffs.subpops.len());
        for (j, (sp, fsp)) in coeffs.subpops.iter().zip(&frame.subpopulations).enumerate() {
            if sp.cells.len() != fsp.psu_strata.len() {
                return Err(SimulationError::Design(format!(
                    "subpop[{j}]: frame and allocation disagree on the number of strata"
                )));
            }
            let mut row = Vec::with_capacity(sp.cells.len());
            for (h, (cell, st)) in sp.cells.iter().zip(&fsp.psu_strata).enumerate() {
                let m = rounded.first_stage[j][h] as usize;
                if m == 0 {
                    return Err(SimulationError::Design(format!(
                        "subpop[{j}]/stratum[{h}] has no first-stage units"
                    )));
                }
                let mut ssu: Vec<Vec<f64>> = st
                    .psus
                    .iter()
                    .map(|p| vec![1.0; p.ssu_strata.len()])
                    .collect();
                if result.scheme.is_two_stage() {
                    let ints = &rounded.second_stage[j][h];
                    let scale = result.first_stage[j][h] / m as f64;
                    for (k, s) in cell.second.iter().enumerate() {
                        match s.key {
                            SecondStageKey::Stratum => {
                                for (row, p) in ssu.iter_mut().zip(&st.psus) {
                                    row[0] = (ints[k] as f64).clamp(1.0, p.ssu_strata[0].size as f64);
                                }
                            }
                            SecondStageKey::Cell { psu, ssu_stratum } => {
                                let cap = st.psus[psu].ssu_strata[ssu_stratum].size as f64;
                                let value = if randomized {
                                    result.second_stage[j][h][k] * scale
                                } else {
                                    ints[k] as f64
                                };
                                ssu[psu][ssu_stratum] = value.clamp(1.0, cap);
                            }
                        }
                    }
                }
                row.push(StratumDesign { first, m, ssu });
            }
            strata.push(row);
        }
        Ok(SampleDesign {
            strata,
            randomized,
            expected_t: rounded.per_subpop_t.clone(),
        })
    }

    /// `Σ m_jh`.
    pub fn psu_count(&self) -> usize {
        self.strata.iter().flatten().map(|s| s.m).sum()
    }

    /// Expected number of second-stage units drawn.
    pub fn expected_ssu_count(&self, frame: &TwoStagePopulation) -> f64 {
        let mut sum = NeumaierSum::default();
        for (sd, fsp) in self.strata.iter().zip(&frame.subpopulations) {
            for (d, st) in sd.iter().zip(&fsp.psu_strata) {
                let pis = inclusion_probabilities(d, st);
                for (pi, row) in pis.iter().zip(&d.ssu) {
                    for n in row {
                        sum.add(pi * n);
                    }
                }
            }
        }
        sum.value()
    }
}

fn inclusion_probabilities(d: &StratumDesign, st: &PsuStratum) -> Vec<f64> {
    let m = d.m as f64;
    match d.first {
        FirstStage::Srswor => vec![m / st.psu_count() as f64; st.psu_count()],
        FirstStage::HartleyRao => st.psus.iter().map(|p| m * p.z_tilde.unwrap_or(0.0)).collect(),
    }
}

/// A single-stage frame seen as a two-stage one whose PSUs are the units, so
/// SRSWOR of units is SRSWOR of PSUs with a census second stage.
pub fn unit_frame(pop: &SingleStagePopulation) -> Result<TwoStagePopulation, SimulationError> {
    let subpopulations = pop
        .subpopulations
        .iter()
        .map(|sp| {
            let psu_strata = sp
                .strata
                .iter()
                .map(|st| {
                    let units = st.units.as_ref().ok_or(SimulationError::MissingUnits)?;
                    let psus = units
                        .iter()
                        .map(|&y| Psu {
                            total: y,
                            z_tilde: None,
                            ssu_strata: vec![SsuStratum { size: 1, s2: 0.0, units: Some(vec![y]) }],
                        })
                        .collect();
                    Ok(PsuStratum::from_psus(psus))
                })
                .collect::<Result<_, SimulationError>>()?;
            Ok(TwoStageSubpop { psu_strata })
        })
        .collect::<Result<_, SimulationError>>()?;
    Ok(TwoStagePopulation { subpopulations })
}

/// The units drawn from one PSU, per SSU stratum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PsuDraw {
    pub psu: usize,
    pub ssu: Vec<Vec<usize>>,
}

/// `[j][h]` → drawn PSUs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub strata: Vec<Vec<Vec<PsuDraw>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledPsu {
    /// Inverse first-stage inclusion probability.
    pub weight: f64,
    /// Estimated PSU total, `Σ_g (N_g / n_g) Σ y`.
    pub estimate: f64,
    pub ssu_count: usize,
}

/// `[j][h]` → observed PSUs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub strata: Vec<Vec<Vec<SampledPsu>>>,
}

impl Sample {
    pub fn psu_count(&self) -> usize {
        self.strata.iter().flatten().map(Vec::len).sum()
    }

    pub fn ssu_count(&self) -> usize {
        self.strata.iter().flatten().flatten().map(|p| p.ssu_count).sum()
    }
}

pub fn draw_selection<R: Rng + ?Sized>(
    frame: &TwoStagePopulation,
    design: &SampleDesign,
    rng: &mut R,
) -> Result<Selection, SimulationError> {
    let mut strata = Vec::with_capacity(design.strata.len());
    for (sd, fsp) in design.strata.iter().zip(&frame.subpopulations) {
        let mut row = Vec::with_capacity(sd.len());
        for (d, st) in sd.iter().zip(&fsp.psu_strata) {
            let psus = match d.first {
                FirstStage::Srswor => draw_srswor(st.psu_count(), d.m, rng)?,
                FirstStage::HartleyRao => {
                    let z: Option<Vec<f64>> = st.psus.iter().map(|p| p.z_tilde).collect();
                    let z = z.ok_or_else(|| {
                        SimulationError::SizeMeasure("PSU without a size measure".into())
                    })?;
                    draw_hartley_rao(&z, d.m, rng)?
                }
            };
            let mut draws = Vec::with_capacity(psus.len());
            for i in psus {
                let ssu = st.psus[i]
                    .ssu_strata
                    .iter()
                    .zip(&d.ssu[i])
                    .map(|(ss, &target)| {
                        let n = if design.randomized {
                            let base = target.floor();
                            let up = rng.random::<f64>() < target - base;
                            base as usize + usize::from(up)
                        } else {
                            target as usize
                        };
                        draw_srswor(ss.size as usize, n, rng)
                    })
                    .collect::<Result<_, _>>()?;
                draws.push(PsuDraw { psu: i, ssu });
            }
            row.push(draws);
        }
        strata.push(row);
    }
    Ok(Selection { strata })
}

/// Attaches weights and PSU-total estimates to a selection.
pub fn observe(
    frame: &TwoStagePopulation,
    design: &SampleDesign,
    selection: &Selection,
) -> Result<Sample, SimulationError> {
    let mut strata = Vec::with_capacity(selection.strata.len());
    for ((sel, sd), fsp) in selection.strata.iter().zip(&design.strata).zip(&frame.subpopulations) {
        let mut row = Vec::with_capacity(sel.len());
        for ((draws, d), st) in sel.iter().zip(sd).zip(&fsp.psu_strata) {
            let pis = inclusion_probabilities(d, st);
            let mut psus = Vec::with_capacity(draws.len());
            for draw in draws {
                let psu = &st.psus[draw.psu];
                let mut estimate = NeumaierSum::default();
                let mut count = 0;
                for (ss, idx) in psu.ssu_strata.iter().zip(&draw.ssu) {
                    let units = ss.units.as_ref().ok_or(SimulationError::MissingUnits)?;
                    if idx.is_empty() {
                        return Err(SimulationError::Design(
                            "an SSU stratum of a drawn PSU has no sampled units".into(),
                        ));
                    }
                    let sum: f64 = idx.iter().map(|&k| units[k]).sum();
                    estimate.add(ss.size as f64 / idx.len() as f64 * sum);
                    count += idx.len();
                }
                psus.push(SampledPsu {
                    weight: 1.0 / pis[draw.psu],
                    estimate: estimate.value(),
                    ssu_count: count,
                });
            }
            row.push(psus);
        }
        strata.push(row);
    }
    Ok(Sample { strata })
}

/// Horvitz-Thompson estimate of every subpopulation total.
pub fn ht_total(sample: &Sample) -> Vec<f64> {
    sample
        .strata
        .iter()
        .map(|sp| {
            sp.iter()
                .flatten()
                .map(|p| p.weight * p.estimate)
                .collect::<NeumaierSum>()
                .value()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapEstimate {
    pub variance: Vec<f64>,
    /// `√variance / |estimate|` per subpopulation.
    pub cv: Vec<f64>,
    pub replicates: usize,
}

/// Rescaled bootstrap: in each stratum draw `n_h − 1` of the `n_h` sampled
/// PSUs with replacement and multiply the weight of PSU `k` by
/// `n_h / (n_h − 1)` times its draw count. The variance is the mean squared
/// deviation of the `b` replicate totals from the full-sample estimate.
pub fn bootstrap_cv<R: Rng + ?Sized>(
    sample: &Sample,
    b: usize,
    rng: &mut R,
) -> Result<BootstrapEstimate, SimulationError> {
    if b == 0 {
        return Err(SimulationError::InvalidParams("bootstrap needs B ≥ 1".into()));
    }
    for (j, sp) in sample.strata.iter().enumerate() {
        for (h, st) in sp.iter().enumerate() {
            if st.len() < 2 {
                return Err(SimulationError::SingletonStratum { subpop: j, stratum: h });
            }
        }
    }
    let full = ht_total(sample);
    let mut sq = vec![NeumaierSum::default(); full.len()];
    let mut counts = Vec::new();
    for _ in 0..b {
        for (j, sp) in sample.strata.iter().enumerate() {
            let mut total = NeumaierSum::default();
            for st in sp {
                let n = st.len();
                counts.clear();
                counts.resize(n, 0u32);
                for _ in 0..n - 1 {
                    counts[rng.random_range(0..n)] += 1;
                }
                let factor = n as f64 / (n - 1) as f64;
                for (p, &c) in st.iter().zip(&counts) {
                    if c > 0 {
                        total.add(p.weight * factor * c as f64 * p.estimate);
                    }
                }
            }
            let d = total.value() - full[j];
            sq[j].add(d * d);
        }
    }
    let variance: Vec<f64> = sq.iter().map(|s| s.value() / b as f64).collect();
    let cv = variance
        .iter()
        .zip(&full)
        .map(|(v, t)| v.sqrt() / t.abs())
        .collect();
    Ok(BootstrapEstimate { variance, cv, replicates: b })
}

/// SRSWOR-based design for the allocation's scheme: a convenience for
/// single-stage frames that carry units.
pub fn single_stage_design(
    frame: &SingleStagePopulation,
    result: &AllocationResult,
) -> Result<(TwoStagePopulation, SampleDesign), SimulationError> {
    if result.scheme.is_two_stage() {
        return Err(SimulationError::Design(format!(
            "{} is not a single-stage scheme",
            result.scheme
        )));
    }
    debug_assert!(matches!(
        result.scheme,
        SchemeId::SingleStageStratified | SchemeId::SingleStageSrswor | SchemeId::SingleStageNeymanWithin
    ));
    let units = unit_frame(frame)?;
    let design = SampleDesign::from_allocation(&units, result, SsuRounding::Deterministic)?;
    Ok((units, design))
}
