//! Population frames and the variance coefficients derived from them.
//!
//! A frame is either single-stage (subpopulation → stratum → units) or
//! two-stage (subpopulation → PSU stratum → PSU → SSU stratum → units).
//! Frames carry summary statistics (sizes, variances, totals) and may also
//! carry the raw unit values they were computed from; the simulator needs the
//! latter.

mod derive;
mod io;

pub use derive::{
    derive_hr, derive_single_stage, derive_two_stage_fixed_ssu, derive_two_stage_srswor,
    CellCoefficients, CoefficientFamily, DerivedCoefficients, GammaCell, SecondStageCell,
    SecondStageKey, SubpopCoefficients,
};
pub use io::{
    load_population, parse_population, save_population, write_population, FrameFormat, LoadOptions,
    SCHEMA_VERSION,
};

use std::fmt;

use thiserror::Error;

use crate::numeric::rel_diff;

/// Tolerance for `Σ z̃ = 1` within a PSU stratum.
pub const Z_SUM_TOLERANCE: f64 = 1e-10;
/// Relative tolerance when a stored summary is checked against raw data.
pub const RECOMPUTE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn join_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum PopulationError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    UnsupportedSchema { found: u32 },
    #[error("invalid frame: {}", join_issues(.0))]
    Validation(Vec<Issue>),
    #[error("subpopulation {subpop} has a zero total")]
    ZeroTotal { subpop: usize },
    #[error("nonpositive gamma in {} cell(s): {}", cells.len(), cells.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))]
    NonpositiveGamma { cells: Vec<GammaCell> },
    #[error("subpop[{subpop}]/psu_stratum[{stratum}]/psu[{psu}] has {count} SSU strata; the fixed-SSU schemes need exactly one")]
    MultipleSsuStrata {
        subpop: usize,
        stratum: usize,
        psu: usize,
        count: usize,
    },
    #[error("subpop[{subpop}]/psu_stratum[{stratum}] has no size measure")]
    MissingSizeMeasure { subpop: usize, stratum: usize },
    #[error("expected a {expected} frame, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
    #[error("invalid priority weights: {0}")]
    InvalidPriority(String),
}

// ---------------------------------------------------------------------------
// Single-stage frames
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SingleStratum {
    /// `N_{j,h}`.
    pub size: u64,
    /// Population standard deviation `S_{j,h}` (divisor `N − 1`).
    pub sd: f64,
    pub units: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleSubpop {
    /// `t_j`.
    pub total: f64,
    pub strata: Vec<SingleStratum>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleStagePopulation {
    pub subpopulations: Vec<SingleSubpop>,
}

impl SingleStratum {
    pub fn from_units(units: Vec<f64>) -> Self {
        SingleStratum {
            size: units.len() as u64,
            sd: unit_variance(&units).sqrt(),
            units: Some(units),
        }
    }
}

impl SingleSubpop {
    /// Sets the total from unit values when every stratum carries them.
    pub fn from_strata(strata: Vec<SingleStratum>) -> Option<Self> {
        let total = strata
            .iter()
            .map(|s| s.units.as_ref().map(|u| u.iter().sum::<f64>()))
            .sum::<Option<f64>>()?;
        Some(SingleSubpop { total, strata })
    }
}

impl SingleStagePopulation {
    pub fn validate(&self) -> Result<(), PopulationError> {
        let mut issues = Vec::new();
        if self.subpopulations.is_empty() {
            issues.push(issue("frame", "no subpopulations"));
        }
        for (j, sp) in self.subpopulations.iter().enumerate() {
            let path = format!("subpop[{j}]");
            if !(sp.total.is_finite() && sp.total > 0.0) {
                issues.push(issue(&path, format!("total {} must be positive", sp.total)));
            }
            if sp.strata.is_empty() {
                issues.push(issue(&path, "no strata"));
            }
            for (h, st) in sp.strata.iter().enumerate() {
                let path = format!("{path}/stratum[{h}]");
                check_unit_stratum(&path, st.size, st.sd * st.sd, st.sd, st.units.as_deref(), &mut issues);
            }
        }
        finish(issues)
    }

    pub fn has_units(&self) -> bool {
        self.subpopulations
            .iter()
            .all(|sp| sp.strata.iter().all(|st| st.units.is_some()))
    }
}

// ---------------------------------------------------------------------------
// Two-stage frames
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SsuStratum {
    /// `N_{j,h,i,g}`.
    pub size: u64,
    /// `S²_{j,h,i,g}` (divisor `N − 1`).
    pub s2: f64,
    pub units: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Psu {
    /// PSU total `t_i`.
    pub total: f64,
    /// Normalized size measure `z̃_{j,h,i}`; required by the Hartley-Rao schemes.
    pub z_tilde: Option<f64>,
    pub ssu_strata: Vec<SsuStratum>,
}

impl SsuStratum {
    pub fn from_units(units: Vec<f64>) -> Self {
        SsuStratum {
            size: units.len() as u64,
            s2: unit_variance(&units),
            units: Some(units),
        }
    }
}

impl Psu {
    /// Sets the PSU total from unit values when every SSU stratum carries them.
    pub fn from_ssu_strata(z_tilde: Option<f64>, ssu_strata: Vec<SsuStratum>) -> Option<Self> {
        let total = ssu_strata
            .iter()
            .map(|s| s.units.as_ref().map(|u| u.iter().sum::<f64>()))
            .sum::<Option<f64>>()?;
        Some(Psu { total, z_tilde, ssu_strata })
    }

    pub fn size(&self) -> u64 {
        self.ssu_strata.iter().map(|s| s.size).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsuStratum {
    /// Between-PSU variance `D²_{j,h} = Σ (t_i − t̄)² / (M − 1)`; zero when `M = 1`.
    pub d2: f64,
    pub psus: Vec<Psu>,
}

impl PsuStratum {
    /// Computes `D²` from the PSU totals.
    pub fn from_psus(psus: Vec<Psu>) -> Self {
        let totals: Vec<f64> = psus.iter().map(|p| p.total).collect();
        PsuStratum {
            d2: between_psu_variance(&totals),
            psus,
        }
    }

    /// `M_{j,h}`.
    pub fn psu_count(&self) -> usize {
        self.psus.len()
    }

    pub fn total(&self) -> f64 {
        self.psus.iter().map(|p| p.total).sum()
    }

    pub fn has_size_measure(&self) -> bool {
        self.psus.iter().all(|p| p.z_tilde.is_some())
    }

    /// `ω_i = z̃_i (t_i / z̃_i − Σ t)²`, or `None` without size measures.
    pub fn omega(&self) -> Option<Vec<f64>> {
        let total = self.total();
        self.psus
            .iter()
            .map(|p| {
                p.z_tilde.map(|z| {
                    let dev = p.total / z - total;
                    z * dev * dev
                })
            })
            .collect()
    }

    /// Hartley-Rao between-PSU term `Σ ω_i (1 + z̃_i)`.
    pub fn d2_hartley_rao(&self) -> Option<f64> {
        let omega = self.omega()?;
        Some(
            omega
                .iter()
                .zip(&self.psus)
                .map(|(w, p)| w * (1.0 + p.z_tilde.unwrap()))
                .sum(),
        )
    }
}

/// `Σ (t_i − t̄)² / (M − 1)`, zero for a single PSU.
pub fn between_psu_variance(totals: &[f64]) -> f64 {
    let m = totals.len();
    if m < 2 {
        return 0.0;
    }
    let mean = totals.iter().sum::<f64>() / m as f64;
    totals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (m - 1) as f64
}

/// `S²` with divisor `N − 1`; zero for fewer than two values.
pub fn unit_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageSubpop {
    pub psu_strata: Vec<PsuStratum>,
}

impl TwoStageSubpop {
    /// `T_j = Σ t_i` over every PSU of the subpopulation.
    pub fn total(&self) -> f64 {
        self.psu_strata.iter().map(PsuStratum::total).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStagePopulation {
    pub subpopulations: Vec<TwoStageSubpop>,
}

impl TwoStagePopulation {
    pub fn validate(&self) -> Result<(), PopulationError> {
        let mut issues = Vec::new();
        if self.subpopulations.is_empty() {
            issues.push(issue("frame", "no subpopulations"));
        }
        for (j, sp) in self.subpopulations.iter().enumerate() {
            let sp_path = format!("subpop[{j}]");
            if sp.psu_strata.is_empty() {
                issues.push(issue(&sp_path, "no PSU strata"));
            }
            for (h, st) in sp.psu_strata.iter().enumerate() {
                let st_path = format!("{sp_path}/psu_stratum[{h}]");
                if st.psus.is_empty() {
                    issues.push(issue(&st_path, "no PSUs"));
                    continue;
                }
                let totals: Vec<f64> = st.psus.iter().map(|p| p.total).collect();
                let recomputed = between_psu_variance(&totals);
                if !(st.d2.is_finite() && st.d2 >= 0.0) {
                    issues.push(issue(&st_path, format!("d2 {} must be nonnegative", st.d2)));
                } else if rel_diff(st.d2, recomputed) > RECOMPUTE_TOLERANCE
                    && (st.d2 - recomputed).abs() > f64::EPSILON * recomputed.abs().max(1.0)
                {
                    issues.push(issue(
                        &st_path,
                        format!("d2 {} disagrees with PSU totals ({recomputed})", st.d2),
                    ));
                }
                let with_z = st.psus.iter().filter(|p| p.z_tilde.is_some()).count();
                if with_z != 0 && with_z != st.psus.len() {
                    issues.push(issue(&st_path, "size measure given for some PSUs but not all"));
                } else if with_z == st.psus.len() {
                    let sum: f64 = st.psus.iter().map(|p| p.z_tilde.unwrap()).sum();
                    if (sum - 1.0).abs() > Z_SUM_TOLERANCE {
                        issues.push(issue(&st_path, format!("size measures sum to {sum}, not 1")));
                    }
                }
                for (i, psu) in st.psus.iter().enumerate() {
                    let psu_path = format!("{st_path}/psu[{i}]");
                    if !psu.total.is_finite() {
                        issues.push(issue(&psu_path, "total is not finite"));
                    }
                    if let Some(z) = psu.z_tilde {
                        if !(z > 0.0 && z <= 1.0) {
                            issues.push(issue(&psu_path, format!("z_tilde {z} outside (0, 1]")));
                        }
                    }
                    if psu.ssu_strata.is_empty() {
                        issues.push(issue(&psu_path, "no SSU strata"));
                    }
                    for (g, ss) in psu.ssu_strata.iter().enumerate() {
                        let path = format!("{psu_path}/ssu_stratum[{g}]");
                        check_unit_stratum(&path, ss.size, ss.s2, ss.s2.sqrt(), ss.units.as_deref(), &mut issues);
                    }
                    if let Some(sum) = psu
                        .ssu_strata
                        .iter()
                        .map(|s| s.units.as_ref().map(|u| u.iter().sum::<f64>()))
                        .sum::<Option<f64>>()
                    {
                        if rel_diff(psu.total, sum) > RECOMPUTE_TOLERANCE
                            && (psu.total - sum).abs() > 1e-12
                        {
                            issues.push(issue(
                                &psu_path,
                                format!("total {} disagrees with unit values ({sum})", psu.total),
                            ));
                        }
                    }
                }
            }
        }
        finish(issues)
    }

    pub fn has_units(&self) -> bool {
        self.subpopulations.iter().all(|sp| {
            sp.psu_strata.iter().all(|st| {
                st.psus
                    .iter()
                    .all(|p| p.ssu_strata.iter().all(|s| s.units.is_some()))
            })
        })
    }

    pub fn has_size_measures(&self) -> bool {
        self.subpopulations
            .iter()
            .all(|sp| sp.psu_strata.iter().all(PsuStratum::has_size_measure))
    }

    pub fn unit_count(&self) -> u64 {
        self.subpopulations
            .iter()
            .flat_map(|sp| &sp.psu_strata)
            .flat_map(|st| &st.psus)
            .map(Psu::size)
            .sum()
    }

    /// Collapses every PSU stratum into a single-stage stratum with the union
    /// of its units. Requires unit-level data.
    pub fn to_single_stage(&self) -> Option<SingleStagePopulation> {
        let subpopulations = self
            .subpopulations
            .iter()
            .map(|sp| {
                let strata = sp
                    .psu_strata
                    .iter()
                    .map(|st| {
                        let mut units = Vec::new();
                        for psu in &st.psus {
                            for ss in &psu.ssu_strata {
                                units.extend_from_slice(ss.units.as_ref()?);
                            }
                        }
                        Some(SingleStratum {
                            size: units.len() as u64,
                            sd: unit_variance(&units).sqrt(),
                            units: Some(units),
                        })
                    })
                    .collect::<Option<Vec<_>>>()?;
                Some(SingleSubpop {
                    total: sp.total(),
                    strata,
                })
            })
            .collect::<Option<Vec<_>>>()?;
        Some(SingleStagePopulation { subpopulations })
    }
}

fn check_unit_stratum(
    path: &str,
    size: u64,
    s2: f64,
    sd: f64,
    units: Option<&[f64]>,
    issues: &mut Vec<Issue>,
) {
    if size == 0 {
        issues.push(issue(path, "size must be at least 1"));
    }
    if !(sd.is_finite() && sd >= 0.0) {
        issues.push(issue(path, format!("variance {s2} must be nonnegative")));
    } else if size == 1 && s2 > 0.0 {
        issues.push(issue(path, "a single-unit stratum must have zero variance"));
    }
    if let Some(units) = units {
        if units.len() as u64 != size {
            issues.push(issue(
                path,
                format!("size {size} but {} unit values", units.len()),
            ));
        }
        if units.iter().any(|y| !y.is_finite()) {
            issues.push(issue(path, "non-finite unit value"));
        }
    }
}

fn issue(path: &str, message: impl Into<String>) -> Issue {
    Issue {
        path: path.to_string(),
        message: message.into(),
    }
}

fn finish(issues: Vec<Issue>) -> Result<(), PopulationError> {
    if issues.is_empty() {
        Ok(())
    } else {
        Err(PopulationError::Validation(issues))
    }
}

/// Either kind of frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Population {
    SingleStage(SingleStagePopulation),
    TwoStage(TwoStagePopulation),
}

impl Population {
    pub fn kind(&self) -> &'static str {
        match self {
            Population::SingleStage(_) => "single-stage",
            Population::TwoStage(_) => "two-stage",
        }
    }

    pub fn subpop_count(&self) -> usize {
        match self {
            Population::SingleStage(p) => p.subpopulations.len(),
            Population::TwoStage(p) => p.subpopulations.len(),
        }
    }

    pub fn validate(&self) -> Result<(), PopulationError> {
        match self {
            Population::SingleStage(p) => p.validate(),
            Population::TwoStage(p) => p.validate(),
        }
    }

    pub fn has_units(&self) -> bool {
        match self {
            Population::SingleStage(p) => p.has_units(),
            Population::TwoStage(p) => p.has_units(),
        }
    }

    pub fn subpop_totals(&self) -> Vec<f64> {
        match self {
            Population::SingleStage(p) => p.subpopulations.iter().map(|s| s.total).collect(),
            Population::TwoStage(p) => p.subpopulations.iter().map(TwoStageSubpop::total).collect(),
        }
    }

    pub fn into_single_stage(self) -> Result<SingleStagePopulation, PopulationError> {
        match self {
            Population::SingleStage(p) => Ok(p),
            other => Err(PopulationError::WrongKind {
                expected: "single-stage",
                found: other.kind(),
            }),
        }
    }

    pub fn into_two_stage(self) -> Result<TwoStagePopulation, PopulationError> {
        match self {
            Population::TwoStage(p) => Ok(p),
            other => Err(PopulationError::WrongKind {
                expected: "two-stage",
                found: other.kind(),
            }),
        }
    }
}

/// Multiplies every study-variable quantity of subpopulation `j` by `s`
/// (`y → s y`, `t → s t`, `S² → s² S²`, `D² → s² D²`). Size measures are
/// untouched.
pub fn scale_y(pop: &Population, j: usize, s: f64) -> Population {
    let mut out = pop.clone();
    match &mut out {
        Population::SingleStage(p) => {
            let sp = &mut p.subpopulations[j];
            sp.total *= s;
            for st in &mut sp.strata {
                st.sd *= s.abs();
                if let Some(u) = &mut st.units {
                    u.iter_mut().for_each(|y| *y *= s);
                }
            }
        }
        Population::TwoStage(p) => {
            for st in &mut p.subpopulations[j].psu_strata {
                st.d2 *= s * s;
                for psu in &mut st.psus {
                    psu.total *= s;
                    for ss in &mut psu.ssu_strata {
                        ss.s2 *= s * s;
                        if let Some(u) = &mut ss.units {
                            u.iter_mut().for_each(|y| *y *= s);
                        }
                    }
                }
            }
        }
    }
    out
}
