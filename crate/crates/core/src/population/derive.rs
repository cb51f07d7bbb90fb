//! Variance coefficients `(A, B, α, c)` for each sampling scheme.
//!
//! Every scheme's squared CV for subpopulation `j` has the form
//!
//! ```text
//! T_j = Σ_h (1/x_jh) (A_jh + Σ_i B_jhi / z_jhi) − c_j
//! ```
//!
//! with a first-stage size `x_jh` per cell and second-stage sizes `z_jhi`
//! weighted by `α_jhi` in the expected-size budget. Single-stage designs have
//! no second stage.

use std::fmt;

use super::{PopulationError, SingleStagePopulation, TwoStagePopulation};

/// Which derivation produced a coefficient set; fixes the keying of the
/// second stage and which allocation schemes may consume it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientFamily {
    SingleStage,
    TwoStageSrswor,
    TwoStageFixedSsu,
    TwoStageHr,
    TwoStageHrFixedSsu,
}

impl CoefficientFamily {
    pub fn is_two_stage(self) -> bool {
        !matches!(self, CoefficientFamily::SingleStage)
    }

    pub fn is_fixed_ssu(self) -> bool {
        matches!(
            self,
            CoefficientFamily::TwoStageFixedSsu | CoefficientFamily::TwoStageHrFixedSsu
        )
    }
}

/// Identifies a second-stage cell within its first-stage cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SecondStageKey {
    /// One per-PSU sample size shared by the whole PSU stratum.
    Stratum,
    /// SSU stratum `g` of PSU `i`.
    Cell { psu: usize, ssu_stratum: usize },
}

impl fmt::Display for SecondStageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecondStageKey::Stratum => write!(f, "*"),
            SecondStageKey::Cell { psu, ssu_stratum } => write!(f, "{psu}:{ssu_stratum}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondStageCell {
    pub key: SecondStageKey,
    pub b: f64,
    pub alpha: f64,
    /// Largest admissible per-PSU sample size (`N_jhig`, or the smallest PSU
    /// for fixed-SSU schemes).
    pub capacity: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellCoefficients {
    pub a: f64,
    /// `N_jh` for single-stage strata, `M_jh` for PSU strata.
    pub capacity: u64,
    pub second: Vec<SecondStageCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubpopCoefficients {
    pub c: f64,
    /// Priority weight already folded into `A`, `B` and `c`.
    pub kappa: f64,
    pub cells: Vec<CellCoefficients>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivedCoefficients {
    pub family: CoefficientFamily,
    pub subpops: Vec<SubpopCoefficients>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaCell {
    pub subpop: usize,
    pub stratum: usize,
    pub gamma: f64,
}

impl fmt::Display for GammaCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "subpop[{}]/psu_stratum[{}] gamma={:e}",
            self.subpop, self.stratum, self.gamma
        )
    }
}

impl DerivedCoefficients {
    pub fn subpop_count(&self) -> usize {
        self.subpops.len()
    }

    pub fn kappa(&self) -> Vec<f64> {
        self.subpops.iter().map(|s| s.kappa).collect()
    }

    /// Folds priority weights in: subpopulation `j` gets target `κ_j T`,
    /// which divides its `A`, `B` and `c` by `κ_j`. Weights compose with any
    /// already applied.
    pub fn with_priorities(mut self, kappa: &[f64]) -> Result<Self, PopulationError> {
        if kappa.len() != self.subpops.len() {
            return Err(PopulationError::InvalidPriority(format!(
                "{} weights for {} subpopulations",
                kappa.len(),
                self.subpops.len()
            )));
        }
        if let Some(k) = kappa.iter().find(|k| !(k.is_finite() && **k > 0.0)) {
            return Err(PopulationError::InvalidPriority(format!(
                "weight {k} is not strictly positive"
            )));
        }
        for (sp, &k) in self.subpops.iter_mut().zip(kappa) {
            sp.kappa *= k;
            sp.c /= k;
            for cell in &mut sp.cells {
                cell.a /= k;
                for s in &mut cell.second {
                    s.b /= k;
                }
            }
        }
        Ok(self)
    }
}

pub fn derive_single_stage(
    pop: &SingleStagePopulation,
) -> Result<DerivedCoefficients, PopulationError> {
    let mut subpops = Vec::with_capacity(pop.subpopulations.len());
    for (j, sp) in pop.subpopulations.iter().enumerate() {
        let t2 = nonzero_total(sp.total, j)?;
        let mut c = 0.0;
        let cells = sp
            .strata
            .iter()
            .map(|st| {
                let n = st.size as f64;
                let s2 = st.sd * st.sd;
                c += n * s2 / t2;
                CellCoefficients {
                    a: n * n * s2 / t2,
                    capacity: st.size,
                    second: Vec::new(),
                }
            })
            .collect();
        subpops.push(SubpopCoefficients { c, kappa: 1.0, cells });
    }
    Ok(DerivedCoefficients {
        family: CoefficientFamily::SingleStage,
        subpops,
    })
}

/// Stratified SRSWOR of PSUs, stratified SRSWOR of SSUs within each PSU.
pub fn derive_two_stage_srswor(
    pop: &TwoStagePopulation,
) -> Result<DerivedCoefficients, PopulationError> {
    let mut bad = Vec::new();
    let mut subpops = Vec::with_capacity(pop.subpopulations.len());
    for (j, sp) in pop.subpopulations.iter().enumerate() {
        let t2 = nonzero_total(sp.total(), j)?;
        let mut c = 0.0;
        let mut cells = Vec::with_capacity(sp.psu_strata.len());
        for (h, st) in sp.psu_strata.iter().enumerate() {
            let m = st.psu_count() as f64;
            let mut within = 0.0;
            let mut second = Vec::new();
            for (i, psu) in st.psus.iter().enumerate() {
                for (g, ss) in psu.ssu_strata.iter().enumerate() {
                    let n = ss.size as f64;
                    within += n * ss.s2;
                    second.push(SecondStageCell {
                        key: SecondStageKey::Cell { psu: i, ssu_stratum: g },
                        b: m * n * n * ss.s2 / t2,
                        alpha: 1.0 / m,
                        capacity: ss.size,
                    });
                }
            }
            let gamma = (m * st.d2 - within) / t2;
            if gamma <= 0.0 {
                bad.push(GammaCell { subpop: j, stratum: h, gamma });
            }
            c += m * st.d2 / t2;
            cells.push(CellCoefficients {
                a: m * gamma,
                capacity: st.psu_count() as u64,
                second,
            });
        }
        subpops.push(SubpopCoefficients { c, kappa: 1.0, cells });
    }
    if !bad.is_empty() {
        return Err(PopulationError::NonpositiveGamma { cells: bad });
    }
    Ok(DerivedCoefficients {
        family: CoefficientFamily::TwoStageSrswor,
        subpops,
    })
}

/// SRSWOR at both stages with one common SSU sample size per PSU stratum.
/// Each PSU must hold a single SSU stratum.
pub fn derive_two_stage_fixed_ssu(
    pop: &TwoStagePopulation,
) -> Result<DerivedCoefficients, PopulationError> {
    require_single_ssu_stratum(pop)?;
    let mut bad = Vec::new();
    let mut subpops = Vec::with_capacity(pop.subpopulations.len());
    for (j, sp) in pop.subpopulations.iter().enumerate() {
        let t2 = nonzero_total(sp.total(), j)?;
        let mut c = 0.0;
        let mut cells = Vec::with_capacity(sp.psu_strata.len());
        for (h, st) in sp.psu_strata.iter().enumerate() {
            let m = st.psu_count() as f64;
            let (within, beta_num) = st.psus.iter().fold((0.0, 0.0), |(w, b), psu| {
                let ss = &psu.ssu_strata[0];
                let n = ss.size as f64;
                (w + n * ss.s2, b + n * n * ss.s2)
            });
            let gamma = (m * st.d2 - within) / t2;
            if gamma <= 0.0 {
                bad.push(GammaCell { subpop: j, stratum: h, gamma });
            }
            c += m * st.d2 / t2;
            cells.push(CellCoefficients {
                a: m * gamma,
                capacity: st.psu_count() as u64,
                second: vec![SecondStageCell {
                    key: SecondStageKey::Stratum,
                    b: m * beta_num / t2,
                    alpha: 1.0,
                    capacity: smallest_psu(st),
                }],
            });
        }
        subpops.push(SubpopCoefficients { c, kappa: 1.0, cells });
    }
    if !bad.is_empty() {
        return Err(PopulationError::NonpositiveGamma { cells: bad });
    }
    Ok(DerivedCoefficients {
        family: CoefficientFamily::TwoStageFixedSsu,
        subpops,
    })
}

/// Hartley-Rao systematic πps of PSUs (inclusion `m z̃_i`), SRSWOR of SSUs.
/// With `fixed_ssu` the per-PSU sample size is common within a PSU stratum
/// and every PSU must hold a single SSU stratum.
pub fn derive_hr(
    pop: &TwoStagePopulation,
    fixed_ssu: bool,
) -> Result<DerivedCoefficients, PopulationError> {
    if fixed_ssu {
        require_single_ssu_stratum(pop)?;
    }
    let mut bad = Vec::new();
    let mut subpops = Vec::with_capacity(pop.subpopulations.len());
    for (j, sp) in pop.subpopulations.iter().enumerate() {
        let t2 = nonzero_total(sp.total(), j)?;
        let mut c = 0.0;
        let mut cells = Vec::with_capacity(sp.psu_strata.len());
        for (h, st) in sp.psu_strata.iter().enumerate() {
            let omega = st
                .omega()
                .ok_or(PopulationError::MissingSizeMeasure { subpop: j, stratum: h })?;
            let mut d2 = 0.0;
            let mut within = 0.0;
            let mut fixed_b = 0.0;
            let mut second = Vec::new();
            for (i, (psu, w)) in st.psus.iter().zip(&omega).enumerate() {
                let z = psu.z_tilde.unwrap();
                d2 += w * (1.0 + z);
                c += z * w / t2;
                for (g, ss) in psu.ssu_strata.iter().enumerate() {
                    let n = ss.size as f64;
                    within += n * ss.s2 / z;
                    let beta = n * n * ss.s2 / t2;
                    if fixed_ssu {
                        fixed_b += beta / z;
                    } else {
                        second.push(SecondStageCell {
                            key: SecondStageKey::Cell { psu: i, ssu_stratum: g },
                            b: beta / z,
                            alpha: z,
                            capacity: ss.size,
                        });
                    }
                }
            }
            if fixed_ssu {
                second.push(SecondStageCell {
                    key: SecondStageKey::Stratum,
                    b: fixed_b,
                    alpha: 1.0,
                    capacity: smallest_psu(st),
                });
            }
            let gamma = (d2 - within) / t2;
            if gamma <= 0.0 {
                bad.push(GammaCell { subpop: j, stratum: h, gamma });
            }
            cells.push(CellCoefficients {
                a: gamma,
                capacity: st.psu_count() as u64,
                second,
            });
        }
        subpops.push(SubpopCoefficients { c, kappa: 1.0, cells });
    }
    if !bad.is_empty() {
        return Err(PopulationError::NonpositiveGamma { cells: bad });
    }
    Ok(DerivedCoefficients {
        family: if fixed_ssu {
            CoefficientFamily::TwoStageHrFixedSsu
        } else {
            CoefficientFamily::TwoStageHr
        },
        subpops,
    })
}

fn nonzero_total(total: f64, subpop: usize) -> Result<f64, PopulationError> {
    if total == 0.0 || !total.is_finite() {
        return Err(PopulationError::ZeroTotal { subpop });
    }
    Ok(total * total)
}

fn smallest_psu(st: &super::PsuStratum) -> u64 {
    st.psus.iter().map(|p| p.ssu_strata[0].size).min().unwrap_or(0)
}

fn require_single_ssu_stratum(pop: &TwoStagePopulation) -> Result<(), PopulationError> {
    for (j, sp) in pop.subpopulations.iter().enumerate() {
        for (h, st) in sp.psu_strata.iter().enumerate() {
            for (i, psu) in st.psus.iter().enumerate() {
                if psu.ssu_strata.len() != 1 {
                    return Err(PopulationError::MultipleSsuStrata {
                        subpop: j,
                        stratum: h,
                        psu: i,
                        count: psu.ssu_strata.len(),
                    });
                }
            }
        }
    }
    Ok(())
}
