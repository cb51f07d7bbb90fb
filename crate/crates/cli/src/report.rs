//! Reports and their two renderings: aligned text tables and JSON.

use std::fmt::Write;

use serde::Serialize;

use crate::config::ReportFormat;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Header {
    pub scheme: String,
    pub frame: Option<String>,
    pub m: Option<f64>,
    pub n: Option<f64>,
    pub kappa: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    #[serde(flatten)]
    pub header: Header,
    pub kind: String,
    pub subpopulations: usize,
    pub first_stage_cells: usize,
    pub condition_margin: Option<f64>,
    pub condition_satisfied: Option<bool>,
    /// Eigenvalues of `D`, descending, when forced.
    pub spectrum: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubpopRow {
    pub subpop: usize,
    pub kappa: f64,
    pub t: f64,
    pub cv: f64,
    pub t_rounded: Option<f64>,
    pub cv_rounded: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumRow {
    pub subpop: usize,
    pub stratum: usize,
    pub capacity: u64,
    pub size: f64,
    pub size_rounded: Option<u64>,
    /// Expected second-stage units drawn from this stratum.
    pub ssu: Option<f64>,
    pub ssu_rounded: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondStageRow {
    pub subpop: usize,
    pub stratum: usize,
    /// `psu:ssu_stratum`, or `*` for one size shared across the stratum.
    pub cell: String,
    pub capacity: u64,
    pub size: f64,
    pub size_rounded: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residuals {
    pub first_stage: f64,
    pub second_stage: Option<f64>,
    pub first_stage_rounded: Option<f64>,
    pub second_stage_rounded: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundingSummary {
    pub capped: bool,
    pub max_degradation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationReport {
    #[serde(flatten)]
    pub header: Header,
    pub lambda: f64,
    pub cv: f64,
    pub condition_margin: f64,
    pub method: String,
    pub rounding: Option<RoundingSummary>,
    pub residuals: Residuals,
    pub subpops: Vec<SubpopRow>,
    pub strata: Vec<StratumRow>,
    pub second_stage: Vec<SecondStageRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSubpop {
    pub subpop: usize,
    pub total: f64,
    pub cv_design: f64,
    pub cv_mc: f64,
    pub cv_mc_se: f64,
    pub cv_boot: f64,
    pub cv_boot_se: f64,
    pub relative_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Arm {
    pub name: String,
    pub psu_target: f64,
    pub psu_mean: f64,
    pub psu_se: f64,
    pub ssu_expected: f64,
    pub ssu_mean: f64,
    pub ssu_se: f64,
    pub subpops: Vec<ArmSubpop>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    #[serde(flatten)]
    pub header: Header,
    pub lambda: f64,
    pub cv: f64,
    pub seed: u64,
    pub replicates: usize,
    pub bootstrap: usize,
    pub arms: Vec<Arm>,
}

pub trait Render: Serialize {
    fn table(&self) -> String;

    fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Table => self.table(),
            ReportFormat::Tree => {
                let mut s = serde_json::to_string_pretty(self).expect("reports always serialize");
                s.push('\n');
                s
            }
        }
    }
}

fn sci(x: f64) -> String {
    if x.is_nan() {
        return "-".into();
    }
    format!("{x:.9e}")
}

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

fn opt<T>(x: Option<T>, f: impl Fn(T) -> String) -> String {
    x.map(f).unwrap_or_else(|| "-".into())
}

fn list(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

/// Columns padded to their widest entry, numbers right-aligned.
struct Table {
    head: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(head: Vec<&'static str>) -> Self {
        Table { head, rows: Vec::new() }
    }

    fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.head.len());
        self.rows.push(cells);
    }

    fn write(&self, out: &mut String) {
        let widths: Vec<usize> = (0..self.head.len())
            .map(|c| {
                self.rows
                    .iter()
                    .map(|r| r[c].len())
                    .chain([self.head[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: Vec<&str>, out: &mut String| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect();
            out.push_str(padded.join("  ").trim_end());
            out.push('\n');
        };
        line(self.head.clone(), out);
        for r in &self.rows {
            line(r.iter().map(String::as_str).collect(), out);
        }
    }
}

fn header_block(out: &mut String, pairs: &[(&str, String)]) {
    let w = pairs.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in pairs {
        let _ = writeln!(out, "{k:<w$}  {v}");
    }
}

impl Header {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let budgets = match self.m {
            Some(m) => format!("m = {m}, n = {}", opt(self.n, |n| n.to_string())),
            None => format!("n = {}", opt(self.n, |n| n.to_string())),
        };
        vec![
            ("scheme", self.scheme.clone()),
            ("frame", self.frame.clone().unwrap_or_else(|| "-".into())),
            ("budgets", budgets),
            ("kappa", list(&self.kappa)),
        ]
    }
}

impl Render for CheckReport {
    fn table(&self) -> String {
        let mut out = String::new();
        let mut pairs = self.header.pairs();
        pairs.push(("kind", self.kind.clone()));
        pairs.push(("subpopulations", self.subpopulations.to_string()));
        pairs.push(("cells", self.first_stage_cells.to_string()));
        header_block(&mut out, &pairs);
        out.push('\n');
        out.push_str("frame valid\n");
        if self.kind == "two-stage" {
            let _ = writeln!(out, "gamma positive in all {} first-stage cells", self.first_stage_cells);
        }
        match (self.condition_margin, self.condition_satisfied) {
            (Some(margin), Some(true)) => {
                let _ = writeln!(out, "condition satisfied, margin = {}", sci(margin));
            }
            (Some(margin), _) => {
                let _ = writeln!(out, "condition not satisfied, margin = {}", sci(margin));
            }
            _ => out.push_str("condition not evaluated (no budgets given)\n"),
        }
        if let Some(spec) = &self.spectrum {
            let signs: String = spec.iter().map(|x| if *x > 0.0 { '+' } else { '-' }).collect();
            let positive = spec.iter().filter(|x| **x > 0.0).count();
            let _ = writeln!(out, "spectrum signs {signs} ({positive} positive)");
            let _ = writeln!(
                out,
                "spectrum {}",
                spec.iter().map(|x| sci(*x)).collect::<Vec<_>>().join(" ")
            );
        }
        out
    }
}

impl Render for AllocationReport {
    fn table(&self) -> String {
        let mut out = String::new();
        let mut pairs = self.header.pairs();
        pairs.push(("lambda", sci(self.lambda)));
        pairs.push(("cv", sci(self.cv)));
        pairs.push(("margin", sci(self.condition_margin)));
        pairs.push(("method", self.method.clone()));
        pairs.push((
            "rounding",
            match &self.rounding {
                Some(r) => format!(
                    "capped = {}, max degradation = {}",
                    r.capped,
                    sci(r.max_degradation)
                ),
                None => "off".into(),
            },
        ));
        let res = &self.residuals;
        pairs.push((
            "residuals",
            format!(
                "first = {}, second = {}",
                sci(res.first_stage),
                opt(res.second_stage, sci)
            ),
        ));
        if self.rounding.is_some() {
            pairs.push((
                "residuals_int",
                format!(
                    "first = {}, second = {}",
                    opt(res.first_stage_rounded, |x| x.to_string()),
                    opt(res.second_stage_rounded, sci)
                ),
            ));
        }
        header_block(&mut out, &pairs);

        out.push('\n');
        let mut t = Table::new(vec!["subpop", "kappa", "T", "cv", "T_int", "cv_int"]);
        for r in &self.subpops {
            t.row(vec![
                r.subpop.to_string(),
                r.kappa.to_string(),
                sci(r.t),
                sci(r.cv),
                opt(r.t_rounded, sci),
                opt(r.cv_rounded, sci),
            ]);
        }
        t.write(&mut out);

        out.push('\n');
        let mut t = Table::new(vec!["subpop", "stratum", "capacity", "size", "size_int", "ssu", "ssu_int"]);
        for r in &self.strata {
            t.row(vec![
                r.subpop.to_string(),
                r.stratum.to_string(),
                r.capacity.to_string(),
                fixed(r.size),
                opt(r.size_rounded, |x| x.to_string()),
                opt(r.ssu, fixed),
                opt(r.ssu_rounded, fixed),
            ]);
        }
        t.write(&mut out);

        if !self.second_stage.is_empty() {
            out.push('\n');
            let mut t = Table::new(vec!["subpop", "stratum", "cell", "capacity", "size", "size_int"]);
            for r in &self.second_stage {
                t.row(vec![
                    r.subpop.to_string(),
                    r.stratum.to_string(),
                    r.cell.clone(),
                    r.capacity.to_string(),
                    fixed(r.size),
                    opt(r.size_rounded, |x| x.to_string()),
                ]);
            }
            t.write(&mut out);
        }
        out
    }
}

impl Render for SimulationReport {
    fn table(&self) -> String {
        let mut out = String::new();
        let mut pairs = self.header.pairs();
        pairs.push(("lambda", sci(self.lambda)));
        pairs.push(("cv", sci(self.cv)));
        pairs.push(("seed", self.seed.to_string()));
        pairs.push(("replicates", self.replicates.to_string()));
        pairs.push(("bootstrap", self.bootstrap.to_string()));
        header_block(&mut out, &pairs);

        out.push('\n');
        let mut t = Table::new(vec![
            "arm", "subpop", "total", "cv_design", "cv_mc", "se_mc", "cv_boot", "se_boot", "rel_bias",
        ]);
        for arm in &self.arms {
            for s in &arm.subpops {
                t.row(vec![
                    arm.name.clone(),
                    s.subpop.to_string(),
                    fixed(s.total),
                    sci(s.cv_design),
                    sci(s.cv_mc),
                    sci(s.cv_mc_se),
                    sci(s.cv_boot),
                    sci(s.cv_boot_se),
                    sci(s.relative_bias),
                ]);
            }
        }
        t.write(&mut out);

        out.push('\n');
        let mut t = Table::new(vec![
            "arm", "psu_target", "psu_mean", "psu_se", "ssu_expected", "ssu_mean", "ssu_se",
        ]);
        for arm in &self.arms {
            t.row(vec![
                arm.name.clone(),
                fixed(arm.psu_target),
                fixed(arm.psu_mean),
                fixed(arm.psu_se),
                fixed(arm.ssu_expected),
                fixed(arm.ssu_mean),
                fixed(arm.ssu_se),
            ]);
        }
        t.write(&mut out);
        out
    }
}
