//! Frame files.
//!
//! Two formats, both versioned:
//!
//! * **tree** (`.json`): `{"schema_version": 1, "kind": "single-stage" |
//!   "two-stage", "subpopulations": [...]}` mirroring the in-memory types.
//!   Summary fields (`size`, `sd`/`s2`, `total`, `d2`) may be omitted when
//!   `units` are given; a PSU carries either `z_tilde` or an unnormalized
//!   `z_raw`.
//! * **flat** (`.csv`): a first line `# eqalloc-frame schema_version=1
//!   kind=<kind>` followed by a headed CSV table. Indices are 0-based and
//!   must be contiguous. The kinds and their columns are
//!   - `two-stage`: `subpop,psu_stratum,psu_id,ssu_stratum,N,S2,t_psu,z_raw`
//!     plus optional `z_tilde` and `D2`, one row per SSU stratum;
//!   - `two-stage-units`: `subpop,psu_stratum,psu_id,ssu_stratum,y,z_raw`
//!     plus optional `z_tilde`, one row per SSU;
//!   - `single-stage`: `subpop,stratum,N,S,t_subpop`, one row per stratum;
//!   - `single-stage-units`: `subpop,stratum,y`, one row per unit.
//!
//! When both summaries and unit values are present the summaries are used;
//! [`LoadOptions::verify`] cross-checks them against the units.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    issue, unit_variance, Issue, Population, PopulationError, Psu,
    PsuStratum, SingleStagePopulation, SingleStratum, SingleSubpop, SsuStratum,
    TwoStagePopulation, TwoStageSubpop, RECOMPUTE_TOLERANCE,
};
use crate::numeric::rel_diff;

pub const SCHEMA_VERSION: u32 = 1;

const FLAT_MAGIC: &str = "# eqalloc-frame";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    Tree,
    Flat,
}

impl FrameFormat {
    /// `.json` is tree, `.csv` is flat.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "json" => Some(FrameFormat::Tree),
            "csv" => Some(FrameFormat::Flat),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Check supplied summaries against unit values when both are present.
    pub verify: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { verify: true }
    }
}

/// Reads and validates a frame. The format is taken from the extension when
/// `format` is `None`.
pub fn load_population(
    path: &Path,
    format: Option<FrameFormat>,
    options: &LoadOptions,
) -> Result<Population, PopulationError> {
    let format = format.or_else(|| FrameFormat::from_path(path)).ok_or_else(|| {
        PopulationError::Parse(format!(
            "cannot infer frame format of {} (use .json or .csv)",
            path.display()
        ))
    })?;
    let text = fs::read_to_string(path).map_err(|source| PopulationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_population(&text, format, options)
}

pub fn parse_population(
    text: &str,
    format: FrameFormat,
    options: &LoadOptions,
) -> Result<Population, PopulationError> {
    let pop = match format {
        FrameFormat::Tree => parse_tree(text, options)?,
        FrameFormat::Flat => parse_flat(text, options)?,
    };
    pop.validate()?;
    Ok(pop)
}

pub fn save_population(
    pop: &Population,
    path: &Path,
    format: FrameFormat,
) -> Result<(), PopulationError> {
    let text = write_population(pop, format)?;
    fs::write(path, text).map_err(|source| PopulationError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Flat output uses the unit-level variant whenever the frame carries units.
pub fn write_population(pop: &Population, format: FrameFormat) -> Result<String, PopulationError> {
    match format {
        FrameFormat::Tree => write_tree(pop),
        FrameFormat::Flat => write_flat(pop),
    }
}

// ---------------------------------------------------------------------------
// Tree format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TreeFile {
    schema_version: u32,
    #[serde(flatten)]
    body: TreeBody,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum TreeBody {
    SingleStage { subpopulations: Vec<SingleSubpopDto> },
    TwoStage { subpopulations: Vec<TwoSubpopDto> },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SingleSubpopDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    total: Option<f64>,
    strata: Vec<SingleStratumDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SingleStratumDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TwoSubpopDto {
    psu_strata: Vec<PsuStratumDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PsuStratumDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d2: Option<f64>,
    psus: Vec<PsuDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PsuDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z_tilde: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z_raw: Option<f64>,
    ssu_strata: Vec<SsuStratumDto>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SsuStratumDto {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    units: Option<Vec<f64>>,
}

fn parse_tree(text: &str, options: &LoadOptions) -> Result<Population, PopulationError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| PopulationError::Parse(e.to_string()))?;
    let version = value
        .get("schema_version")
        .ok_or_else(|| PopulationError::Parse("missing schema_version".into()))?;
    let version = version
        .as_u64()
        .ok_or_else(|| PopulationError::Parse(format!("bad schema_version {version}")))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(PopulationError::UnsupportedSchema {
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    let file: TreeFile =
        serde_json::from_value(value).map_err(|e| PopulationError::Parse(e.to_string()))?;

    let mut issues = Vec::new();
    let pop = match file.body {
        TreeBody::SingleStage { subpopulations } => {
            let subpops = subpopulations
                .into_iter()
                .enumerate()
                .map(|(j, sp)| {
                    let strata = sp
                        .strata
                        .into_iter()
                        .enumerate()
                        .map(|(h, st)| {
                            let path = format!("subpop[{j}]/stratum[{h}]");
                            single_stratum(&path, st.size, st.sd, st.units, options, &mut issues)
                        })
                        .collect();
                    single_subpop(j, sp.total, strata, options, &mut issues)
                })
                .collect();
            Population::SingleStage(SingleStagePopulation { subpopulations: subpops })
        }
        TreeBody::TwoStage { subpopulations } => {
            let subpops = subpopulations
                .into_iter()
                .enumerate()
                .map(|(j, sp)| TwoStageSubpop {
                    psu_strata: sp
                        .psu_strata
                        .into_iter()
                        .enumerate()
                        .map(|(h, st)| {
                            let st_path = format!("subpop[{j}]/psu_stratum[{h}]");
                            let raw = st.psus.iter().map(|p| (p.z_tilde, p.z_raw)).collect();
                            let z = size_measures(&st_path, raw, &mut issues);
                            let psus = st
                                .psus
                                .into_iter()
                                .zip(z)
                                .enumerate()
                                .map(|(i, (p, z))| {
                                    let psu_path = format!("{st_path}/psu[{i}]");
                                    let ssu = p
                                        .ssu_strata
                                        .into_iter()
                                        .enumerate()
                                        .map(|(g, s)| {
                                            let path = format!("{psu_path}/ssu_stratum[{g}]");
                                            ssu_stratum(&path, s.size, s.s2, s.units, options, &mut issues)
                                        })
                                        .collect();
                                    psu(&psu_path, p.total, z, ssu, &mut issues)
                                })
                                .collect();
                            psu_stratum(st.d2, psus)
                        })
                        .collect(),
                })
                .collect();
            Population::TwoStage(TwoStagePopulation { subpopulations: subpops })
        }
    };
    if issues.is_empty() {
        Ok(pop)
    } else {
        Err(PopulationError::Validation(issues))
    }
}

fn write_tree(pop: &Population) -> Result<String, PopulationError> {
    let body = match pop {
        Population::SingleStage(p) => TreeBody::SingleStage {
            subpopulations: p
                .subpopulations
                .iter()
                .map(|sp| SingleSubpopDto {
                    total: Some(sp.total),
                    strata: sp
                        .strata
                        .iter()
                        .map(|st| SingleStratumDto {
                            size: Some(st.size),
                            sd: Some(st.sd),
                            units: st.units.clone(),
                        })
                        .collect(),
                })
                .collect(),
        },
        Population::TwoStage(p) => TreeBody::TwoStage {
            subpopulations: p
                .subpopulations
                .iter()
                .map(|sp| TwoSubpopDto {
                    psu_strata: sp
                        .psu_strata
                        .iter()
                        .map(|st| PsuStratumDto {
                            d2: Some(st.d2),
                            psus: st
                                .psus
                                .iter()
                                .map(|p| PsuDto {
                                    total: Some(p.total),
                                    z_tilde: p.z_tilde,
                                    z_raw: None,
                                    ssu_strata: p
                                        .ssu_strata
                                        .iter()
                                        .map(|s| SsuStratumDto {
                                            size: Some(s.size),
                                            s2: Some(s.s2),
                                            units: s.units.clone(),
                                        })
                                        .collect(),
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
        },
    };
    let file = TreeFile { schema_version: SCHEMA_VERSION, body };
    let mut text =
        serde_json::to_string_pretty(&file).map_err(|e| PopulationError::Parse(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

// ---------------------------------------------------------------------------
// Assembly shared by both formats
// ---------------------------------------------------------------------------

fn check_summary(
    path: &str,
    name: &str,
    given: f64,
    recomputed: f64,
    issues: &mut Vec<Issue>,
) {
    if rel_diff(given, recomputed) > RECOMPUTE_TOLERANCE
        && (given - recomputed).abs() > f64::EPSILON * recomputed.abs().max(1.0)
    {
        issues.push(issue(
            path,
            format!("{name} {given} disagrees with unit values ({recomputed})"),
        ));
    }
}

fn single_stratum(
    path: &str,
    size: Option<u64>,
    sd: Option<f64>,
    units: Option<Vec<f64>>,
    options: &LoadOptions,
    issues: &mut Vec<Issue>,
) -> SingleStratum {
    let (size, sd) = match &units {
        Some(u) => {
            let s = unit_variance(u).sqrt();
            if options.verify {
                if let Some(given) = sd {
                    check_summary(path, "sd", given, s, issues);
                }
            }
            (size.unwrap_or(u.len() as u64), sd.unwrap_or(s))
        }
        None => {
            if size.is_none() || sd.is_none() {
                issues.push(issue(path, "needs size and sd, or units"));
            }
            (size.unwrap_or(0), sd.unwrap_or(0.0))
        }
    };
    SingleStratum { size, sd, units }
}

fn single_subpop(
    j: usize,
    total: Option<f64>,
    strata: Vec<SingleStratum>,
    options: &LoadOptions,
    issues: &mut Vec<Issue>,
) -> SingleSubpop {
    let path = format!("subpop[{j}]");
    let from_units = strata
        .iter()
        .map(|s| s.units.as_ref().map(|u| u.iter().sum::<f64>()))
        .sum::<Option<f64>>();
    let total = match (total, from_units) {
        (Some(t), Some(u)) => {
            if options.verify {
                check_summary(&path, "total", t, u, issues);
            }
            t
        }
        (Some(t), None) => t,
        (None, Some(u)) => u,
        (None, None) => {
            issues.push(issue(&path, "needs total, or units in every stratum"));
            0.0
        }
    };
    SingleSubpop { total, strata }
}

fn ssu_stratum(
    path: &str,
    size: Option<u64>,
    s2: Option<f64>,
    units: Option<Vec<f64>>,
    options: &LoadOptions,
    issues: &mut Vec<Issue>,
) -> SsuStratum {
    let (size, s2) = match &units {
        Some(u) => {
            let v = unit_variance(u);
            if options.verify {
                if let Some(given) = s2 {
                    check_summary(path, "s2", given, v, issues);
                }
            }
            (size.unwrap_or(u.len() as u64), s2.unwrap_or(v))
        }
        None => {
            if size.is_none() || s2.is_none() {
                issues.push(issue(path, "needs size and s2, or units"));
            }
            (size.unwrap_or(0), s2.unwrap_or(0.0))
        }
    };
    SsuStratum { size, s2, units }
}

/// PSU totals are always cross-checked against units by frame validation.
fn psu(
    path: &str,
    total: Option<f64>,
    z_tilde: Option<f64>,
    ssu_strata: Vec<SsuStratum>,
    issues: &mut Vec<Issue>,
) -> Psu {
    match total {
        Some(total) => Psu { total, z_tilde, ssu_strata },
        None => Psu::from_ssu_strata(z_tilde, ssu_strata.clone()).unwrap_or_else(|| {
            issues.push(issue(path, "needs total, or units in every SSU stratum"));
            Psu { total: 0.0, z_tilde, ssu_strata }
        }),
    }
}

fn psu_stratum(d2: Option<f64>, psus: Vec<Psu>) -> PsuStratum {
    match d2 {
        Some(d2) => PsuStratum { d2, psus },
        None => PsuStratum::from_psus(psus),
    }
}

/// Per stratum: all `z_tilde` given → used as is; otherwise every PSU needs
/// a `z_raw` (or `z_tilde`) and the raw values are normalized to sum to one.
fn size_measures(
    path: &str,
    raw: Vec<(Option<f64>, Option<f64>)>,
    issues: &mut Vec<Issue>,
) -> Vec<Option<f64>> {
    if raw.iter().all(|(t, _)| t.is_some()) {
        return raw.into_iter().map(|(t, _)| t).collect();
    }
    if raw.iter().all(|(t, r)| t.is_none() && r.is_none()) {
        return vec![None; raw.len()];
    }
    let values: Option<Vec<f64>> = raw.iter().map(|(t, r)| r.or(*t)).collect();
    let Some(values) = values else {
        issues.push(issue(path, "size measure given for some PSUs but not all"));
        return vec![None; raw.len()];
    };
    if values.iter().any(|z| !(z.is_finite() && *z > 0.0)) {
        issues.push(issue(path, "raw size measures must be positive"));
        return vec![None; raw.len()];
    }
    let sum: f64 = values.iter().sum();
    values.into_iter().map(|z| Some(z / sum)).collect()
}

// ---------------------------------------------------------------------------
// Flat format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FlatKind {
    SingleStage,
    SingleStageUnits,
    TwoStage,
    TwoStageUnits,
}

impl FlatKind {
    fn name(self) -> &'static str {
        match self {
            FlatKind::SingleStage => "single-stage",
            FlatKind::SingleStageUnits => "single-stage-units",
            FlatKind::TwoStage => "two-stage",
            FlatKind::TwoStageUnits => "two-stage-units",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            FlatKind::SingleStage,
            FlatKind::SingleStageUnits,
            FlatKind::TwoStage,
            FlatKind::TwoStageUnits,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Serialize, Deserialize)]
struct SingleRow {
    subpop: usize,
    stratum: usize,
    #[serde(rename = "N")]
    n: u64,
    #[serde(rename = "S")]
    s: f64,
    t_subpop: f64,
}

#[derive(Serialize, Deserialize)]
struct SingleUnitRow {
    subpop: usize,
    stratum: usize,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct TwoRow {
    subpop: usize,
    psu_stratum: usize,
    psu_id: usize,
    ssu_stratum: usize,
    #[serde(rename = "N")]
    n: u64,
    #[serde(rename = "S2")]
    s2: f64,
    t_psu: f64,
    #[serde(default)]
    z_raw: Option<f64>,
    #[serde(default)]
    z_tilde: Option<f64>,
    #[serde(rename = "D2", default)]
    d2: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct TwoUnitRow {
    subpop: usize,
    psu_stratum: usize,
    psu_id: usize,
    ssu_stratum: usize,
    y: f64,
    #[serde(default)]
    z_raw: Option<f64>,
    #[serde(default)]
    z_tilde: Option<f64>,
}

fn parse_flat(text: &str, options: &LoadOptions) -> Result<Population, PopulationError> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let kind = parse_flat_header(first.trim_end_matches('\r'))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(rest.as_bytes());
    match kind {
        FlatKind::SingleStage => {
            let rows: Vec<SingleRow> = read_rows(&mut reader)?;
            single_from_rows(rows)
        }
        FlatKind::SingleStageUnits => {
            let rows: Vec<SingleUnitRow> = read_rows(&mut reader)?;
            single_from_unit_rows(rows, options)
        }
        FlatKind::TwoStage => {
            let rows: Vec<TwoRow> = read_rows(&mut reader)?;
            two_from_rows(rows)
        }
        FlatKind::TwoStageUnits => {
            let rows: Vec<TwoUnitRow> = read_rows(&mut reader)?;
            two_from_unit_rows(rows)
        }
    }
}

fn parse_flat_header(line: &str) -> Result<FlatKind, PopulationError> {
    let fields = line.strip_prefix(FLAT_MAGIC).ok_or_else(|| {
        PopulationError::Parse(format!("flat frame must start with '{FLAT_MAGIC}'"))
    })?;
    let mut version = None;
    let mut kind = None;
    for field in fields.split_whitespace() {
        match field.split_once('=') {
            Some(("schema_version", v)) => {
                version = Some(v.parse::<u32>().map_err(|_| {
                    PopulationError::Parse(format!("bad schema_version {v}"))
                })?)
            }
            Some(("kind", k)) => {
                kind = Some(
                    FlatKind::parse(k)
                        .ok_or_else(|| PopulationError::Parse(format!("unknown kind {k}")))?,
                )
            }
            _ => return Err(PopulationError::Parse(format!("bad header field {field}"))),
        }
    }
    let version = version.ok_or_else(|| PopulationError::Parse("missing schema_version".into()))?;
    if version != SCHEMA_VERSION {
        return Err(PopulationError::UnsupportedSchema { found: version });
    }
    kind.ok_or_else(|| PopulationError::Parse("missing kind".into()))
}

fn read_rows<T: for<'de> Deserialize<'de>>(
    reader: &mut csv::Reader<&[u8]>,
) -> Result<Vec<T>, PopulationError> {
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| PopulationError::Parse(e.to_string()))
}

/// Nested index tree built from flat rows; children are checked to be
/// numbered `0..n` when converted back to vectors.
type Tree<T> = BTreeMap<usize, T>;

fn contiguous<T>(path: &str, level: &str, map: Tree<T>) -> Result<Vec<T>, PopulationError> {
    let n = map.len();
    if map.keys().copied().ne(0..n) {
        return Err(PopulationError::Parse(format!(
            "{path}: {level} indices must run 0..{n} without gaps"
        )));
    }
    Ok(map.into_values().collect())
}

fn single_from_rows(rows: Vec<SingleRow>) -> Result<Population, PopulationError> {
    let mut tree: Tree<(f64, Tree<SingleStratum>)> = Tree::new();
    for r in rows {
        let entry = tree.entry(r.subpop).or_insert((r.t_subpop, Tree::new()));
        if entry.0.to_bits() != r.t_subpop.to_bits() {
            return Err(PopulationError::Parse(format!(
                "subpop[{}]: conflicting t_subpop values",
                r.subpop
            )));
        }
        let st = SingleStratum { size: r.n, sd: r.s, units: None };
        if entry.1.insert(r.stratum, st).is_some() {
            return Err(duplicate(&format!("subpop[{}]/stratum[{}]", r.subpop, r.stratum)));
        }
    }
    let subpopulations = contiguous("frame", "subpop", tree)?
        .into_iter()
        .enumerate()
        .map(|(j, (total, strata))| {
            Ok(SingleSubpop {
                total,
                strata: contiguous(&format!("subpop[{j}]"), "stratum", strata)?,
            })
        })
        .collect::<Result<_, PopulationError>>()?;
    Ok(Population::SingleStage(SingleStagePopulation { subpopulations }))
}

fn single_from_unit_rows(
    rows: Vec<SingleUnitRow>,
    options: &LoadOptions,
) -> Result<Population, PopulationError> {
    let mut tree: Tree<Tree<Vec<f64>>> = Tree::new();
    for r in rows {
        tree.entry(r.subpop).or_default().entry(r.stratum).or_default().push(r.y);
    }
    let mut issues = Vec::new();
    let mut subpopulations = Vec::new();
    for (j, strata) in contiguous("frame", "subpop", tree)?.into_iter().enumerate() {
        let strata = contiguous(&format!("subpop[{j}]"), "stratum", strata)?
            .into_iter()
            .map(SingleStratum::from_units)
            .collect();
        subpopulations.push(single_subpop(j, None, strata, options, &mut issues));
    }
    debug_assert!(issues.is_empty());
    Ok(Population::SingleStage(SingleStagePopulation { subpopulations }))
}

struct FlatPsu {
    total: Option<f64>,
    z: (Option<f64>, Option<f64>),
    ssu: Tree<SsuStratum>,
}

struct FlatStratum {
    d2: Option<f64>,
    psus: Tree<FlatPsu>,
}

fn same_opt(x: Option<f64>, y: Option<f64>) -> bool {
    x.map(f64::to_bits) == y.map(f64::to_bits)
}

fn two_from_rows(rows: Vec<TwoRow>) -> Result<Population, PopulationError> {
    let mut tree: Tree<Tree<FlatStratum>> = Tree::new();
    for r in rows {
        let path = format!("subpop[{}]/psu_stratum[{}]", r.subpop, r.psu_stratum);
        let st = tree
            .entry(r.subpop)
            .or_default()
            .entry(r.psu_stratum)
            .or_insert(FlatStratum { d2: r.d2, psus: Tree::new() });
        if !same_opt(st.d2, r.d2) {
            return Err(PopulationError::Parse(format!("{path}: conflicting D2 values")));
        }
        let psu = st.psus.entry(r.psu_id).or_insert(FlatPsu {
            total: Some(r.t_psu),
            z: (r.z_tilde, r.z_raw),
            ssu: Tree::new(),
        });
        let path = format!("{path}/psu[{}]", r.psu_id);
        if !same_opt(psu.total, Some(r.t_psu))
            || !same_opt(psu.z.0, r.z_tilde)
            || !same_opt(psu.z.1, r.z_raw)
        {
            return Err(PopulationError::Parse(format!(
                "{path}: conflicting PSU-level values across rows"
            )));
        }
        let ss = SsuStratum { size: r.n, s2: r.s2, units: None };
        if psu.ssu.insert(r.ssu_stratum, ss).is_some() {
            return Err(duplicate(&format!("{path}/ssu_stratum[{}]", r.ssu_stratum)));
        }
    }
    assemble_two_stage(tree)
}

/// Per PSU: its (z̃, raw z) columns and the unit values by SSU stratum.
type PsuUnits = ((Option<f64>, Option<f64>), Tree<Vec<f64>>);

fn two_from_unit_rows(rows: Vec<TwoUnitRow>) -> Result<Population, PopulationError> {
    let mut units: Tree<Tree<Tree<PsuUnits>>> = Tree::new();
    for r in rows {
        let psu = units
            .entry(r.subpop)
            .or_default()
            .entry(r.psu_stratum)
            .or_default()
            .entry(r.psu_id)
            .or_insert(((r.z_tilde, r.z_raw), Tree::new()));
        if !same_opt(psu.0 .0, r.z_tilde) || !same_opt(psu.0 .1, r.z_raw) {
            return Err(PopulationError::Parse(format!(
                "subpop[{}]/psu_stratum[{}]/psu[{}]: conflicting size measures across rows",
                r.subpop, r.psu_stratum, r.psu_id
            )));
        }
        psu.1.entry(r.ssu_stratum).or_default().push(r.y);
    }
    let tree = units
        .into_iter()
        .map(|(j, strata)| {
            let strata = strata
                .into_iter()
                .map(|(h, psus)| {
                    let psus = psus
                        .into_iter()
                        .map(|(i, (z, ssu))| {
                            let ssu = ssu
                                .into_iter()
                                .map(|(g, u)| (g, SsuStratum::from_units(u)))
                                .collect();
                            (i, FlatPsu { total: None, z, ssu })
                        })
                        .collect();
                    (h, FlatStratum { d2: None, psus })
                })
                .collect();
            (j, strata)
        })
        .collect();
    assemble_two_stage(tree)
}

fn assemble_two_stage(tree: Tree<Tree<FlatStratum>>) -> Result<Population, PopulationError> {
    let mut issues = Vec::new();
    let mut subpopulations = Vec::new();
    for (j, strata) in contiguous("frame", "subpop", tree)?.into_iter().enumerate() {
        let sp_path = format!("subpop[{j}]");
        let mut psu_strata = Vec::new();
        for (h, st) in contiguous(&sp_path, "psu_stratum", strata)?.into_iter().enumerate() {
            let st_path = format!("{sp_path}/psu_stratum[{h}]");
            let flat = contiguous(&st_path, "psu_id", st.psus)?;
            let z = size_measures(&st_path, flat.iter().map(|p| p.z).collect(), &mut issues);
            let mut psus = Vec::new();
            for (i, (p, z)) in flat.into_iter().zip(z).enumerate() {
                let psu_path = format!("{st_path}/psu[{i}]");
                let ssu = contiguous(&psu_path, "ssu_stratum", p.ssu)?;
                psus.push(psu(&psu_path, p.total, z, ssu, &mut issues));
            }
            psu_strata.push(psu_stratum(st.d2, psus));
        }
        subpopulations.push(TwoStageSubpop { psu_strata });
    }
    if issues.is_empty() {
        Ok(Population::TwoStage(TwoStagePopulation { subpopulations }))
    } else {
        Err(PopulationError::Validation(issues))
    }
}

fn duplicate(path: &str) -> PopulationError {
    PopulationError::Parse(format!("{path}: duplicate row"))
}

fn write_flat(pop: &Population) -> Result<String, PopulationError> {
    let kind = match pop {
        Population::SingleStage(_) if pop.has_units() => FlatKind::SingleStageUnits,
        Population::SingleStage(_) => FlatKind::SingleStage,
        Population::TwoStage(_) if pop.has_units() => FlatKind::TwoStageUnits,
        Population::TwoStage(_) => FlatKind::TwoStage,
    };
    let mut out = format!(
        "{FLAT_MAGIC} schema_version={SCHEMA_VERSION} kind={}\n",
        kind.name()
    )
    .into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let err = |e: csv::Error| PopulationError::Parse(e.to_string());
        match pop {
            Population::SingleStage(p) => {
                for (j, sp) in p.subpopulations.iter().enumerate() {
                    for (h, st) in sp.strata.iter().enumerate() {
                        if kind == FlatKind::SingleStageUnits {
                            for &y in st.units.as_deref().unwrap_or_default() {
                                w.serialize(SingleUnitRow { subpop: j, stratum: h, y })
                                    .map_err(err)?;
                            }
                        } else {
                            w.serialize(SingleRow {
                                subpop: j,
                                stratum: h,
                                n: st.size,
                                s: st.sd,
                                t_subpop: sp.total,
                            })
                            .map_err(err)?;
                        }
                    }
                }
            }
            Population::TwoStage(p) => {
                for (j, sp) in p.subpopulations.iter().enumerate() {
                    for (h, st) in sp.psu_strata.iter().enumerate() {
                        for (i, psu) in st.psus.iter().enumerate() {
                            for (g, ss) in psu.ssu_strata.iter().enumerate() {
                                if kind == FlatKind::TwoStageUnits {
                                    for &y in ss.units.as_deref().unwrap_or_default() {
                                        w.serialize(TwoUnitRow {
                                            subpop: j,
                                            psu_stratum: h,
                                            psu_id: i,
                                            ssu_stratum: g,
                                            y,
                                            z_raw: psu.z_tilde,
                                            z_tilde: psu.z_tilde,
                                        })
                                        .map_err(err)?;
                                    }
                                } else {
                                    w.serialize(TwoRow {
                                        subpop: j,
                                        psu_stratum: h,
                                        psu_id: i,
                                        ssu_stratum: g,
                                        n: ss.size,
                                        s2: ss.s2,
                                        t_psu: psu.total,
                                        z_raw: psu.z_tilde,
                                        z_tilde: psu.z_tilde,
                                        d2: Some(st.d2),
                                    })
                                    .map_err(err)?;
                                }
                            }
                        }
                    }
                }
            }
        }
        w.flush().map_err(|e| PopulationError::Parse(e.to_string()))?;
    }
    String::from_utf8(out).map_err(|e| PopulationError::Parse(e.to_string()))
}
