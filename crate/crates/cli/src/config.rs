//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line flags, each layer overriding the previous one.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use eqalloc::simulator::GeneratorParams;
use eqalloc::SchemeId;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    /// Aligned text: a header block, then one row per cell.
    #[default]
    Table,
    /// Pretty-printed JSON.
    Tree,
}

/// Second arm of a simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Sizes proportional to cell capacity with a common SSU fraction.
    #[default]
    Proportional,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub subpops: usize,
    pub psu_strata: usize,
    pub psus_per_stratum: usize,
    pub ssu_strata: usize,
    pub units_min: usize,
    pub units_max: usize,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub stratum_spread: f64,
    pub rho: f64,
    pub size_measure: bool,
    pub max_attempts: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let p = GeneratorParams::default();
        GenerateConfig {
            subpops: p.subpops,
            psu_strata: p.psu_strata,
            psus_per_stratum: p.psus_per_stratum,
            ssu_strata: p.ssu_strata,
            units_min: p.units_per_ssu_stratum.0,
            units_max: p.units_per_ssu_stratum.1,
            means: p.means,
            sds: p.sds,
            stratum_spread: p.stratum_spread,
            rho: p.rho,
            size_measure: p.size_measure,
            max_attempts: p.max_attempts,
        }
    }
}

impl GenerateConfig {
    pub fn params(&self) -> GeneratorParams {
        GeneratorParams {
            subpops: self.subpops,
            psu_strata: self.psu_strata,
            psus_per_stratum: self.psus_per_stratum,
            ssu_strata: self.ssu_strata,
            units_per_ssu_stratum: (self.units_min, self.units_max),
            means: self.means.clone(),
            sds: self.sds.clone(),
            stratum_spread: self.stratum_spread,
            rho: self.rho,
            size_measure: self.size_measure,
            require_positive_gamma: true,
            max_attempts: self.max_attempts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frame: Option<PathBuf>,
    /// A scheme name, or `auto` to pick from the frame kind.
    pub scheme: String,
    /// First-stage budget (PSUs); unused by single-stage schemes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    /// Units for single-stage schemes, expected SSUs for two-stage ones.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Vec<f64>>,
    pub seed: u64,
    pub replicates: usize,
    pub bootstrap: usize,
    pub round: bool,
    pub force: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
    /// 0 lets the thread pool decide.
    pub threads: usize,
    pub baseline: Baseline,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frame: None,
            scheme: "auto".into(),
            m: None,
            n: None,
            kappa: None,
            seed: 1,
            replicates: 1000,
            bootstrap: 200,
            round: true,
            force: false,
            out: None,
            format: ReportFormat::Table,
            threads: 0,
            baseline: Baseline::Proportional,
            generate: GenerateConfig::default(),
        }
    }
}

/// Flags shared by every subcommand. Unset flags leave the configured value alone.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML file with any of the settings below
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Population frame (.json tree or .csv flat)
    #[arg(long, global = true, value_name = "PATH")]
    pub frame: Option<PathBuf>,
    /// Allocation scheme, or "auto" to pick one from the frame
    #[arg(long, global = true, value_parser = parse_scheme)]
    pub scheme: Option<String>,
    /// First-stage budget (PSUs)
    #[arg(long, global = true)]
    pub m: Option<f64>,
    /// Unit budget (single stage) or expected SSU budget (two stage)
    #[arg(long, global = true)]
    pub n: Option<f64>,
    /// Priority weights, one per subpopulation
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    pub kappa: Option<Vec<f64>>,
    /// Seed for simulation and generation
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Monte Carlo replicates
    #[arg(long, global = true)]
    pub replicates: Option<usize>,
    /// Bootstrap resamples per replicate (0 turns the bootstrap off)
    #[arg(long, global = true)]
    pub bootstrap: Option<usize>,
    /// Round the allocation to integers (default)
    #[arg(long, global = true, overrides_with = "no_round")]
    pub round: bool,
    /// Keep the real-valued allocation
    #[arg(long, global = true, overrides_with = "round")]
    pub no_round: bool,
    /// Skip the sufficient condition and certify from the full spectrum
    #[arg(long, global = true)]
    pub force: bool,
    /// Write the report here instead of stdout
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Report format
    #[arg(long, global = true)]
    pub format: Option<ReportFormat>,
    /// Worker threads for simulation (0 uses all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Comparison arm for simulate
    #[arg(long, global = true)]
    pub baseline: Option<Baseline>,

    /// Subpopulations
    #[arg(long, global = true, help_heading = "Generator")]
    pub subpops: Option<usize>,
    /// PSU strata per subpopulation
    #[arg(long, global = true, help_heading = "Generator")]
    pub psu_strata: Option<usize>,
    /// PSUs per PSU stratum
    #[arg(long, global = true, help_heading = "Generator")]
    pub psus_per_stratum: Option<usize>,
    /// SSU strata per PSU
    #[arg(long, global = true, help_heading = "Generator")]
    pub ssu_strata: Option<usize>,
    /// Smallest number of units per SSU stratum
    #[arg(long, global = true, help_heading = "Generator")]
    pub units_min: Option<usize>,
    /// Largest number of units per SSU stratum
    #[arg(long, global = true, help_heading = "Generator")]
    pub units_max: Option<usize>,
    /// Mean level per subpopulation, recycled
    #[arg(long, global = true, value_delimiter = ',', num_args = 1.., help_heading = "Generator")]
    pub means: Option<Vec<f64>>,
    /// Unit standard deviation per subpopulation, recycled
    #[arg(long, global = true, value_delimiter = ',', num_args = 1.., help_heading = "Generator")]
    pub sds: Option<Vec<f64>>,
    /// Relative step of the mean between PSU strata
    #[arg(long, global = true, help_heading = "Generator")]
    pub stratum_spread: Option<f64>,
    /// Share of unit variance due to the PSU effect, in [0, 1)
    #[arg(long, global = true, help_heading = "Generator")]
    pub rho: Option<f64>,
    /// Leave PSUs without a size measure
    #[arg(long, global = true, help_heading = "Generator")]
    pub no_size_measure: bool,
}

fn parse_scheme(s: &str) -> Result<String, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok("auto".into());
    }
    s.parse::<SchemeId>().map(|id| id.name().to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Defaults, then the config file named in `flags`, then the flags.
    pub fn resolve(flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match &flags.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, f: &Overrides) {
        fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
            if let Some(v) = value {
                *slot = v.clone();
            }
        }
        fn set_opt<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
            if value.is_some() {
                slot.clone_from(value);
            }
        }
        set_opt(&mut self.frame, &f.frame);
        set(&mut self.scheme, &f.scheme);
        set_opt(&mut self.m, &f.m);
        set_opt(&mut self.n, &f.n);
        set_opt(&mut self.kappa, &f.kappa);
        set(&mut self.seed, &f.seed);
        set(&mut self.replicates, &f.replicates);
        set(&mut self.bootstrap, &f.bootstrap);
        if f.round {
            self.round = true;
        }
        if f.no_round {
            self.round = false;
        }
        self.force |= f.force;
        set_opt(&mut self.out, &f.out);
        set(&mut self.format, &f.format);
        set(&mut self.threads, &f.threads);
        set(&mut self.baseline, &f.baseline);

        let g = &mut self.generate;
        set(&mut g.subpops, &f.subpops);
        set(&mut g.psu_strata, &f.psu_strata);
        set(&mut g.psus_per_stratum, &f.psus_per_stratum);
        set(&mut g.ssu_strata, &f.ssu_strata);
        set(&mut g.units_min, &f.units_min);
        set(&mut g.units_max, &f.units_max);
        set(&mut g.means, &f.means);
        set(&mut g.sds, &f.sds);
        set(&mut g.stratum_spread, &f.stratum_spread);
        set(&mut g.rho, &f.rho);
        if f.no_size_measure {
            g.size_measure = false;
        }
    }

    fn check(&self) -> Result<(), CliError> {
        parse_scheme(&self.scheme).map_err(CliError::Usage)?;
        for (name, value) in [("m", self.m), ("n", self.n)] {
            if let Some(v) = value {
                if !(v.is_finite() && v > 0.0) {
                    return Err(CliError::Usage(format!("--{name} must be positive, got {v}")));
                }
            }
        }
        if self.replicates == 0 {
            return Err(CliError::Usage("--replicates must be at least 1".into()));
        }
        Ok(())
    }

    /// The configured scheme, or the default for the frame kind under `auto`.
    pub fn scheme_for(&self, two_stage: bool) -> SchemeId {
        match self.scheme.parse::<SchemeId>() {
            Ok(id) => id,
            Err(_) if two_stage => SchemeId::TwoStageSrswor,
            Err(_) => SchemeId::SingleStageStratified,
        }
    }
}
