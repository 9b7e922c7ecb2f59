//! TOML run configuration. See `docs/config.md` for the schema.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use scopf_core::scopf::SmcConfig;
use scopf_core::stresstest::{StressOptions, DEFAULT_OUTAGE_THRESHOLD};
use scopf_core::{CaseOptions, PenaltyParams, PriorParams, SolverOptions};

use crate::CliError;

/// Prefix selecting one of the bundled cases instead of a file.
pub const BUILTIN_PREFIX: &str = "builtin:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub network: NetworkSection,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub penalty: PenaltyParams,
    #[serde(default)]
    pub prior: PriorParams,
    #[serde(default)]
    pub smc: SmcSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub stress: StressSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// MATPOWER file, or `builtin:case14` / `builtin:case57`.
    pub case_path: String,
    #[serde(default)]
    pub dispatchable_loads: bool,
    #[serde(default = "default_load_range")]
    pub load_range: [f64; 2],
}

fn default_load_range() -> [f64; 2] {
    CaseOptions::default().load_range
}

/// `SmcConfig` without the seed, which lives at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcSection {
    pub n_x: usize,
    pub n_y: usize,
    pub rounds: usize,
    pub substeps: usize,
    pub tau_x: f64,
    pub tau_y: f64,
}

impl Default for SmcSection {
    fn default() -> Self {
        let d = SmcConfig::default();
        Self {
            n_x: d.n_x,
            n_y: d.n_y,
            rounds: d.rounds,
            substeps: d.substeps,
            tau_x: d.tau_x,
            tau_y: d.tau_y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// A `result.json` from `solve`/`baseline`, or a bare dispatch JSON.
    /// Unset means the case file's own set point.
    pub dispatch: Option<PathBuf>,
    pub n_y: usize,
    pub steps: usize,
    pub tau: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        let d = SmcConfig::default();
        Self {
            dispatch: None,
            n_y: d.n_y,
            steps: d.substeps,
            tau: d.tau_y,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StressSection {
    /// Same forms as `attack.dispatch`.
    pub dispatch: Option<PathBuf>,
    /// Use the contingencies stored alongside the dispatch as the predicted
    /// set for coverage exceedance.
    pub use_predicted: bool,
    pub samples: usize,
    pub outage_threshold: f64,
}

impl Default for StressSection {
    fn default() -> Self {
        Self {
            dispatch: None,
            use_predicted: true,
            samples: 10_000,
            outage_threshold: DEFAULT_OUTAGE_THRESHOLD,
        }
    }
}

impl RunConfig {
    /// Read, parse and validate; relative paths are rebased onto the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        if !self.network.case_path.starts_with(BUILTIN_PREFIX) {
            self.network.case_path = join(Path::new(&self.network.case_path)).to_string_lossy().into_owned();
        }
        self.out_dir = join(&self.out_dir);
        self.attack.dispatch = self.attack.dispatch.as_deref().map(join);
        self.stress.dispatch = self.stress.dispatch.as_deref().map(join);
    }

    pub fn validate(&self) -> Result<(), String> {
        let [lo, hi] = self.network.load_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(format!("network.load_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err("solver.tol must be positive and solver.max_iter at least 1".into());
        }
        if !(self.solver.jacobian_regularization >= 0.0) {
            return Err("solver.jacobian_regularization must be non-negative".into());
        }
        self.penalty.validate()?;
        self.prior.validate()?;
        self.smc_config().validate().map_err(|e| format!("smc: {e}"))?;
        if self.attack.n_y == 0 {
            return Err("attack.n_y must be at least 1".into());
        }
        if !(self.attack.tau > 0.0) {
            return Err("attack.tau must be positive".into());
        }
        self.stress_options().validate().map_err(|e| format!("stress: {e}"))?;
        Ok(())
    }

    pub fn case_options(&self) -> CaseOptions {
        CaseOptions {
            dispatchable_loads: self.network.dispatchable_loads,
            load_range: self.network.load_range,
        }
    }

    pub fn smc_config(&self) -> SmcConfig {
        let s = &self.smc;
        SmcConfig {
            n_x: s.n_x,
            n_y: s.n_y,
            rounds: s.rounds,
            substeps: s.substeps,
            tau_x: s.tau_x,
            tau_y: s.tau_y,
            seed: self.seed,
        }
    }

    pub fn stress_options(&self) -> StressOptions {
        StressOptions {
            samples: self.stress.samples,
            seed: self.seed,
            outage_threshold: self.stress.outage_threshold,
        }
    }
}
