//! Experiment configuration files.
//!
//! ```toml
//! fixture_path = "default.toml"     # relative to this file; omit for the shipped fixture
//! master_seed = 20240601
//! replicas = 2000
//! k_grid = [1000, 100000]
//! zeta_grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
//! output_dir = "out"                # falls back to $QCLT_OUTPUT_DIR
//!
//! [schedule]
//! alpha = 32.0
//! b = 182.0
//! beta = 0.6666666666666666
//!
//! [modes]
//! track_sandwich = false
//! instrumented_terms = false
//! emit_samples = false
//!
//! [generator]                       # only read by gen-mdp
//! n_states = 4
//! n_actions = 3
//! sparsity = 0.6
//! reward_seed = 1
//! transition_seed = 2
//! gamma = 0.7
//! ```

use std::path::{Path, PathBuf};

use qclt::engine::{default_zeta_grid, StepsizeSchedule};
use qclt::fixture::{self, RandomMdpSpec};
use qclt::MdpModel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const OUTPUT_DIR_ENV: &str = "QCLT_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha: f64,
    pub b: f64,
    pub beta: f64,
}

impl ScheduleConfig {
    pub fn schedule(&self) -> Result<StepsizeSchedule, CliError> {
        StepsizeSchedule::polynomial(self.alpha, self.b, self.beta)
            .map_err(|e| CliError::config("schedule", e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modes {
    pub track_sandwich: bool,
    pub instrumented_terms: bool,
    pub emit_samples: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_path: Option<PathBuf>,
    pub master_seed: u64,
    pub replicas: usize,
    pub k_grid: Vec<usize>,
    #[serde(default = "default_zeta_grid")]
    pub zeta_grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub modes: Modes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<RandomMdpSpec>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let field = match line {
                Some(l) => format!("line {l}"),
                None => "config".into(),
            };
            CliError::config(field, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Field-level checks shared by every subcommand.
    pub fn validate(&self) -> Result<(), CliError> {
        // TOML integers are signed 64-bit.
        if self.master_seed > i64::MAX as u64 {
            return Err(CliError::config("master_seed", "must be at most 2^63 - 1"));
        }
        if self.replicas < 2 {
            return Err(CliError::config(
                "replicas",
                format!("{} replicas; at least 2 are required", self.replicas),
            ));
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return Err(CliError::config("k_grid", "must be a nonempty list of positive horizons"));
        }
        let zeta_ok = !self.zeta_grid.is_empty()
            && self.zeta_grid.iter().all(|z| *z > 0.0 && *z <= 1.0)
            && self.zeta_grid.windows(2).all(|w| w[0] < w[1]);
        if !zeta_ok {
            return Err(CliError::config("zeta_grid", "must be strictly increasing in (0, 1]"));
        }
        self.schedule.schedule()?;
        Ok(())
    }

    /// Additional checks for the CLT-producing subcommands.
    pub fn validate_for_clt(&self) -> Result<(), CliError> {
        self.validate()?;
        let beta = self.schedule.beta;
        if !(beta > 0.5 && beta < 1.0) {
            return Err(CliError::config("schedule.beta", format!("{beta} outside (0.5, 1)")));
        }
        Ok(())
    }

    pub fn max_horizon(&self) -> usize {
        self.k_grid.iter().copied().max().unwrap_or(0)
    }
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory that relative paths in the file are resolved against.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        let config = ExperimentConfig::parse(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir })
    }

    /// Fixture identifier and model; the shipped fixture when no path is set.
    pub fn model(&self) -> Result<(String, MdpModel), CliError> {
        match &self.config.fixture_path {
            None => Ok((fixture::DEFAULT_FIXTURE_ID.into(), fixture::default_fixture())),
            Some(p) => {
                let path = self.base_dir.join(p);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| CliError::config("fixture_path", format!("{}: {e}", path.display())))?;
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "fixture".into());
                Ok((id, fixture::parse_fixture(&text)?))
            }
        }
    }

    /// Output directory from the file, else from the environment; created
    /// if missing.
    pub fn output_dir(&self) -> Result<PathBuf, CliError> {
        let dir = match &self.config.output_dir {
            Some(d) => self.base_dir.join(d),
            None => match std::env::var_os(OUTPUT_DIR_ENV) {
                Some(d) => PathBuf::from(d),
                None => {
                    return Err(CliError::config(
                        "output_dir",
                        format!("not set in the config and {OUTPUT_DIR_ENV} is unset"),
                    ))
                }
            },
        };
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::config("output_dir", format!("{}: {e}", dir.display())))?;
        let probe = dir.join(".qclt-write-probe");
        std::fs::write(&probe, b"")
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| CliError::config("output_dir", format!("{} is not writable: {e}", dir.display())))?;
        Ok(dir)
    }
}

/// SHA-256 over the canonical config (without `output_dir`) and the
/// canonical fixture text, as lowercase hex.
pub fn config_hash(config: &ExperimentConfig, model: &MdpModel) -> String {
    let mut canonical = config.clone();
    canonical.output_dir = None;
    canonical.fixture_path = None;
    let mut h = Sha256::new();
    h.update(canonical.to_toml().as_bytes());
    h.update(b"\n--fixture--\n");
    h.update(fixture::write_fixture(model).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
master_seed = 7
replicas = 100
k_grid = [1000, 10000]

[schedule]
alpha = 32.0
b = 182.0
beta = 0.6666666666666666
"#;

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.zeta_grid, default_zeta_grid());
        assert_eq!(c.modes, Modes::default());
        assert!(c.fixture_path.is_none() && c.generator.is_none());
        c.validate_for_clt().unwrap();
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let c = ExperimentConfig::parse(SAMPLE).unwrap();
        let text = c.to_toml();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn schema_errors_carry_a_location() {
        let e = ExperimentConfig::parse(&SAMPLE.replace("replicas = 100", "replicas = \"many\"")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("line 3"), "{e}");
        let e = ExperimentConfig::parse(&format!("{SAMPLE}\nbogus = 1\n")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn range_checks_name_the_field() {
        let mut c = ExperimentConfig::parse(SAMPLE).unwrap();
        c.replicas = 0;
        assert!(c.validate().unwrap_err().to_string().contains("replicas"));
        c.replicas = 100;
        c.schedule.beta = 0.4;
        assert!(c.validate_for_clt().unwrap_err().to_string().contains("schedule"));
        c.schedule = ScheduleConfig { alpha: 2.0, b: 1.0, beta: 0.7 };
        assert!(c.validate().unwrap_err().to_string().contains("schedule"));
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let m = fixture::default_fixture();
        let c = ExperimentConfig::parse(SAMPLE).unwrap();
        let mut moved = c.clone();
        moved.output_dir = Some("elsewhere".into());
        assert_eq!(config_hash(&c, &m), config_hash(&moved, &m));
        let mut reseeded = c.clone();
        reseeded.master_seed = 8;
        assert_ne!(config_hash(&c, &m), config_hash(&reseeded, &m));
        assert_eq!(config_hash(&c, &m).len(), 64);
    }
}
