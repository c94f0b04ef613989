//! Kit-wide TOML configuration and the per-run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expert::ExpertConfig;
use crate::policy::PolicyConfig;
use crate::scenario::ScenarioConfig;
use crate::seed::derive_seed;
use crate::sim::SimConfig;
use crate::track::shapes::TrackShape;
use crate::track::{ParseOptions, RacelineConfig, RacelineId};
use crate::trainer::TrainerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid [{section}] section: {reason}")]
    Invalid { section: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackSection {
    /// A track CSV; when set, the generator fields are ignored.
    pub file: Option<PathBuf>,
    pub shape: TrackShape,
    pub length: f64,
    pub width: f64,
    pub spacing: f64,
    pub parse: ParseOptions,
}

impl Default for TrackSection {
    fn default() -> Self {
        Self { file: None, shape: TrackShape::Stadium, length: 70.0, width: 3.5, spacing: 0.25, parse: ParseOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub laps_target: usize,
    pub single_raceline: RacelineId,
    /// Held-out h2h scenarios use their own spawn phase so they differ from training spawns.
    pub heldout_k: usize,
    pub heldout_phase: f64,
    pub heldout_count: usize,
    pub noise_levels: Vec<f64>,
    pub latency_samples: usize,
    /// Single-agent runs are cut off after `laps_target · L / min_mean_speed` seconds.
    pub min_mean_speed: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            laps_target: 10,
            single_raceline: RacelineId::CENTER,
            heldout_k: 6,
            heldout_phase: 0.5,
            heldout_count: 50,
            noise_levels: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            latency_samples: 10_000,
            min_mean_speed: 1.0,
        }
    }
}

/// Output locations, relative to the run's `--out` directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self { dataset: "dataset".into(), checkpoint: "policy.ckpt".into(), reports: "reports".into() }
    }
}

/// Every tunable of the pipeline. The `seed` fields of `[scenario]` and
/// `[trainer]` are overwritten with streams derived from the global `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct KitConfig {
    pub seed: u64,
    pub track: TrackSection,
    pub raceline: RacelineConfig,
    pub sim: SimConfig,
    pub expert: ExpertConfig,
    pub scenario: ScenarioConfig,
    pub policy: PolicyConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

fn invalid(section: &'static str, e: impl ToString) -> ConfigError {
    ConfigError::Invalid { section, reason: e.to_string() }
}

impl KitConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let mut cfg: KitConfig = toml::from_str(s)?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&s)
    }

    /// Sets the per-stage seeds from the global one.
    pub fn derive_seeds(&mut self) {
        self.scenario.seed = derive_seed(self.seed, "scenario", 0);
        self.trainer.seed = derive_seed(self.seed, "train", 0);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.track;
        if t.file.is_none() && !(t.length > 0.0 && t.width > 0.0 && t.spacing > 0.0) {
            return Err(invalid("track", "length, width and spacing must be positive"));
        }
        self.sim.validate().map_err(|e| invalid("sim", e))?;
        self.expert.validate().map_err(|e| invalid("expert", e))?;
        self.scenario.validate(&self.sim).map_err(|e| invalid("scenario", e))?;
        self.policy.validate().map_err(|e| invalid("policy", e))?;
        self.trainer.validate().map_err(|e| invalid("trainer", e))?;
        if self.policy.n_beams != self.sim.n_beams {
            return Err(invalid(
                "policy",
                format!("n_beams {} differs from sim.n_beams {}", self.policy.n_beams, self.sim.n_beams),
            ));
        }
        let e = &self.eval;
        if e.laps_target == 0 || e.heldout_k == 0 || e.heldout_count == 0 {
            return Err(invalid("eval", "laps_target, heldout_k and heldout_count must be positive"));
        }
        if !(0.0..1.0).contains(&e.heldout_phase) {
            return Err(invalid("eval", "heldout_phase must lie in [0, 1)"));
        }
        if e.noise_levels.iter().any(|x| !(0.0..=1.0).contains(x)) || e.noise_levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("eval", "noise_levels must be strictly increasing values in [0, 1]"));
        }
        if e.latency_samples < 1000 {
            return Err(invalid("eval", "latency_samples must be at least 1000"));
        }
        if !(e.min_mean_speed > 0.0) {
            return Err(invalid("eval", "min_mean_speed must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the resolved config; independent of key order in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&canonical))
    }

    /// The derived section seeds are written as 0; loading recomputes them.
    /// Fails if the global seed does not fit a TOML integer (above `i64::MAX`).
    pub fn to_toml(&self) -> Result<String, toml::ser::Error> {
        let mut c = self.clone();
        c.scenario.seed = 0;
        c.trainer.seed = 0;
        toml::to_string_pretty(&c)
    }

    pub fn resolve(&self, out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub started: String,
    pub finished: String,
    /// Paths relative to the output directory, sorted.
    pub outputs: Vec<String>,
}

impl RunManifest {
    /// Writes to a temporary file and renames it into place.
    pub fn write_atomic(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let tmp = dir.join(format!(".{RUN_MANIFEST_FILE}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, self)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
