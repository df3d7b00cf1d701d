//! Layered run configuration. Built-in defaults, then an optional TOML file,
//! then `key.path=value` overrides. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body_retarget::BodyRetargetConfig;
use crate::collision::ClassifierTraining;
use crate::control::ControlConfig;
use crate::energy::EnergyConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::human_model::SamplerConfig;
use crate::models::ModelStore;
use crate::pipeline::{PipelineConfig, PipelineContext};
use crate::retargeter::{GdSettings, OracleSettings, RetargeterNetwork, RetargeterTraining};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of chain and skeleton files; bundled copies when unset.
    pub models_dir: Option<PathBuf>,
    pub retargeter_weights: Option<PathBuf>,
    pub collision_weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetargeterDataConfig {
    /// Number of sampled training poses.
    pub poses: usize,
    pub seed: u64,
}

impl Default for RetargeterDataConfig {
    fn default() -> Self {
        RetargeterDataConfig {
            poses: 20_000,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionDataConfig {
    /// Labeled configurations drawn for classifier training.
    pub samples: usize,
    pub seed: u64,
}

impl Default for CollisionDataConfig {
    fn default() -> Self {
        CollisionDataConfig {
            samples: 200_000,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub paths: PathsConfig,
    pub energy: EnergyConfig,
    pub sampler: SamplerConfig,
    pub oracle: OracleSettings,
    pub gd: GdSettings,
    pub retargeter_data: RetargeterDataConfig,
    pub retargeter_training: RetargeterTraining,
    pub collision_data: CollisionDataConfig,
    pub collision_training: ClassifierTraining,
    pub body_retarget: BodyRetargetConfig,
    pub control: ControlConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

/// Sets `path` (dot separated) in `table`, creating intermediate tables.
/// The value is parsed as a TOML value, falling back to a bare string.
fn set_path(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty());
    let Some(last) = last else {
        return Err(Error::Config(format!("empty override key in '{path}'")));
    };
    let mut cur = table;
    for k in keys {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{path}': '{k}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl Config {
    /// Resolves defaults, then `file`, then `overrides` of the form
    /// `section.key=value`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (source, mut table) = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let table = text
                    .parse::<toml::Table>()
                    .map_err(|e| toml_error(path, &text, e))?;
                (path.display().to_string(), table)
            }
            None => ("<defaults>".to_string(), toml::Table::new()),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Parse {
            source_name: source,
            location: "config".into(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Parse {
            source_name: "<string>".into(),
            location: span_line(text, e.span()),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.energy.validate()?;
        self.body_retarget.validate()?;
        self.control.validate()?;
        if self.eval.lambdas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("eval.lambdas must be strictly increasing".into()));
        }
        if self.pipeline.shutdown_timeout_s <= 0.0 || self.pipeline.channel_capacity == 0 {
            return Err(Error::Config(
                "pipeline timeout and channel capacity must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Sets every seed to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.oracle.seed = seed;
        self.retargeter_data.seed = seed;
        self.retargeter_training.seed = seed;
        self.collision_data.seed = seed;
        self.collision_training.seed = seed;
        self
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Writes the resolved configuration next to an output artifact.
    pub fn write_sidecar(&self, artifact: &Path) -> Result<PathBuf> {
        let path = crate::pipeline::sidecar_path(artifact, ".config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Model files come from `paths.models_dir`, else the environment
    /// override, else the bundled copies.
    pub fn model_store(&self) -> ModelStore {
        match &self.paths.models_dir {
            Some(dir) => ModelStore::from_dir(dir),
            None => ModelStore::from_env(),
        }
    }

    pub fn pipeline_context(&self, network: Option<Arc<RetargeterNetwork>>) -> Result<PipelineContext> {
        let store = self.model_store();
        Ok(PipelineContext {
            hand_chain: Arc::new(store.hand_chain()?),
            arm_chain: Arc::new(store.arm_chain()?),
            hand_model: Arc::new(store.human_hand()?),
            body_model: Arc::new(store.human_body()?),
            network,
            energy: self.energy.clone(),
            gd: self.gd.clone(),
            body: self.body_retarget.clone(),
            control: self.control.clone(),
            pipeline: self.pipeline.clone(),
        })
    }
}

fn span_line(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) => format!(
            "line {}",
            text[..s.start.min(text.len())].matches('\n').count() + 1
        ),
        None => "config".into(),
    }
}

fn toml_error(path: &Path, text: &str, e: toml::de::Error) -> Error {
    Error::Parse {
        source_name: path.display().to_string(),
        location: span_line(text, e.span()),
        message: e.message().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        let back = Config::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn file_layer_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.toml");
        std::fs::write(
            &path,
            "[control]\nalpha = 0.5\n[energy]\nfinger_palm_scale = 0.6\n",
        )
        .unwrap();
        let cfg = Config::resolve(
            Some(&path),
            &[
                "control.alpha=0.3".into(),
                "pipeline.mode=lockstep".into(),
                "gd.steps=7".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.control.alpha, 0.3);
        assert_eq!(cfg.control.clip_pos_m, ControlConfig::default().clip_pos_m);
        assert_eq!(cfg.energy.c[0], 0.6);
        assert_eq!(cfg.gd.steps, 7);
        assert_eq!(cfg.pipeline.mode, crate::pipeline::ExecutionMode::Lockstep);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml_str("[control]\nalpah = 0.5\n").is_err());
        assert!(Config::from_toml_str("bogus = 1\n").is_err());
        assert!(Config::resolve(None, &["gd.nope=1".into()]).is_err());
        assert!(Config::resolve(None, &["gd".into()]).is_err());
    }

    #[test]
    fn parse_error_names_line() {
        let err = Config::from_toml_str("[gd]\nsteps = 1\nsteps = 2\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::resolve(None, &["control.alpha=0".into()]).is_err());
        assert!(Config::resolve(None, &["eval.lambdas=[0.5, 0.2]".into()]).is_err());
    }

    #[test]
    fn seed_changes_hash() {
        let a = Config::default();
        let b = Config::default().with_seed(99);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b.collision_training.seed, 99);
    }
}
