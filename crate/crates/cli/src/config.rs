use std::path::{Path, PathBuf};

use emoter_core::datagen::{gen_synthetic_dataset, load_feature_container, ClassProfile, SyntheticConfig};
use emoter_core::trainer::{AblationFlags, HyperParams, Stage, TrainData};
use emoter_core::RngStream;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "EMOTER_SEED";

/// Where training data comes from: a feature container, or the synthetic
/// generator (the only source with face scenes for the sync stage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Names for container classes; defaults to `class0..`.
    pub class_names: Option<Vec<String>>,
    pub profile: String,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            class_names: None,
            profile: "meld".into(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds for `ablate`; defaults to five consecutive seeds from `seed`.
    pub seeds: Option<Vec<u64>>,
    pub data: DataConfig,
    /// Defaults to every stage the data supports.
    pub stages: Option<Vec<Stage>>,
    pub ablation: AblationFlags,
    pub output_dir: PathBuf,
    pub hyper: HyperParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: None,
            data: DataConfig::default(),
            stages: None,
            ablation: AblationFlags::default(),
            output_dir: PathBuf::from("runs"),
            hyper: HyperParams::default(),
        }
    }
}

fn parse_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Reads `path` (or defaults), applies `key=value` overrides to the
    /// `hyper` block, then the seed environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<serde_json::Value>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::json!({}),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{o}`")))?;
            let root = doc
                .as_object_mut()
                .ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
            let hyper = root.entry("hyper").or_insert_with(|| serde_json::json!({}));
            hyper
                .as_object_mut()
                .ok_or_else(|| CliError::Config("`hyper` must be an object".into()))?
                .insert(key.trim().to_string(), parse_value(value.trim()));
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
        }
        cfg.hyper.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| (self.seed..self.seed + 5).collect())
    }

    pub fn profile(&self) -> Result<ClassProfile, CliError> {
        ClassProfile::by_name(&self.data.profile)
            .ok_or_else(|| CliError::Config(format!("data.profile: unknown profile `{}` (meld, iemocap)", self.data.profile)))
    }

    /// Training data for `seed`; synthetic sets are regenerated per seed.
    pub fn train_data(&self, seed: u64) -> Result<TrainData, CliError> {
        match &self.data.path {
            Some(p) => {
                let fs = load_feature_container(p)?;
                Ok(TrainData::from_features(fs, self.data.class_names.clone())?)
            }
            None => {
                let profile = self.profile()?;
                let ds = gen_synthetic_dataset(&profile, &self.data.synthetic, &RngStream::new(seed).fork("data"))?;
                Ok(TrainData::from_synthetic(ds, &profile.class_names)?)
            }
        }
    }

    pub fn stages_for(&self, data: &TrainData) -> Vec<Stage> {
        self.stages.clone().unwrap_or_else(|| data.default_stages())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sed": 1}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p), &[]), Err(CliError::Config(_))));
        std::fs::write(&p, r#"{"hyper": {"epochs": 2}}"#).unwrap();
        let c = RunConfig::load(Some(&p), &["lr_fusion=0.01".into()]).unwrap();
        assert_eq!((c.hyper.epochs, c.hyper.lr_fusion, c.hyper.batch_size), (2, 0.01, 16));
        assert!(RunConfig::load(None, &["nope=1".into()]).is_err());
    }
}
