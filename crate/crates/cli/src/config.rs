//! Run configuration: JSON file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use worldkit_core::worldgen::{Policy, WorldParams, DEFAULT_EPISODE_LEN};
use worldkit_model::config::{ConfigError, LossMode, ModelConfig, TargetMode};
use worldkit_model::pretrain::PretrainOptions;
use worldkit_model::train::TrainOptions;

use crate::ablate::{AblationOptions, BenchmarkSpec};
use crate::error::CliError;

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub worlds: usize,
    pub world_seed: u64,
    pub params: WorldParams,
    pub samples_per_world: usize,
    /// Held-out samples per world, from a separate exploration seed.
    pub test_per_world: usize,
    pub policy: Policy,
    pub episode_len: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            worlds: 20,
            world_seed: 0,
            params: WorldParams::default(),
            samples_per_world: 250,
            test_per_world: 50,
            policy: Policy::CoverageWalk,
            episode_len: DEFAULT_EPISODE_LEN,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training corpus (file or directory).
    pub train: Option<PathBuf>,
    /// Test corpus for evaluation.
    pub test: Option<PathBuf>,
    /// Validation share carved from the training corpus.
    pub val_fraction: Option<f64>,
    /// Model checkpoint to evaluate or to start training from.
    pub checkpoint: Option<PathBuf>,
    /// Directory of vocabulary files that a checkpoint must match.
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub text: bool,
    pub graph: bool,
    pub options: PretrainOptions,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            text: true,
            graph: true,
            options: PretrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Score only the first `limit` test samples.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub benchmark: BenchmarkSpec,
    pub options: AblationOptions,
    /// Also run the single-task action rows of the action grid.
    pub action_grid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub gradient_coords: usize,
    pub random_cases: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            gradient_coords: 200,
            random_cases: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Named model preset; `model` overrides it entirely when present.
    pub preset: String,
    pub model: Option<ModelConfig>,
    pub world: WorldSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub train: TrainOptions,
    pub eval: EvalSection,
    pub ablate: AblateSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            preset: "desk".into(),
            model: None,
            world: WorldSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            train: TrainOptions::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
            verify: VerifySection::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub beam_width: Option<usize>,
    pub loss: Option<LossMode>,
    pub target: Option<TargetMode>,
    pub multitask: Option<bool>,
    pub budget: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies flag overrides, resolves the model preset and validates.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        let mut m = match self.model.take() {
            Some(m) => m,
            None => ModelConfig::preset(&self.preset).map_err(config_err)?,
        };
        m.seed = self.seed;
        if let Some(w) = o.beam_width {
            m.beam_width = w;
            self.ablate.options.beam_width = w;
        }
        if let Some(l) = o.loss {
            m.loss = l;
        }
        if let Some(t) = o.target {
            m.target = t;
        }
        if let Some(mt) = o.multitask {
            m.multitask = mt;
        }
        if let Some(b) = o.budget {
            if !(b > 0.0 && b.is_finite()) {
                return Err(CliError::Config(format!("budget must be positive, got {b}")));
            }
            self.train.budget_secs = Some(b);
            self.ablate.options.budget_secs = Some(b);
        }
        m.validate().map_err(config_err)?;
        self.model = Some(m);
        if let Some(f) = self.data.val_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(CliError::Config(format!("val_fraction must be in (0, 1), got {f}")));
            }
        }
        if self.world.worlds == 0 || self.world.samples_per_world == 0 || self.world.test_per_world == 0 {
            return Err(CliError::Config("world generation needs at least one world and one sample".into()));
        }
        if self.ablate.options.seeds.is_empty() {
            return Err(CliError::Config("ablation needs at least one seed".into()));
        }
        Ok(self)
    }

    pub fn model_config(&self) -> &ModelConfig {
        self.model.as_ref().expect("resolved config carries a model")
    }

    /// Writes the resolved config, with a version header, into `out`.
    pub fn write_resolved(&self) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        let path = self.out.join(RESOLVED_CONFIG_FILE);
        let doc = serde_json::json!({
            "format_version": CONFIG_FORMAT_VERSION,
            "kind": "worldkit-config",
            "config": self,
        });
        let text = serde_json::to_string_pretty(&doc).expect("config serializes");
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// Reads a config file, accepting the resolved form written by
    /// [`RunConfig::write_resolved`].
    pub fn load_any(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("worldkit-config") => {
                let version = v.get("format_version").and_then(|x| x.as_u64());
                if version != Some(CONFIG_FORMAT_VERSION as u64) {
                    return Err(CliError::Config(format!("unsupported config version {version:?}")));
                }
                serde_json::from_value(v["config"].clone()).map_err(|e| CliError::Config(e.to_string()))
            }
            _ => Self::from_json(&text),
        }
    }
}

fn config_err(e: ConfigError) -> CliError {
    CliError::Config(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1}"#).is_ok());
        assert!(matches!(RunConfig::from_json(r#"{"sead": 1}"#), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"max_step": 3}}"#), Err(CliError::Config(_))));
    }

    #[test]
    fn flags_override_the_file() {
        let c = RunConfig::from_json(r#"{"seed": 1, "preset": "tiny"}"#).unwrap();
        let o = Overrides {
            seed: Some(9),
            loss: Some(LossMode::Seq),
            target: Some(TargetMode::Full),
            multitask: Some(false),
            beam_width: Some(3),
            budget: Some(5.0),
            ..Default::default()
        };
        let r = c.resolve(&o).unwrap();
        let m = r.model_config();
        assert_eq!((r.seed, m.seed, m.beam_width), (9, 9, 3));
        assert_eq!((m.loss, m.target, m.multitask), (LossMode::Seq, TargetMode::Full, false));
        assert_eq!(r.train.budget_secs, Some(5.0));
    }

    #[test]
    fn resolved_config_reproduces_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig {
            out: dir.path().to_path_buf(),
            preset: "tiny".into(),
            ..Default::default()
        }
        .resolve(&Overrides::default())
        .unwrap();
        let p = c.write_resolved().unwrap();
        let back = RunConfig::load_any(&p).unwrap().resolve(&Overrides::default()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let bad = [
            r#"{"preset": "huge"}"#,
            r#"{"data": {"val_fraction": 1.5}}"#,
            r#"{"world": {"worlds": 0}}"#,
        ];
        for b in bad {
            let r = RunConfig::from_json(b).and_then(|c| c.resolve(&Overrides::default()));
            assert!(matches!(r, Err(CliError::Config(_))), "{b}");
        }
        let zero_budget = Overrides {
            budget: Some(0.0),
            ..Default::default()
        };
        assert!(RunConfig::default().resolve(&zero_budget).is_err());
    }
}
