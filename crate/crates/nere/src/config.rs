//! Run configuration for the pipeline binary: a TOML file with one
//! section per stage, a global seed, and `--set section.key=value`
//! overrides. Unknown keys are rejected. Each stage's effective RNG seed
//! is `global_seed XOR section rng_seed` so one flag reseeds everything.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annindex::IndexConfig;
use crate::error::{NereError, Result};
use crate::recsys::{MfConfig, TrainConfig};
use crate::synthgen::SynthConfig;
use crate::textvec::GloveConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSection {
    #[serde(flatten)]
    pub glove: GloveConfig,
    /// co-occurrence window in tokens
    pub window: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection {
            glove: GloveConfig::default(),
            window: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesSection {
    /// sessions per window (inputs cover the first window-1)
    pub window: usize,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        FeaturesSection { window: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    pub embed_dim: usize,
    pub hidden: usize,
    pub dense_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: "both".into(),
            embed_dim: 16,
            hidden: 32,
            dense_dim: 128,
            init_seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendSection {
    pub m: usize,
}

impl Default for RecommendSection {
    fn default() -> Self {
        RecommendSection { m: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub synth: SynthConfig,
    pub embed: EmbedSection,
    pub features: FeaturesSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub index: IndexConfig,
    pub recommend: RecommendSection,
    pub mf: MfConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: "out".into(),
            synth: SynthConfig::default(),
            embed: EmbedSection::default(),
            features: FeaturesSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            index: IndexConfig::default(),
            recommend: RecommendSection::default(),
            mf: MfConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    toml::Value::String(raw.to_string())
}

impl RunConfig {
    /// Read a config file (or start from defaults when `path` is None)
    /// and apply `section.key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    NereError::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse()
                    .map_err(|e| NereError::Config(format!("bad config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            let (key_path, raw) = ov.split_once('=').ok_or_else(|| {
                NereError::Config(format!("override `{ov}` is not of the form section.key=value"))
            })?;
            let value = parse_override_value(raw);
            let segments: Vec<&str> = key_path.split('.').collect();
            let mut cursor = &mut table;
            for seg in &segments[..segments.len() - 1] {
                cursor = cursor
                    .entry(seg.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| {
                        NereError::Config(format!("`{seg}` in `{key_path}` is not a section"))
                    })?;
            }
            cursor.insert(segments[segments.len() - 1].to_string(), value);
        }
        // fill in defaults section by section so a sparse file works
        let merged = merge_defaults(table)?;
        merged
            .try_into()
            .map_err(|e| NereError::Config(format!("invalid configuration: {e}")))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }

    /// Per-stage effective seed.
    pub fn stage_seed(&self, stage_seed: u64) -> u64 {
        self.seed ^ stage_seed
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| NereError::Config(format!("cannot serialize config: {e}")))
    }
}

/// Overlay a sparse user table onto the serialized defaults so partially
/// specified sections keep their remaining default fields.
fn merge_defaults(user: toml::Table) -> Result<toml::Table> {
    let defaults = toml::Table::try_from(RunConfig::default())
        .map_err(|e| NereError::Config(format!("default config unserializable: {e}")))?;
    let mut merged = defaults;
    for (k, v) in user {
        match (merged.get_mut(&k), v) {
            (Some(toml::Value::Table(base)), toml::Value::Table(over)) => {
                for (ik, iv) in over {
                    base.insert(ik, iv);
                }
            }
            (_, v) => {
                merged.insert(k, v);
            }
        }
    }
    Ok(merged)
}

/// Artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Artifacts {
            dir: dir.to_path_buf(),
        }
    }

    pub fn catalog(&self) -> PathBuf {
        self.dir.join("catalog.jsonl")
    }
    pub fn sessions(&self) -> PathBuf {
        self.dir.join("sessions.jsonl")
    }
    pub fn glove(&self) -> PathBuf {
        self.dir.join("vectors.glove")
    }
    pub fn user_meta(&self) -> PathBuf {
        self.dir.join("user_meta.tensor")
    }
    pub fn set_meta(&self) -> PathBuf {
        self.dir.join("set_meta.tensor")
    }
    pub fn content(&self) -> PathBuf {
        self.dir.join("content.tensor")
    }
    pub fn target(&self) -> PathBuf {
        self.dir.join("target.tensor")
    }
    pub fn row_keys(&self) -> PathBuf {
        self.dir.join("row_keys.tsv")
    }
    pub fn step_ids(&self) -> PathBuf {
        self.dir.join("step_ids.tensor")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.json")
    }
    pub fn graph(&self) -> PathBuf {
        self.dir.join("graph.knng")
    }
    pub fn cache(&self) -> PathBuf {
        self.dir.join("recommendations.cache")
    }
    pub fn report_json(&self) -> PathBuf {
        self.dir.join("report.json")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
    pub fn ablation_json(&self) -> PathBuf {
        self.dir.join("ablation.json")
    }
    pub fn sweep_json(&self) -> PathBuf {
        self.dir.join("sweep.json")
    }
    pub fn heatmap_txt(&self) -> PathBuf {
        self.dir.join("attention.txt")
    }
    pub fn heatmap_pgm(&self) -> PathBuf {
        self.dir.join("attention.pgm")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.dir.join(format!("manifest_{command}.toml"))
    }

    /// Fail with the name of the command that produces a missing input.
    pub fn require(&self, path: &Path, producer: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(NereError::MissingArtifact {
                artifact: path.display().to_string(),
                producer: producer.to_string(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back: RunConfig = text.parse::<toml::Table>().unwrap().try_into().unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sparse_file_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 42\n[synth]\nn_users = 10\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.synth.n_users, 10);
        assert_eq!(cfg.synth.n_sets, SynthConfig::default().n_sets);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn overrides_apply_and_are_typed() {
        let cfg = RunConfig::load(
            None,
            &[
                "seed=9".to_string(),
                "synth.n_users=55".to_string(),
                "train.lr=0.01".to_string(),
                "model.variant=metadata".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.synth.n_users, 55);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.variant, "metadata");
    }

    #[test]
    fn unknown_keys_rejected_with_field_list() {
        let err = RunConfig::load(None, &["synth.bogus_key=1".to_string()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_key"), "{msg}");
        assert!(msg.contains("n_users"), "{msg}");
    }

    #[test]
    fn malformed_override_rejected() {
        assert!(RunConfig::load(None, &["no_equals_sign".to_string()]).is_err());
    }

    #[test]
    fn missing_artifact_names_producer() {
        let art = Artifacts::new(Path::new("/nonexistent"));
        let err = art
            .require(&art.checkpoint(), "train")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train"), "{msg}");
        assert!(msg.contains("model.ckpt"), "{msg}");
    }

    #[test]
    fn stage_seed_mixes_global_seed() {
        let mut cfg = RunConfig { seed: 0, ..RunConfig::default() };
        assert_eq!(cfg.stage_seed(5), 5);
        cfg.seed = 7;
        assert_ne!(cfg.stage_seed(5), 5);
    }
}
