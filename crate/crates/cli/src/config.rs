//! Experiment configuration: one TOML or JSON file, with dotted
//! `--section.key=value` overrides applied on top.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slotfill::corpus::{load_dataset, Dataset, DatasetFormat, SchemaRegistry};
use slotfill::evaluator::ProtocolConfig;
use slotfill::model::ModelConfig;
use slotfill::nn::WordEmbeddingTable;
use slotfill::sampler::SamplerConfig;
use slotfill::trainer::TrainConfig;
use slotfill::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub format: String,
    pub schemas: Option<PathBuf>,
    /// Renamed copy of the dataset for the cross-schema protocol.
    pub eval_dataset: Option<PathBuf>,
    pub eval_schemas: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: None,
            format: "native".into(),
            schemas: None,
            eval_dataset: None,
            eval_schemas: None,
            embeddings: None,
            output_dir: PathBuf::from("run"),
        }
    }
}

/// Leave-one-intent-out split used by `train`; no target means training
/// on everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub target: Option<String>,
    pub n_target: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub paths: PathsConfig,
    pub split: SplitConfig,
    pub sampler: SamplerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    /// Per-intent slot renames for building the cross-schema copy when no
    /// `paths.eval_dataset` is given.
    pub rename: BTreeMap<String, BTreeMap<String, String>>,
}

/// Parses `value` as JSON when possible (numbers, booleans, arrays),
/// otherwise as a plain string.
fn parse_value(value: &str) -> serde_json::Value {
    serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()))
}

/// Sets `a.b.c = value` inside `root`, creating objects on the way.
pub fn apply_override(root: &mut serde_json::Value, key: &str, value: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!(
                "override `{key}` goes through a non-table value"
            )));
        }
        node = node
            .as_object_mut()
            .expect("checked")
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` goes through a non-table value")))?;
    obj.insert(parts[parts.len() - 1].to_string(), parse_value(value));
    Ok(())
}

/// Splits raw arguments into dotted overrides and the rest.
pub fn extract_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        if let Some((key, value)) = arg.strip_prefix("--").and_then(|a| a.split_once('=')) {
            if key.contains('.') {
                overrides.push((key.to_string(), value.to_string()));
                continue;
            }
        }
        rest.push(arg);
    }
    (rest, overrides)
}

fn read_value(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        Ok(serde_json::from_str(&text)?)
    } else {
        let value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(value).map_err(Error::from)
    }
}

impl ExperimentConfig {
    /// Loads `path` (if any), applies overrides and resolves relative paths
    /// against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = match path {
            Some(p) => read_value(p)?,
            None => serde_json::json!({}),
        };
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        if let Some(base) = path.and_then(Path::parent) {
            cfg.paths.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.format()?;
        self.sampler.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn format(&self) -> Result<DatasetFormat> {
        self.paths.format.parse()
    }

    /// Main dataset with the schema file applied, if one is configured.
    pub fn dataset(&self) -> Result<Dataset> {
        let path = self
            .paths
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Config("paths.dataset is not set".into()))?;
        load_with_schemas(path, self.format()?, self.paths.schemas.as_deref())
    }

    pub fn eval_dataset(&self) -> Result<Option<Dataset>> {
        match &self.paths.eval_dataset {
            Some(p) => Ok(Some(load_with_schemas(
                p,
                self.format()?,
                self.paths.eval_schemas.as_deref(),
            )?)),
            None => Ok(None),
        }
    }

    /// Word table from `paths.embeddings`, or a seeded random table over
    /// the vocabulary of `datasets` when the file is not configured or
    /// missing.
    pub fn embeddings(&self, datasets: &[&Dataset]) -> Result<WordEmbeddingTable<f32>> {
        if let Some(path) = &self.paths.embeddings {
            if path.exists() {
                let table = WordEmbeddingTable::load(path, self.train.seed)?;
                if table.dim() != self.model.d_w {
                    return Err(Error::Config(format!(
                        "{} has dimension {}, model.d_w is {}",
                        path.display(),
                        table.dim(),
                        self.model.d_w
                    )));
                }
                return Ok(table);
            }
            log::warn!(
                "embedding file {} not found; using a seeded random table",
                path.display()
            );
        } else {
            log::warn!("no embedding file configured; using a seeded random table");
        }
        let vocab = vocabulary(datasets);
        Ok(WordEmbeddingTable::random(
            vocab.iter().map(String::as_str),
            self.model.d_w,
            self.train.seed,
        ))
    }
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.dataset,
            &mut self.schemas,
            &mut self.eval_dataset,
            &mut self.eval_schemas,
            &mut self.embeddings,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output_dir);
    }
}

pub fn load_with_schemas(
    path: &Path,
    format: DatasetFormat,
    schemas: Option<&Path>,
) -> Result<Dataset> {
    let data = load_dataset(path, format)?;
    match schemas {
        Some(s) => {
            let mut registry = SchemaRegistry::load(s)?;
            // Slots seen in the data but absent from the file keep their
            // inferred defaults.
            let mut inferred = data.registry().clone();
            for (intent, schema) in registry.iter() {
                inferred.upsert(intent, schema.clone());
            }
            registry = inferred;
            data.with_registry(registry)
        }
        None => Ok(data),
    }
}

/// Lower-cased tokens of utterances, descriptions and example values.
pub fn vocabulary(datasets: &[&Dataset]) -> BTreeSet<String> {
    let mut vocab = BTreeSet::new();
    for d in datasets {
        for f in d.frames() {
            vocab.extend(f.tokens.iter().map(|t| t.to_lowercase()));
        }
        for (_, schema) in d.registry().iter() {
            vocab.extend(schema.description_tokens.iter().cloned());
            vocab.extend(
                schema
                    .example_values
                    .iter()
                    .flatten()
                    .map(|t| t.to_lowercase()),
            );
        }
    }
    vocab
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed() {
        let mut v = serde_json::json!({"train": {"total_steps": 5}});
        apply_override(&mut v, "train.total_steps", "12").unwrap();
        apply_override(&mut v, "model.use_examples", "false").unwrap();
        apply_override(&mut v, "protocol.k", "[1,2]").unwrap();
        apply_override(&mut v, "paths.dataset", "data.jsonl").unwrap();
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.train.total_steps, 12);
        assert!(!cfg.model.use_examples);
        assert_eq!(cfg.protocol.k, [1, 2]);
        assert_eq!(cfg.paths.dataset.unwrap(), PathBuf::from("data.jsonl"));
    }

    #[test]
    fn override_extraction() {
        let args = [
            "slotfill",
            "train",
            "--config",
            "c.toml",
            "--train.seed=3",
            "--resume",
        ]
        .map(String::from)
        .to_vec();
        let (rest, ov) = extract_overrides(args);
        assert_eq!(
            rest,
            ["slotfill", "train", "--config", "c.toml", "--resume"]
        );
        assert_eq!(ov, [("train.seed".to_string(), "3".to_string())]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let r = ExperimentConfig::load(None, &[("train.total_stepz".into(), "3".into())]);
        assert!(matches!(r, Err(Error::Config(_))));
        let r = ExperimentConfig::load(None, &[("model.d_en".into(), "7".into())]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn toml_file_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        fs::write(
            &path,
            "[paths]\ndataset = \"d.jsonl\"\n[train]\ntotal_steps = 7\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.paths.dataset.unwrap(), dir.path().join("d.jsonl"));
        assert_eq!(cfg.paths.output_dir, dir.path().join("run"));
        assert_eq!(cfg.train.total_steps, 7);
    }
}
