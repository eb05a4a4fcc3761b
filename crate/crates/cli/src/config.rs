//! Experiment configuration: parsing, overrides and expansion into runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use ciss::model::ModelConfig;
use ciss::protocol::TrainConfig;
use ciss::synthdata::{DataParams, ScenarioPlan, Setting};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataParams,
    /// `"Nb-Nn"` or `"joint"`.
    pub scenario: String,
    #[serde(default = "default_setting")]
    pub setting: Setting,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Each seed sets both `data.seed` and `train.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablations: Vec<Ablation>,
    #[serde(default = "yes")]
    pub checkpoints: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub name: String,
    /// Dotted config paths and their replacement values.
    pub set: BTreeMap<String, Value>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_setting() -> Setting {
    Setting::Overlapped
}

fn yes() -> bool {
    true
}

/// One fully resolved entry of the experiment matrix.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub run_name: String,
    pub config: ExperimentConfig,
    /// The resolved config as written to the summary; running it again
    /// reproduces this run.
    pub echo: Value,
}

impl RunSpec {
    pub fn dir(&self) -> PathBuf {
        self.config.output_dir.join(&self.run_name)
    }
}

impl ExperimentConfig {
    pub fn plan(&self) -> ciss::Result<ScenarioPlan> {
        if self.scenario == "joint" {
            ScenarioPlan::joint(self.data.num_classes)
        } else {
            ScenarioPlan::parse(&self.scenario, self.data.num_classes, self.setting)
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        check_name("name", &self.name)?;
        self.data.validate().map_err(|e| field("data", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.model.validate().map_err(|e| field("model", e))?;
        self.plan().map_err(|e| field("scenario", e))?;
        if let Some(seeds) = &self.seeds {
            if seeds.is_empty() {
                return Err(CliError::Invalid("seeds: list is empty".into()));
            }
            if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
                return Err(CliError::Invalid("seeds: duplicate seed".into()));
            }
        }
        let mut names = BTreeSet::new();
        for (i, a) in self.ablations.iter().enumerate() {
            check_name(&format!("ablations[{i}].name"), &a.name)?;
            if !names.insert(&a.name) {
                return Err(CliError::Invalid(format!("ablations[{i}].name: duplicate name {:?}", a.name)));
            }
        }
        Ok(())
    }
}

fn field(name: &str, e: ciss::Error) -> CliError {
    CliError::Invalid(format!("{name}: {e}"))
}

fn check_name(what: &str, name: &str) -> CliResult<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(CliError::Invalid(format!(
            "{what}: {name:?} must be non-empty and use only letters, digits, '-', '_' or '.'"
        )))
    }
}

/// Parses a `key.path=value` override. The value is read as JSON and falls
/// back to a plain string.
pub fn parse_override(s: &str) -> CliResult<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Invalid(format!("override {s:?}: expected key=value")))?;
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(CliError::Invalid(format!("override {s:?}: malformed key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Sets `path` (dot separated) in `doc`, creating intermediate objects.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> CliResult<()> {
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            CliError::Invalid(format!("{path}: {} is not an object", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("paths have at least one part")
}

fn deserialize(doc: &Value, origin: &str) -> CliResult<ExperimentConfig> {
    serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { String::new() } else { format!(" at field `{path}`") };
        CliError::Invalid(format!("{origin}{at}: {}", e.inner()))
    })
}

/// Parses the config text with line-accurate diagnostics.
pub fn parse_text(text: &str, origin: &str) -> CliResult<Value> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let at = if path == "." { String::new() } else { format!(", field `{path}`") };
        let (line, col) = (inner.line(), inner.column());
        let msg = inner.to_string();
        let msg = msg.trim_end_matches(&format!(" at line {line} column {col}"));
        CliError::Invalid(format!("{origin}: line {line}, column {col}{at}: {msg}"))
    })?;
    cfg.validate().map_err(|e| e.context(origin))?;
    Ok(serde_json::from_str(text).expect("text already parsed"))
}

/// Reads a config file and applies command-line overrides.
pub fn load(path: &Path, overrides: &[String]) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let origin = path.display().to_string();
    let mut doc = parse_text(&text, &origin)?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_path(&mut doc, &k, v)?;
    }
    let cfg = deserialize(&doc, &format!("{origin} (after overrides)"))?;
    cfg.validate().map_err(|e| e.context(&format!("{origin} (after overrides)")))?;
    Ok(cfg)
}

/// Expands the base config, its ablations and its seeds into runs.
pub fn expand(cfg: &ExperimentConfig) -> CliResult<Vec<RunSpec>> {
    let mut base = cfg.clone();
    let ablations = std::mem::take(&mut base.ablations);
    let seeds = base.seeds.take();
    let base_doc = serde_json::to_value(&base).map_err(|e| CliError::Internal(e.to_string()))?;

    let mut variants = vec![(cfg.name.clone(), base.clone())];
    for (i, a) in ablations.iter().enumerate() {
        let origin = format!("ablations[{i}] ({})", a.name);
        let mut doc = base_doc.clone();
        for (k, v) in &a.set {
            set_path(&mut doc, k, v.clone()).map_err(|e| e.context(&origin))?;
        }
        let mut c = deserialize(&doc, &origin)?;
        c.name = format!("{}-{}", cfg.name, a.name);
        c.validate().map_err(|e| e.context(&origin))?;
        variants.push((c.name.clone(), c));
    }

    let mut out = Vec::new();
    for (name, c) in variants {
        let per_seed: Vec<ExperimentConfig> = match &seeds {
            None => vec![c],
            Some(list) => list
                .iter()
                .map(|&s| {
                    let mut x = c.clone();
                    x.data.seed = s;
                    x.train.seed = s;
                    x
                })
                .collect(),
        };
        for x in per_seed {
            let echo = serde_json::to_value(&x).map_err(|e| CliError::Internal(e.to_string()))?;
            out.push(RunSpec {
                run_name: format!("{name}_seed{}", x.train.seed),
                config: x,
                echo,
            });
        }
    }
    let mut dirs = BTreeSet::new();
    for r in &out {
        if !dirs.insert(r.dir()) {
            return Err(CliError::Invalid(format!("two runs share the directory {}", r.dir().display())));
        }
    }
    Ok(out)
}
