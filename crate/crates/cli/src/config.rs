//! Run configuration: TOML file with `[data]`, `[model]`, `[train]`,
//! `[eval]` and `[builder]` sections. Layers, lowest first: built-in
//! defaults, the `[train]` preset, the file, `RSCLIP__SECTION__KEY`
//! environment variables, command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use rsclip_core::datamodel::SyntheticSceneSpec;
use rsclip_core::datasetbuilder::{RecaptionConfig, DEFAULT_QA_SAMPLES};
use rsclip_core::evalsuite::EvalConfig;
use rsclip_core::trainer::{ModelConfig, StageConfig, TrainConfig};

pub const ENV_PREFIX: &str = "RSCLIP__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSON-Lines manifest; synthetic scenes when absent.
    pub manifest: Option<PathBuf>,
    /// Evaluation manifest; defaults to `manifest`.
    pub eval_manifest: Option<PathBuf>,
    /// Directory of `<image_id>.png` label masks; defaults to `masks/`
    /// beside the evaluation manifest.
    pub masks_dir: Option<PathBuf>,
    /// JSON list of class names indexed by mask value; defaults to
    /// `classes.json` beside the evaluation manifest.
    pub classes: Option<PathBuf>,
    pub synthetic: SyntheticSceneSpec,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            eval_manifest: None,
            masks_dir: None,
            classes: None,
            synthetic: SyntheticSceneSpec::default(),
            n_train: 256,
            n_eval: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuilderConfig {
    /// `echo`, `fail` or `recorded`.
    pub captioner: String,
    pub recorded_responses: Option<PathBuf>,
    pub recaption: RecaptionConfig,
    pub qa_samples: usize,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            captioner: "echo".into(),
            recorded_responses: None,
            recaption: RecaptionConfig::default(),
            qa_samples: DEFAULT_QA_SAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; copied into `train.seed` on resolution.
    pub seed: u64,
    /// Named `[train]` starting point, see `TrainConfig::preset`.
    pub preset: Option<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub builder: BuilderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::toy(),
            builder: BuilderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn stage_config(&self) -> StageConfig {
        StageConfig {
            train: self.train.clone(),
            model: self.model.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Parses `text` as a TOML value, falling back to a plain string.
pub fn parse_scalar(text: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

fn merge(base: &mut Table, layer: &Table) {
    for (k, v) in layer {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(l)) => merge(b, l),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| anyhow!("empty config key"))?;
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("config key {} is not a section", path.join(".")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// One `section.key=value` override.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    pub fn new(dotted: &str, value: Value) -> Self {
        Self {
            path: dotted.split('.').map(str::to_string).collect(),
            value,
        }
    }

    /// Parses `a.b.c=value`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("override {spec:?} must look like section.key=value"))?;
        if k.trim().is_empty() {
            bail!("override {spec:?} has an empty key");
        }
        Ok(Self::new(k.trim(), parse_scalar(v.trim())))
    }
}

/// Overrides from `RSCLIP__SECTION__KEY=value` variables.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<Override> {
    let mut out: Vec<Override> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some(Override {
                path: rest.split("__").map(|p| p.to_lowercase()).collect(),
                value: parse_scalar(&v),
            })
        })
        .collect();
    out.sort_by(|a, b| a.path.cmp(&b.path));
    out
}

pub struct Resolved {
    pub config: RunConfig,
    /// The config file's text, echoed into run directories.
    pub source: Option<String>,
}

pub fn read_file(path: &Path) -> Result<(Table, String)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok((table, text))
}

/// Merges every layer and validates the result.
pub fn resolve(file: Option<&Path>, env: &[Override], cli: &[Override]) -> Result<Resolved> {
    let (file_table, source) = match file {
        Some(p) => {
            let (t, s) = read_file(p)?;
            (t, Some(s))
        }
        None => (Table::new(), None),
    };
    let layered = |defaults: RunConfig| -> Result<Table> {
        let Value::Table(mut base) = Value::try_from(defaults)? else {
            bail!("defaults did not serialize to a table");
        };
        merge(&mut base, &file_table);
        for o in env.iter().chain(cli) {
            set_path(&mut base, &o.path, o.value.clone())?;
        }
        Ok(base)
    };
    let first: RunConfig = Value::Table(layered(RunConfig::default())?)
        .try_into()
        .context("invalid configuration")?;
    let mut config = match &first.preset {
        Some(name) => {
            let defaults = RunConfig {
                train: TrainConfig::preset(name)?,
                ..RunConfig::default()
            };
            Value::Table(layered(defaults)?).try_into().context("invalid configuration")?
        }
        None => first,
    };
    config.train.seed = config.seed;
    config.stage_config().validate()?;
    Ok(Resolved { config, source })
}
