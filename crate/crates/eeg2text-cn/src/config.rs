//! One experiment configuration drives every stage. Files are TOML or JSON
//! (chosen by extension) and every field has a default, so a config file
//! only states what it changes. Dotted-key overrides (`--set a.b.c=value`)
//! are applied on top of whatever the file supplied.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bleu::CorpusMode;
use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::preprocess::{PrepareOptions, SplitSpec};
use crate::training::TrainConfig;

/// Stage directories that are inputs/outputs of more than one subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Raw corpus: written by `synth`, read by `prepare`.
    pub corpus_dir: PathBuf,
    /// Compressed corpus: written by `prepare`, read by `train`/`ablate`/
    /// `evaluate`.
    pub prepared_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("data/corpus"),
            prepared_dir: PathBuf::from("data/prepared"),
        }
    }
}

/// Preprocessing knobs (PCA size, split recipe).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    pub k_components: usize,
    pub split: SplitSpec,
    pub parallel: bool,
}

impl Default for PrepareSection {
    fn default() -> Self {
        let d = PrepareOptions::default();
        Self {
            k_components: d.k_components,
            split: d.split,
            parallel: d.parallel,
        }
    }
}

impl PrepareSection {
    pub fn to_options(&self) -> PrepareOptions {
        PrepareOptions {
            k_components: self.k_components,
            split: self.split.clone(),
            parallel: self.parallel,
        }
    }
}

/// Evaluation and BLEU-report options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `best`, `last`, or an explicit checkpoint path.
    pub checkpoint: String,
    /// Which split to decode: `train`, `val`, or `test`.
    pub split: String,
    /// Disable BLEU smoothing.
    pub raw: bool,
    pub corpus_mode: CorpusMode,
    /// Where predictions and reports go; defaults to
    /// `<train.checkpoint_dir>/eval`.
    pub out_dir: Option<PathBuf>,
    pub parallel: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: "best".to_string(),
            split: "test".to_string(),
            raw: false,
            corpus_mode: CorpusMode::Mean,
            out_dir: None,
            parallel: true,
        }
    }
}

/// The complete experiment description.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub prepare: PrepareSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl ExperimentConfig {
    /// Forces every stage onto the sequential execution path and zeroes the
    /// wall-time field of history records (`--deterministic`). Numeric
    /// results are bit-identical either way; this mode exists so acceptance
    /// runs exercise exactly one code path and emit byte-comparable files.
    pub fn force_sequential(&mut self) {
        self.train.parallel = false;
        self.train.record_wall_time = false;
        self.prepare.parallel = false;
        self.eval.parallel = false;
    }
}

/// Reads a config file, picking the parser from the extension
/// (`.toml` or `.json`).
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let value = read_config_value(path)?;
    from_value(value, path)
}

/// Parses a config file into a generic JSON tree (TOML maps losslessly for
/// our field types), so overrides can be applied before typing it.
pub fn read_config_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let fmt_err = |msg: String| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let t: toml::Value = toml::from_str(&text).map_err(|e| fmt_err(e.to_string()))?;
            serde_json::to_value(t).map_err(|e| fmt_err(e.to_string()))
        }
        Some("json") => serde_json::from_str(&text).map_err(|e| fmt_err(e.to_string())),
        other => Err(Error::Config(format!(
            "config {} has unsupported extension {:?} (expected .toml or .json)",
            path.display(),
            other.unwrap_or("none")
        ))),
    }
}

/// Types a generic config tree, reporting unknown keys.
pub fn from_value(value: Value, path: &Path) -> Result<ExperimentConfig> {
    serde_json::from_value(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}

/// Applies one `key=value` override with a dotted key path. The value is
/// parsed as JSON when possible (numbers, booleans, arrays); anything that
/// does not parse is taken as a plain string, so
/// `--set paths.corpus_dir=data/run1` works unquoted.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| {
        Error::Config(format!("override `{spec}` is not of the form key=value"))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let leaf: Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => Value::String(raw.to_string()),
    };

    let mut node = tree;
    let mut parts = key.split('.').peekable();
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key `{key}` has an empty segment")));
        }
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override key `{key}` descends into a non-table value"))
        })?;
        if parts.peek().is_none() {
            obj.insert(part.to_string(), leaf);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(serde_json::Map::new()));
    }
    unreachable!("split always yields at least one segment");
}

/// Loads a config (or the defaults when `path` is `None`) and applies
/// `--set` overrides in order.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut tree = match path {
        Some(p) => read_config_value(p)?,
        None => serde_json::to_value(ExperimentConfig::default())
            .expect("default config serializes"),
    };
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let src = path.unwrap_or_else(|| Path::new("<defaults>"));
    from_value(tree, src)
}

/// Cache root for pluggable embedders or downloaded model assets, from the
/// `EEG2TEXT_CACHE` environment variable. The built-in hash embedder needs
/// no files, so nothing is written here unless such a component is added.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("EEG2TEXT_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".cache/eeg2text-cn"))
}
