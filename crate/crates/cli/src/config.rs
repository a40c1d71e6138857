//! Run configuration: a JSON file merged with `--set key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use timeperceiver::data::{chronological_split, load_csv, DatasetBundle, RATIO_6_2_2};
use timeperceiver::evaluation::{ImputationConfig, Protocol};
use timeperceiver::formulation::Strategy;
use timeperceiver::model::{EncoderVariant, ModelConfig};
use timeperceiver::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Train/val/test fractions.
    pub split: [f64; 3],
    /// Z-score every channel with train-split statistics before RevIN.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            split: RATIO_6_2_2,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub name: String,
    /// Keys overriding the top-level `model` section.
    #[serde(default)]
    pub model: Map<String, Value>,
    /// Keys overriding the top-level `train` section.
    #[serde(default)]
    pub train: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<VariantSpec>,
    pub seeds: Vec<u64>,
    pub protocol: Protocol,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
            protocol: Protocol::Forecast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileConfig {
    pub token_counts: Vec<usize>,
    pub variants: Vec<EncoderVariant>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            token_counts: vec![56, 112, 224, 448],
            variants: vec![
                EncoderVariant::LatentBottleneck,
                EncoderVariant::FullSelfAttn,
                EncoderVariant::DecoupledSelfAttn,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnConfig {
    /// Number of test windows to export, evenly spaced over the split.
    pub windows: usize,
    pub strategy: Strategy,
    /// Also write one CSV per attention head.
    pub per_head: bool,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            windows: 1,
            strategy: Strategy::Standard,
            per_head: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub imputation: ImputationConfig,
    pub ablation: AblationConfig,
    pub profile: ProfileConfig,
    pub attn: AttnConfig,
}

/// Parses a `--set` value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Writes `value` at a dotted path, creating intermediate objects.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("malformed --set key {key:?}")));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Validation(format!("--set {key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("non-empty key")
}

/// Applies `key=value` overrides in order.
pub fn apply_overrides(root: &mut Value, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects key=value, got {s:?}")))?;
        set_dotted(root, k.trim(), parse_value(v.trim()))?;
    }
    Ok(())
}

/// Reads a JSON file; syntax errors carry the file name, line and column.
pub fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Deserializes with the dotted path of the offending key in the message.
pub fn from_value<T: serde::de::DeserializeOwned>(value: Value, origin: &str) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        CliError::Validation(format!("{origin}: at {path}: {}", e.into_inner()))
    })
}

/// Config file plus overrides as a JSON tree.
pub fn load_tree(config: Option<&Path>, sets: &[String]) -> Result<Value, CliError> {
    let mut root = match config {
        Some(p) => read_json(p)?,
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::Validation("config root must be a JSON object".into()));
    }
    apply_overrides(&mut root, sets)?;
    Ok(root)
}

/// Loaded data and the config resolved against it.
pub struct Resolved {
    pub run: RunConfig,
    pub bundle: Option<DatasetBundle>,
}

fn is_set(tree: &Value, section: &str, key: &str) -> bool {
    tree.get(section).and_then(|s| s.get(key)).is_some()
}

/// Builds the run config, loads data when a path is configured and checks
/// every constraint, reporting all problems at once.
pub fn resolve(tree: Value, origin: &str, seed: Option<u64>, need_data: bool) -> Result<Resolved, CliError> {
    let channels_set = is_set(&tree, "model", "channels");
    let mut run: RunConfig = from_value(tree, origin)?;
    if let Some(s) = seed {
        run.model.seed = s;
        run.train.seed = s;
        run.imputation.seed = s;
    }
    let mut problems = Vec::new();
    let bundle = match &run.data.path {
        Some(path) => match load_bundle(path, &run.data) {
            Ok(b) => Some(b),
            Err(e) => {
                problems.push(e);
                None
            }
        },
        None => {
            if need_data {
                problems.push("data.path is required for this command".into());
            }
            None
        }
    };
    if let Some(b) = &bundle {
        let c = b.series.channels();
        if !channels_set {
            run.model.channels = c;
        } else if run.model.channels != c {
            problems.push(format!("model.channels is {} but the data has {c} channels", run.model.channels));
        }
    }
    problems.extend(run.model.problems().into_iter().map(|p| format!("model: {p}")));
    problems.extend(run.train.problems().into_iter().map(|p| format!("train: {p}")));
    if run.eval.stride == 0 {
        problems.push("eval: stride must be positive".into());
    }
    if run.imputation.stride == 0 {
        problems.push("imputation: stride must be positive".into());
    }
    if problems.is_empty() {
        Ok(Resolved { run, bundle })
    } else {
        Err(CliError::Validation(problems.join("\n")))
    }
}

fn load_bundle(path: &Path, cfg: &DataConfig) -> Result<DatasetBundle, String> {
    let series = load_csv(path).map_err(|e| format!("data: {e}"))?;
    let bundle = chronological_split(series, cfg.split).map_err(|e| format!("data: {e}"))?;
    if !cfg.standardize {
        return Ok(bundle);
    }
    let (mean, std) = bundle.train_stats();
    Ok(DatasetBundle {
        series: bundle.series.standardized(&mean, &std),
        ..bundle
    })
}

/// Model and train configs for one ablation arm.
pub fn variant_configs(run: &RunConfig, v: &VariantSpec) -> Result<(ModelConfig, TrainConfig), CliError> {
    let merge = |base: Value, over: &Map<String, Value>| {
        let mut base = base;
        let obj = base.as_object_mut().expect("struct serializes to an object");
        for (k, val) in over {
            obj.insert(k.clone(), val.clone());
        }
        base
    };
    let model_tree = merge(serde_json::to_value(&run.model).expect("plain config"), &v.model);
    let train_tree = merge(serde_json::to_value(&run.train).expect("plain config"), &v.train);
    let origin = format!("ablation variant {:?}", v.name);
    Ok((from_value(model_tree, &origin)?, from_value(train_tree, &origin)?))
}
