//! Run-configuration resolution: defaults, config file, flags, then `--set`.

use std::path::{Path, PathBuf};

use mam_core::align::AlignMethod;
use mam_core::experiment::{DataSource, RunConfig};
use mam_core::trainer::TrainConfig;
use mam_core::{Error, Result};
use serde_json::Value;

/// Flags shared by `train` and `ablate`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration; may be partial.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.lr_x=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset directory, canonical CSV file, or `synthetic:NAME`.
    #[arg(long)]
    pub data: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Alignment method: llma, simclr, barlow, vicreg, mse or none.
    #[arg(long)]
    pub align: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn parse_data(src: &str) -> Result<DataSource> {
    if let Some(name) = src.strip_prefix("synthetic:") {
        mam_core::data::SyntheticSystem::preset(name).map_err(|e| Error::Config(format!("--data: {e}")))?;
        return Ok(DataSource::synthetic(name));
    }
    let path = PathBuf::from(src);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        Ok(DataSource::Csv {
            path,
            schema_x: "kinematics".into(),
            schema_y: "kinetics".into(),
            window_len: 300,
        })
    } else {
        Ok(DataSource::Directory { path })
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("--config {}: {e}", path.display())))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a
/// plain string. Every segment but the last must name an existing object.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set '{assignment}' is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: '{}' is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("--set {key}: unknown key '{}'", parts[..=i].join("."))))?;
    }
    unreachable!("split yields at least one segment")
}

fn default_for(data: &DataSource) -> Result<RunConfig> {
    match data {
        DataSource::Synthetic { system, .. } => {
            let mut cfg = RunConfig::desk_synthetic(system)?;
            cfg.data = data.clone();
            Ok(cfg)
        }
        _ => Ok(RunConfig {
            name: "desk".into(),
            data: data.clone(),
            train: TrainConfig::desk(1, 1),
            folds: Default::default(),
            eval: Default::default(),
        }),
    }
}

/// Resolves the run configuration. `base` (e.g. a resumed run's config) takes
/// the place of built-in defaults when given.
pub fn resolve(args: &CommonArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let file = args.config.as_deref().map(read_json).transpose()?;
    let data = match &args.data {
        Some(src) => Some(parse_data(src)?),
        None => match file.as_ref().and_then(|f| f.get("data")) {
            Some(v) => {
                Some(serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("--config data: {e}")))?)
            }
            None => None,
        },
    };
    let base = match base {
        Some(b) => b,
        None => default_for(data.as_ref().unwrap_or(&DataSource::synthetic("coupled")))?,
    };
    let mut value = serde_json::to_value(&base)?;
    if let Some(f) = file {
        merge(&mut value, f);
    }
    if let Some(d) = data {
        value["data"] = serde_json::to_value(d)?;
    }
    if let Some(seed) = args.seed {
        value["train"]["seed"] = seed.into();
    }
    if let Some(epochs) = args.epochs {
        value["train"]["epochs"] = epochs.into();
    }
    if let Some(align) = &args.align {
        let method: AlignMethod = align.parse().map_err(|e| Error::Config(format!("--align: {e}")))?;
        value["train"]["alignment"]["method"] = serde_json::to_value(method)?;
    }
    for s in &args.set {
        apply_override(&mut value, s)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
