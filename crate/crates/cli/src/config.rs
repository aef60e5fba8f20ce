//! Experiment configuration: a TOML file with `[model]` and `[train]` tables,
//! patched by `--set section.key=value` overrides.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use d2am::data_synth::DatasetSpec;
use d2am::meta_trainer::HyperParams;
use d2am::model::ModelConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: HyperParams,
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!("override {assignment:?} is not of the form section.key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields one item");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .with_context(|| format!("{p} in {key} is not a table"))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn read_table(path: Option<&Path>) -> Result<Table> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(Table::new()),
    }
}

/// Which geometry keys the user set; the rest follow the dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExplicitSizes {
    pub image: bool,
    pub depth: bool,
}

pub fn load_experiment(path: Option<&Path>, overrides: &[String]) -> Result<(ExperimentConfig, ExplicitSizes)> {
    let mut table = read_table(path)?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let model = table.get("model").and_then(Value::as_table);
    let sizes = ExplicitSizes {
        image: model.is_some_and(|m| m.contains_key("image_size")),
        depth: model.is_some_and(|m| m.contains_key("depth_size")),
    };
    let cfg: ExperimentConfig = Value::Table(table)
        .try_into()
        .context("invalid experiment configuration")?;
    Ok((cfg, sizes))
}

/// Dataset spec from a TOML or JSON file, or the default desk spec.
pub fn load_dataset_spec(path: Option<&Path>, overrides: &[String]) -> Result<DatasetSpec> {
    let mut table = match path {
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            toml::Table::try_from(v).context("spec JSON must be an object")?
        }
        Some(p) => read_table(Some(p))?,
        None => Table::try_from(DatasetSpec::desk_default(0))?,
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Value::Table(table).try_into().context("invalid dataset spec")
}
