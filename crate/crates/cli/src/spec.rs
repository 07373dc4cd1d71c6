//! Experiment specs: TOML documents with `[data]`, `[model]`, `[trainer]`
//! and `[eval]` sections layered over the desk defaults.

use std::fs;
use std::path::{Path, PathBuf};

use doe_core::data::{make_gap_benchmark, Component, DataManifest, Datasets, GapConfig};
use doe_core::detection::Scorer;
use doe_core::trainers::TrainerConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const PRESETS: &[(&str, &str)] = &[
    ("gap-desk", include_str!("../presets/gap-desk.toml")),
    ("cifar", include_str!("../presets/cifar.toml")),
    ("imagenet", include_str!("../presets/imagenet.toml")),
];

const SECTIONS: &[&str] = &["data", "model", "trainer", "eval"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub trainer: TrainerConfig,
    pub eval: EvalSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    /// Dataset manifest; when absent the gap benchmark is generated.
    pub manifest: Option<PathBuf>,
    /// Benchmark seed; defaults to the run seed.
    pub seed: Option<u64>,
    pub n_per_split: usize,
    pub dim: usize,
    pub gap: GapConfig,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            manifest: None,
            seed: None,
            n_per_split: 2000,
            dim: 2,
            gap: GapConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { hidden: vec![32, 32] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub scorer: Scorer,
    pub bins: usize,
    /// Seeds swept by `ablate`.
    pub seeds: Vec<u64>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            scorer: Scorer::MaxLogit,
            bins: 40,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// The base every spec is layered over: the small-image profile with batch
/// sizes and a pretraining phase suited to the 2-D benchmark.
pub fn desk_defaults() -> ExperimentSpec {
    ExperimentSpec {
        trainer: TrainerConfig {
            id_batch: 32,
            ood_batch: 64,
            pretrain_epochs: 20,
            pretrain_lr: 0.05,
            ..TrainerConfig::cifar()
        },
        ..ExperimentSpec::default()
    }
}

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn toml_error(text: &str, e: &toml::de::Error) -> CliError {
    let (line, column) = e.span().map(|s| line_col(text, s.start)).unzip();
    CliError::Spec {
        message: e.message().to_string(),
        line,
        column,
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_table(spec: &ExperimentSpec) -> Table {
    match Value::try_from(spec).expect("specs serialize") {
        Value::Table(t) => t,
        _ => unreachable!("a struct serializes to a table"),
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::spec(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses `text` over the desk defaults. Relative manifest paths resolve
    /// against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        // The typed pass pins unknown keys and type errors to a position.
        toml::from_str::<ExperimentSpec>(text).map_err(|e| toml_error(text, &e))?;
        let user: Table = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        let mut table = to_table(&desk_defaults());
        merge(&mut table, user);
        let mut spec: ExperimentSpec = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::spec(e.message().to_string()))?;
        if let Some(m) = &spec.data.manifest {
            if m.is_relative() {
                spec.data.manifest = Some(base.join(m));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.trainer.validate().map_err(|e| CliError::spec(e.to_string()))?;
        match &self.data.manifest {
            Some(m) if !m.is_file() => {
                return Err(CliError::spec(format!("data.manifest `{}` does not exist", m.display())))
            }
            Some(_) => {}
            None => {
                if self.data.n_per_split < 100 {
                    return Err(CliError::spec("data.n_per_split must be at least 100"));
                }
                if self.data.dim < 2 {
                    return Err(CliError::spec("data.dim must be at least 2"));
                }
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(CliError::spec("model.hidden widths must be positive"));
        }
        if self.eval.bins < 2 {
            return Err(CliError::spec("eval.bins must be at least 2"));
        }
        if self.eval.seeds.is_empty() {
            return Err(CliError::spec("eval.seeds must not be empty"));
        }
        Ok(())
    }

    /// Fixes the run seed and, unless pinned, the benchmark seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.trainer.seed = seed;
        self.data.seed.get_or_insert(seed);
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("specs serialize")
    }

    /// Loads the manifest or generates the benchmark; generator components
    /// are returned alongside when generated.
    pub fn datasets(&self) -> anyhow::Result<(Datasets, Option<Vec<Component>>)> {
        match &self.data.manifest {
            Some(m) => Ok((DataManifest::load(m)?.load_datasets(m)?, None)),
            None => {
                let seed = self.data.seed.unwrap_or(self.trainer.seed);
                let b = make_gap_benchmark(seed, self.data.n_per_split, self.data.dim, &self.data.gap)?;
                Ok((b.datasets, Some(b.components)))
            }
        }
    }

    /// Sets a dotted key (`beta`, `dro.at_steps`, `model.hidden`, …) to a
    /// raw TOML value. Keys without a section prefix address `[trainer]`.
    /// The result is not validated, so several keys can change together.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self, CliError> {
        let mut path: Vec<&str> = key.split('.').collect();
        if !SECTIONS.contains(&path[0]) {
            path.insert(0, "trainer");
        }
        let value = parse_value(raw);
        let mut table = to_table(self);
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut cur = &mut table;
        for p in parents {
            cur = match cur.get_mut(*p) {
                Some(Value::Table(t)) => t,
                _ => return Err(CliError::spec(format!("unknown grid key `{key}`"))),
            };
        }
        cur.insert((*last).to_string(), value);
        let spec: ExperimentSpec = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            CliError::spec(format!("grid key `{key}` = `{raw}`: {}", e.message()))
        })?;
        Ok(spec)
    }
}

/// A TOML scalar or array when it parses as one, otherwise a string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// `key=v1,v2,…` from the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for GridAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (key, values) = s.split_once('=').ok_or_else(|| format!("expected key=v1,v2,… in `{s}`"))?;
        let values: Vec<String> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(format!("grid axis `{s}` has no key or no values"));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Cartesian product of the axes, one assignment list per cell.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |cells, axis| {
        cells
            .iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect()
    })
}
