//! Experiment orchestration behind the `automaton-lab` binary.
//!
//! A run is described by one JSON document ([`ExperimentConfig`] for the
//! training commands, [`TheoryConfig`] for `theory`). Loading goes
//! through three layers: a named preset supplies the base values, the
//! file is merged over it, and `--set key=value` overrides are applied
//! last. The merged document is what gets echoed to `config.json`.

mod experiment;
mod theory_cmd;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dfa::{random_regular_task, DfaError, Dfa, parity_dfa};
use crate::extraction::{ExtractionConfig, ExtractionError};
use crate::rnn::{Activation, LossMode, RnnError, TrainConfig};
use crate::seeding::{self, Stream};
use crate::taskgen::TaskError;
use crate::theory::TheoryError;

pub use experiment::{
    run_experiment, run_sweep, selected_pairs, write_sweep, write_trace, SelectedPair, SnapshotRow,
    SweepRow, TaylorRow, TrainingTrace, ValidationRow,
};
pub use theory_cmd::{
    bernoulli_check, ode3_check, oracle3_check, random_params3, run_theory, stability_check,
    Ode3Check, OracleCheck, StabilityTrial, TheoryCommand, TheoryConfig,
};

/// Environment variable holding the sweep worker count.
pub const WORKERS_ENV: &str = "AUTOMATON_LAB_WORKERS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Rnn(#[from] RnnError),
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Dfa(#[from] DfaError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("experiment failed: {0}")]
    Failed(String),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Parity,
    /// Random Moore machine over `{0,1}`; `seed` feeds the task stream.
    Random {
        seed: u64,
        #[serde(default = "default_max_states")]
        max_states: usize,
        #[serde(default = "default_p_new")]
        p_new: f64,
    },
}

fn default_max_states() -> usize {
    7
}

fn default_p_new() -> f64 {
    0.75
}

impl TaskSpec {
    pub fn build(&self) -> Dfa {
        match *self {
            TaskSpec::Parity => parity_dfa(),
            TaskSpec::Random {
                seed,
                max_states,
                p_new,
            } => random_regular_task(max_states, p_new, 2, &mut seeding::rng(seed, Stream::Task)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Training set: every sequence of length 1 to this.
    pub max_train_length: usize,
    pub validation_lengths: Vec<usize>,
    /// Random sequences per validation length.
    pub validation_count: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            max_train_length: 10,
            validation_lengths: vec![20, 50, 100],
            validation_count: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSpec {
    /// Track every pair of training sequences at each snapshot.
    pub enabled: bool,
    /// Merged agreeing pairs sampled for the Taylor-ratio series.
    pub taylor_pairs: usize,
    /// Continuations sampled per pair for the Taylor ratio.
    pub taylor_continuations: usize,
}

impl Default for PairSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            taylor_pairs: 40,
            taylor_continuations: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub gains: Vec<f64>,
    pub max_lengths: Vec<usize>,
    /// Seeds `train.seed, train.seed + 1, …`.
    pub seeds: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            gains: vec![0.05, 0.1, 0.2, 0.5, 1.0],
            max_lengths: vec![4, 6, 8, 10],
            seeds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name of the preset the config was built on (informational once
    /// loaded).
    pub preset: String,
    pub task: TaskSpec,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub extraction: ExtractionConfig,
    pub pairs: PairSpec,
    pub sweep: SweepSpec,
    /// Epochs that get an automaton snapshot besides the stride grid.
    pub selected_epochs: Vec<usize>,
    pub plots: bool,
    /// Overridden by `--out` on the command line.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        preset("parity").expect("parity preset exists")
    }
}

pub const PRESETS: [&str; 5] = ["parity", "lazy", "random", "tanh", "step_relu"];

/// Named base configurations.
///
/// * `parity`: streaming parity, 100 ReLU units, lr 0.02, batch 128,
///   1000 epochs, gain 0.1, all sequences up to length 10.
/// * `lazy`: parity with gain 0.5 and training length 4.
/// * `random`: random task (at most 7 states) with gain 0.025, lr 0.05
///   and 2000 epochs.
/// * `tanh`: tanh layers, gain 0.01, lr 0.05.
/// * `step_relu`: parity with a step-discontinuous output.
///
/// Every preset trains on the per-timestep loss.
pub fn preset(name: &str) -> Result<ExperimentConfig, HarnessError> {
    let train = TrainConfig {
        loss_mode: LossMode::EveryStep,
        ..TrainConfig::default()
    };
    let mut config = ExperimentConfig {
        preset: name.to_string(),
        task: TaskSpec::Parity,
        dataset: DatasetSpec::default(),
        train,
        extraction: ExtractionConfig::default(),
        pairs: PairSpec::default(),
        sweep: SweepSpec::default(),
        selected_epochs: Vec::new(),
        plots: false,
        output_dir: None,
    };
    match name {
        "parity" => {}
        "lazy" => {
            config.train.init_gain = 0.5;
            config.dataset.max_train_length = 4;
        }
        "random" => {
            config.task = TaskSpec::Random {
                seed: 0,
                max_states: default_max_states(),
                p_new: default_p_new(),
            };
            config.train.init_gain = 0.025;
            config.train.learning_rate = 0.05;
            config.train.epochs = 2000;
        }
        "tanh" => {
            config.train.hidden_activation = Activation::Tanh;
            config.train.output_activation = Activation::Tanh;
            config.train.init_gain = 0.01;
            config.train.learning_rate = 0.05;
        }
        "step_relu" => {
            config.train.output_activation = Activation::StepRelu;
        }
        other => return Err(HarnessError::Config(format!("unknown preset `{other}`"))),
    }
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.dataset.max_train_length == 0 {
            return bad("dataset.max_train_length must be at least 1".into());
        }
        if self.dataset.validation_lengths.contains(&0) {
            return bad("validation lengths must be at least 1".into());
        }
        if self.dataset.validation_count == 0 {
            return bad("dataset.validation_count must be at least 1".into());
        }
        for &l in &self.dataset.validation_lengths {
            if l < 64 && (self.dataset.validation_count as u64) > (1u64 << l) {
                return bad(format!("cannot draw {} distinct sequences of length {l}", self.dataset.validation_count));
            }
        }
        if let TaskSpec::Random { max_states, p_new, .. } = self.task {
            if max_states == 0 || !(0.0..=1.0).contains(&p_new) {
                return bad("random task needs max_states ≥ 1 and p_new in [0, 1]".into());
            }
        }
        self.train
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.extraction
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.pairs.enabled && self.train.epochs == 0 {
            return bad("pair tracking needs at least one epoch".into());
        }
        Ok(())
    }

    /// Snapshot epochs: the stride grid, the final epoch and any selected
    /// epochs within range, ascending.
    pub fn snapshot_epochs(&self) -> Vec<usize> {
        let stride = self.extraction.snapshot_stride.max(1);
        let last = self.train.epochs;
        let mut epochs: Vec<usize> = (0..=last).step_by(stride).collect();
        epochs.push(last);
        epochs.extend(self.selected_epochs.iter().copied().filter(|&e| e <= last));
        epochs.sort_unstable();
        epochs.dedup();
        epochs
    }
}

/// Applies `path.to.key=value` to a JSON document. The value is parsed as
/// JSON when possible and kept as a string otherwise, so `--set
/// train.init_gain=0.5` and `--set task.kind=random` both work.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), HarnessError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(HarnessError::Config(format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    if !node.is_object() {
        *node = Value::Object(Default::default());
    }
    node.as_object_mut()
        .unwrap()
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively merges `top` into `base`; objects merge key by key, any
/// other value replaces.
pub fn merge_json(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_document(path: Option<&Path>, overrides: &[String]) -> Result<Value, HarnessError> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !doc.is_object() {
        return Err(HarnessError::Config("config must be a JSON object".into()));
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    Ok(doc)
}

/// Builds an experiment config from an optional file and overrides. The
/// preset is taken from the document's `preset` field, else
/// `default_preset`.
pub fn load_experiment(
    path: Option<&Path>,
    overrides: &[String],
    default_preset: &str,
) -> Result<ExperimentConfig, HarnessError> {
    let doc = read_document(path, overrides)?;
    let name = match doc.get("preset") {
        Some(Value::String(s)) => s.clone(),
        Some(other) => return Err(HarnessError::Config(format!("preset must be a string, got {other}"))),
        None => default_preset.to_string(),
    };
    let mut base = serde_json::to_value(preset(&name)?)?;
    merge_json(&mut base, doc);
    let config: ExperimentConfig =
        serde_json::from_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_theory(path: Option<&Path>, overrides: &[String]) -> Result<TheoryConfig, HarnessError> {
    let doc = read_document(path, overrides)?;
    let mut base = serde_json::to_value(TheoryConfig::default())?;
    merge_json(&mut base, doc);
    let config: TheoryConfig =
        serde_json::from_value(base).map_err(|e| HarnessError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available
/// parallelism.
pub fn worker_count() -> Result<usize, HarnessError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(HarnessError::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub(crate) fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_or_fall_back_to_strings() {
        let mut doc = serde_json::json!({"train": {"epochs": 5}});
        apply_override(&mut doc, "train.init_gain=0.5").unwrap();
        apply_override(&mut doc, "task.kind=random").unwrap();
        apply_override(&mut doc, "dataset.validation_lengths=[3,4]").unwrap();
        assert_eq!(doc["train"]["epochs"], 5);
        assert_eq!(doc["train"]["init_gain"], 0.5);
        assert_eq!(doc["task"]["kind"], "random");
        assert_eq!(doc["dataset"]["validation_lengths"], serde_json::json!([3, 4]));
        assert!(apply_override(&mut doc, "novalue").is_err());
        assert!(apply_override(&mut doc, "a..b=1").is_err());
    }

    #[test]
    fn presets_load_and_layer() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap();
            assert_eq!(c.train.loss_mode, LossMode::EveryStep);
        }
        let c = load_experiment(None, &["preset=random".into(), "task.seed=3".into()], "parity").unwrap();
        assert_eq!(c.train.learning_rate, 0.05);
        assert!(matches!(c.task, TaskSpec::Random { seed: 3, max_states: 7, .. }));
        let lazy = load_experiment(None, &[], "lazy").unwrap();
        assert_eq!((lazy.train.init_gain, lazy.dataset.max_train_length), (0.5, 4));
    }

    #[test]
    fn config_errors_map_to_exit_code_two() {
        let e = load_experiment(None, &["train.nonsense=1".into()], "parity").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = load_experiment(None, &["preset=nope".into()], "parity").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = load_experiment(None, &["dataset.validation_lengths=[0]".into()], "parity").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = load_experiment(None, &["dataset.validation_lengths=[3]".into()], "parity").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn snapshot_grid_includes_end_and_selected() {
        let mut c = ExperimentConfig::default();
        c.train.epochs = 25;
        c.selected_epochs = vec![3, 40];
        assert_eq!(c.snapshot_epochs(), vec![0, 3, 10, 20, 25]);
        c.train.epochs = 0;
        assert_eq!(c.snapshot_epochs(), vec![0]);
    }
}
