//! Flat `key = value` run configuration with documented defaults.
//!
//! Keys are case-insensitive and `-` and `_` are interchangeable, so the
//! same names work in config files and as `--kebab-case` flags. Later
//! assignments win, which lets command-line flags override a file.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::TraceDataset;
use crate::engine::{Aggregation, AlgorithmKind, EvalCadence};

/// A rejected configuration value. `field` names the offending key.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid `{field}`: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskChoice {
    Logistic,
    LeastSquares,
    /// Energy accounting only; no models are trained.
    None,
}

impl FromStr for TaskChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "logistic" | "multinomial-logistic" => Ok(TaskChoice::Logistic),
            "least-squares" | "leastsquares" => Ok(TaskChoice::LeastSquares),
            "none" | "energy" => Ok(TaskChoice::None),
            other => Err(format!("unknown task `{other}` (expected logistic, least-squares or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// No node has a budget.
    Unconstrained,
    /// τ from the trace's round column, scaled by `budget_scale`.
    Trace,
    /// τ from `battery_capacity_wh · battery_fraction` over each node's round energy.
    Battery,
}

impl FromStr for BudgetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "unconstrained" | "none" => Ok(BudgetMode::Unconstrained),
            "trace" | "trace-tau" => Ok(BudgetMode::Trace),
            "battery" | "battery-fraction" => Ok(BudgetMode::Battery),
            other => Err(format!("unknown budget mode `{other}` (expected unconstrained, trace or battery)")),
        }
    }
}

/// Which held-out split the engine evaluates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Validation,
    Test,
}

impl FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "validation" | "val" => Ok(EvalSplit::Validation),
            "test" => Ok(EvalSplit::Test),
            other => Err(format!("unknown split `{other}` (expected validation or test)")),
        }
    }
}

fn parse_cadence(s: &str) -> Result<EvalCadence, String> {
    let lower = s.to_ascii_lowercase();
    let every = |k: &str| {
        k.trim().parse::<u64>().ok().filter(|&k| k > 0).map(EvalCadence::Every).ok_or_else(|| {
            format!("bad cadence `{s}` (expected block, round, or a positive round count)")
        })
    };
    match lower.as_str() {
        "block" => Ok(EvalCadence::Block),
        "round" | "per-round" | "per_round" => Ok(EvalCadence::Every(1)),
        other => every(other.strip_prefix("every:").unwrap_or(other)),
    }
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "gossip" => Ok(Aggregation::Gossip),
        "all-reduce" | "allreduce" => Ok(Aggregation::AllReduce),
        other => Err(format!("unknown aggregation `{other}` (expected gossip or all-reduce)")),
    }
}

/// Everything needed to reproduce one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Output file stem; derived from the algorithm and seed when empty.
    pub label: String,
    pub n: usize,
    pub degree: usize,
    pub seed: u64,
    /// Edge-list file replacing the generated regular graph.
    pub topology_file: Option<PathBuf>,
    pub task: TaskChoice,
    pub feature_dim: usize,
    pub classes: usize,
    pub l2: f64,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub train_csv: Option<PathBuf>,
    pub validation_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub shards_per_node: usize,
    pub learning_rate: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub gamma_train: u64,
    pub gamma_sync: u64,
    pub rounds: u64,
    pub algorithm: AlgorithmKind,
    /// `builtin:cifar10`, `builtin:femnist` or a trace CSV path.
    pub trace: String,
    /// Column pair read from a two-dataset trace file.
    pub trace_dataset: TraceDataset,
    pub budget_mode: BudgetMode,
    pub budget_scale: f64,
    pub battery_capacity_wh: Option<f64>,
    pub battery_fraction: f64,
    pub eval_cadence: EvalCadence,
    pub eval_split: EvalSplit,
    pub aggregation: Aggregation,
    pub output: PathBuf,
    /// Worker threads; 0 picks automatically.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            label: String::new(),
            n: 256,
            degree: 6,
            seed: 0,
            topology_file: None,
            task: TaskChoice::Logistic,
            feature_dim: 20,
            classes: 10,
            l2: 0.0,
            train_per_class: 160,
            eval_per_class: 100,
            separation: 1.0,
            noise: 1.0,
            train_csv: None,
            validation_csv: None,
            test_csv: None,
            shards_per_node: 2,
            learning_rate: 0.1,
            local_steps: 20,
            batch_size: 32,
            gamma_train: 4,
            gamma_sync: 4,
            rounds: 1000,
            algorithm: AlgorithmKind::Dpsgd,
            trace: "builtin:cifar10".into(),
            trace_dataset: TraceDataset::Cifar10,
            budget_mode: BudgetMode::Trace,
            budget_scale: 1.0,
            battery_capacity_wh: None,
            battery_fraction: 0.1,
            eval_cadence: EvalCadence::Block,
            eval_split: EvalSplit::Test,
            aggregation: Aggregation::Gossip,
            output: PathBuf::from("results"),
            threads: 0,
        }
    }
}

/// Every recognised key in canonical (underscore) form, with a short description.
pub const KEYS: &[(&str, &str)] = &[
    ("label", "output file stem [default: <algorithm>-n<n>-s<seed>]"),
    ("n", "number of nodes [default: 256]"),
    ("degree", "degree of the random regular graph [default: 6]"),
    ("seed", "seed for graph, data, initialisation and sampling [default: 0]"),
    ("topology_file", "edge-list file to use instead of a generated graph"),
    ("task", "logistic, least-squares or none (energy only) [default: logistic]"),
    ("feature_dim", "synthetic feature count [default: 20]"),
    ("classes", "class count [default: 10]"),
    ("l2", "L2 regularisation strength [default: 0]"),
    ("train_per_class", "synthetic training samples per class [default: 160]"),
    ("eval_per_class", "synthetic validation and test samples per class [default: 100]"),
    ("separation", "spread of synthetic class centres [default: 1]"),
    ("noise", "spread of synthetic samples around their centre [default: 1]"),
    ("train_csv", "training set CSV (features then integer label)"),
    ("validation_csv", "validation set CSV [default: the test set]"),
    ("test_csv", "test set CSV, required with train_csv"),
    ("shards_per_node", "label-sorted shards per node [default: 2]"),
    ("learning_rate", "SGD step size [default: 0.1]"),
    ("local_steps", "SGD steps per training round [default: 20]"),
    ("batch_size", "mini-batch size [default: 32]"),
    ("gamma_train", "training rounds per block [default: 4]"),
    ("gamma_sync", "synchronization rounds per block [default: 4]"),
    ("rounds", "total rounds [default: 1000]"),
    ("algorithm", "dpsgd, skiptrain, skiptrain-constrained or greedy [default: dpsgd]"),
    ("trace", "builtin:cifar10, builtin:femnist or a trace CSV [default: builtin:cifar10]"),
    ("trace_dataset", "column pair of a two-dataset trace: cifar10 or femnist [default: cifar10]"),
    ("budget_mode", "unconstrained, trace or battery [default: trace]"),
    ("budget_scale", "multiplier applied to trace budgets, rounded down [default: 1]"),
    ("battery_capacity_wh", "battery capacity for budget_mode = battery"),
    ("battery_fraction", "share of the battery available for training [default: 0.1]"),
    ("eval_cadence", "block, round, or every K rounds [default: block]"),
    ("eval_split", "validation or test [default: test]"),
    ("aggregation", "gossip or all-reduce [default: gossip]"),
    ("output", "directory for result files [default: results]"),
    ("threads", "worker threads, 0 = automatic [default: 0]"),
];

/// Canonical key for `key`, resolving case, dashes and short aliases.
pub fn canonical_key(key: &str) -> String {
    let k = key.trim().trim_start_matches("--").to_ascii_lowercase().replace('-', "_");
    match k.as_str() {
        "algo" => "algorithm".into(),
        "d" => "degree".into(),
        "lr" | "eta" => "learning_rate".into(),
        "t" => "rounds".into(),
        "out" | "output_dir" => "output".into(),
        _ => k,
    }
}

fn num<T: FromStr>(field: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::new(field, format!("`{value}`: {e}")))
}

fn enumerated<T>(field: &str, r: Result<T, String>) -> Result<T, ConfigError> {
    r.map_err(|m| ConfigError::new(field, m))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Assigns one key. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let field = canonical_key(key);
        let f = field.as_str();
        let v = value.trim();
        match f {
            "label" => self.label = v.to_string(),
            "n" => self.n = num(f, v)?,
            "degree" => self.degree = num(f, v)?,
            "seed" => self.seed = num(f, v)?,
            "topology_file" => self.topology_file = path(v),
            "task" => self.task = enumerated(f, v.parse())?,
            "feature_dim" => self.feature_dim = num(f, v)?,
            "classes" => self.classes = num(f, v)?,
            "l2" => self.l2 = num(f, v)?,
            "train_per_class" => self.train_per_class = num(f, v)?,
            "eval_per_class" => self.eval_per_class = num(f, v)?,
            "separation" => self.separation = num(f, v)?,
            "noise" => self.noise = num(f, v)?,
            "train_csv" => self.train_csv = path(v),
            "validation_csv" => self.validation_csv = path(v),
            "test_csv" => self.test_csv = path(v),
            "shards_per_node" => self.shards_per_node = num(f, v)?,
            "learning_rate" => self.learning_rate = num(f, v)?,
            "local_steps" => self.local_steps = num(f, v)?,
            "batch_size" => self.batch_size = num(f, v)?,
            "gamma_train" => self.gamma_train = num(f, v)?,
            "gamma_sync" => self.gamma_sync = num(f, v)?,
            "rounds" => self.rounds = num(f, v)?,
            "algorithm" => self.algorithm = enumerated(f, v.parse())?,
            "trace" => self.trace = v.to_string(),
            "trace_dataset" => self.trace_dataset = v.parse().map_err(|e: crate::energy::EnergyError| ConfigError::new(f, e.to_string()))?,
            "budget_mode" => self.budget_mode = enumerated(f, v.parse())?,
            "budget_scale" => self.budget_scale = num(f, v)?,
            "battery_capacity_wh" => {
                self.battery_capacity_wh = if v.is_empty() { None } else { Some(num(f, v)?) }
            }
            "battery_fraction" => self.battery_fraction = num(f, v)?,
            "eval_cadence" => self.eval_cadence = enumerated(f, parse_cadence(v))?,
            "eval_split" => self.eval_split = enumerated(f, v.parse())?,
            "aggregation" => self.aggregation = enumerated(f, parse_aggregation(v))?,
            "output" => self.output = PathBuf::from(v),
            "threads" => self.threads = num(f, v)?,
            _ => return Err(ConfigError::new(f, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies `pairs` in order on top of `self`.
    pub fn apply<K: AsRef<str>, V: AsRef<str>>(
        &mut self,
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Result<(), ConfigError> {
        for (k, v) in pairs {
            self.set(k.as_ref(), v.as_ref())?;
        }
        Ok(())
    }

    /// Defaults, then `pairs`, then validation.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Self, ConfigError> {
        let mut config = RunConfig::default();
        config.apply(pairs)?;
        config.validate()?;
        Ok(config)
    }

    /// Static checks that need no file access.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |field: &str, message: &str| Err(ConfigError::new(field, message));
        if self.n == 0 {
            return fail("n", "must be at least 1");
        }
        if self.topology_file.is_none() {
            if self.degree >= self.n && !(self.n == 1 && self.degree == 0) {
                return fail("degree", "must be smaller than n");
            }
            if (self.n * self.degree) % 2 == 1 {
                return fail("degree", "n * degree must be even");
            }
            if self.degree == 0 && self.n > 1 {
                return fail("degree", "must be positive for a connected graph");
            }
        }
        if self.gamma_train == 0 {
            return fail("gamma_train", "must be at least 1");
        }
        if !self.label.is_empty() && self.label.contains(['/', '\\']) {
            return fail("label", "must not contain path separators");
        }
        if !(self.budget_scale.is_finite() && self.budget_scale >= 0.0) {
            return fail("budget_scale", "must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.battery_fraction) {
            return fail("battery_fraction", "must lie in [0, 1]");
        }
        if self.budget_mode == BudgetMode::Battery {
            match self.battery_capacity_wh {
                None => return fail("battery_capacity_wh", "required when budget_mode = battery"),
                Some(c) if !(c.is_finite() && c > 0.0) => return fail("battery_capacity_wh", "must be positive"),
                _ => {}
            }
        }
        if self.trace.is_empty() {
            return fail("trace", "must name a built-in trace or a file");
        }
        if self.task != TaskChoice::None {
            if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
                return fail("learning_rate", "must be positive");
            }
            if self.batch_size == 0 {
                return fail("batch_size", "must be positive");
            }
            if self.shards_per_node == 0 {
                return fail("shards_per_node", "must be positive");
            }
            if !(self.l2.is_finite() && self.l2 >= 0.0) {
                return fail("l2", "must be non-negative");
            }
            if self.train_csv.is_some() {
                if self.test_csv.is_none() {
                    return fail("test_csv", "required when train_csv is given");
                }
            } else {
                if self.feature_dim == 0 {
                    return fail("feature_dim", "must be positive");
                }
                if self.train_per_class == 0 {
                    return fail("train_per_class", "must be positive");
                }
                if self.eval_per_class == 0 {
                    return fail("eval_per_class", "must be positive");
                }
                if !(self.noise.is_finite() && self.noise >= 0.0) {
                    return fail("noise", "must be non-negative");
                }
                if !self.separation.is_finite() {
                    return fail("separation", "must be finite");
                }
            }
            if self.classes == 0 || (self.task == TaskChoice::Logistic && self.classes < 2) {
                return fail("classes", "need at least 2 classes for classification");
            }
        }
        Ok(())
    }

    /// The file stem used for result files.
    pub fn effective_label(&self) -> String {
        if self.label.is_empty() {
            format!("{}-n{}-s{}", self.algorithm.label(), self.n, self.seed)
        } else {
            self.label.clone()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Parses flat `key = value` text. Blank lines, `#`/`;` comments and
/// `[section]` headers are skipped; a key may appear more than once, the
/// last occurrence wins.
pub fn parse_ini(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') || line.starts_with('[') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::new(format!("line {}", idx + 1), format!("expected `key = value`, got `{line}`")));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::new(format!("line {}", idx + 1), "empty key"));
        }
        let value = value.split_once(" #").map_or(value, |(v, _)| v).trim();
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}
