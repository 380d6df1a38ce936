//! Turns a [`RunConfig`] into graph, profiles, budgets and data, runs the
//! engine, and writes result files.

use std::fs::File;
use std::path::Path;

use thiserror::Error;

use crate::config::{BudgetMode, ConfigError, EvalSplit, RunConfig, TaskChoice};
use crate::energy::{assign_round_robin, budget_from_battery, builtin_trace, load_traces, DeviceProfile, TraceDataset};
use crate::engine::{run_simulation, EngineError, RoundSchedule, SimulationConfig, SimulationInputs, SimulationOutput, Workload};
use crate::learning::{shard_partition, LabeledDataset, SyntheticSpec, TaskSpec};
use crate::metrics::{emit_results, metrics_csv, ResultFiles};
use crate::topology::{generate_regular, metropolis_weights, MixingMatrix, Topology, TopologyError};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Runtime(_) => 3,
        }
    }
}

impl From<EngineError> for RunError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(m) => RunError::Config(ConfigError::new("config", m)),
            other => RunError::Runtime(other.to_string()),
        }
    }
}

/// Resolved inputs of one run.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub config: RunConfig,
    pub topology: Topology,
    pub mixing: MixingMatrix,
    /// Device profile of each node.
    pub profiles: Vec<DeviceProfile>,
    pub budgets: Vec<Option<u64>>,
    pub task: Option<TaskSpec>,
    pub partitions: Vec<LabeledDataset>,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

/// Resolves a trace name: `builtin:cifar10`, `builtin:femnist` or a path.
pub fn resolve_trace(trace: &str, dataset: TraceDataset) -> Result<Vec<DeviceProfile>, ConfigError> {
    match trace.strip_prefix("builtin:") {
        Some(name) => {
            let ds: TraceDataset = name.parse().map_err(|_| {
                ConfigError::new("trace", format!("unknown built-in trace `{trace}` (expected builtin:cifar10 or builtin:femnist)"))
            })?;
            Ok(builtin_trace(ds))
        }
        None => load_traces(Path::new(trace), dataset).map_err(|e| ConfigError::new("trace", e.to_string())),
    }
}

fn read_dataset(field: &str, path: &Path) -> Result<LabeledDataset, ConfigError> {
    let file = File::open(path).map_err(|e| ConfigError::new(field, format!("{}: {e}", path.display())))?;
    LabeledDataset::read_csv(file).map_err(|e| ConfigError::new(field, format!("{}: {e}", path.display())))
}

fn build_topology(config: &RunConfig) -> Result<Topology, RunError> {
    if let Some(path) = &config.topology_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("topology_file", format!("{}: {e}", path.display())))?;
        let topo = Topology::from_edge_list(&text).map_err(|e| ConfigError::new("topology_file", e.to_string()))?;
        if topo.n() != config.n {
            return Err(ConfigError::new("n", format!("topology file has {} nodes, config says {}", topo.n(), config.n)).into());
        }
        return Ok(topo);
    }
    if config.n == 1 {
        return Topology::from_edges(1, &[]).map_err(|e| RunError::Runtime(e.to_string()));
    }
    generate_regular(config.n, config.degree, config.seed).map_err(|e| match e {
        TopologyError::Infeasible { .. } => ConfigError::new("degree", e.to_string()).into(),
        other => RunError::Runtime(other.to_string()),
    })
}

fn budgets(config: &RunConfig, profiles: &[DeviceProfile]) -> Result<Vec<Option<u64>>, ConfigError> {
    match config.budget_mode {
        BudgetMode::Unconstrained => Ok(vec![None; profiles.len()]),
        BudgetMode::Trace => {
            Ok(profiles.iter().map(|p| Some((p.budget_rounds as f64 * config.budget_scale).floor() as u64)).collect())
        }
        BudgetMode::Battery => {
            let capacity = config
                .battery_capacity_wh
                .ok_or_else(|| ConfigError::new("battery_capacity_wh", "required when budget_mode = battery"))?;
            profiles
                .iter()
                .map(|p| {
                    budget_from_battery(capacity, config.battery_fraction, p.per_round_mwh)
                        .map(Some)
                        .map_err(|e| ConfigError::new("battery_fraction", e.to_string()))
                })
                .collect()
        }
    }
}

type Splits = (LabeledDataset, LabeledDataset, LabeledDataset);

fn load_data(config: &RunConfig) -> Result<Splits, ConfigError> {
    if let Some(train) = &config.train_csv {
        let train = read_dataset("train_csv", train)?;
        let test_path = config.test_csv.as_ref().ok_or_else(|| ConfigError::new("test_csv", "required with train_csv"))?;
        let test = read_dataset("test_csv", test_path)?;
        let validation = match &config.validation_csv {
            Some(p) => read_dataset("validation_csv", p)?,
            None => test.clone(),
        };
        return Ok((train, validation, test));
    }
    let data = SyntheticSpec {
        classes: config.classes,
        feature_dim: config.feature_dim,
        train_per_class: config.train_per_class,
        eval_per_class: config.eval_per_class,
        separation: config.separation,
        noise: config.noise,
        seed: config.seed,
    }
    .generate()
    .map_err(|e| ConfigError::new("task", e.to_string()))?;
    Ok((data.train, data.validation, data.test))
}

impl PreparedRun {
    /// Validates `config` and materialises every input.
    pub fn new(config: &RunConfig) -> Result<Self, RunError> {
        config.validate()?;
        let topology = build_topology(config)?;
        let mixing = metropolis_weights(&topology);
        let trace = resolve_trace(&config.trace, config.trace_dataset)?;
        let profiles = assign_round_robin(&trace, config.n);
        let budgets = budgets(config, &profiles)?;

        let (task, partitions, validation, test) = match config.task {
            TaskChoice::None => (None, Vec::new(), LabeledDataset::empty(1), LabeledDataset::empty(1)),
            choice => {
                let (train, validation, test) = load_data(config)?;
                let dim = train.feature_dim();
                let task = match choice {
                    TaskChoice::Logistic => TaskSpec::logistic(dim, config.classes, config.l2),
                    _ => TaskSpec::least_squares(dim, config.l2),
                };
                for (field, set) in [("train_csv", &train), ("validation_csv", &validation), ("test_csv", &test)] {
                    if set.feature_dim() != dim {
                        return Err(ConfigError::new(field, "feature count differs from the training set").into());
                    }
                    if task.is_classification() && set.labels().iter().any(|&l| l >= config.classes) {
                        return Err(ConfigError::new("classes", format!("{field} has labels outside [0, {})", config.classes)).into());
                    }
                }
                let partitions = shard_partition(&train, config.n, config.shards_per_node, config.seed)
                    .map_err(|e| ConfigError::new("shards_per_node", e.to_string()))?;
                (Some(task), partitions, validation, test)
            }
        };
        Ok(PreparedRun { config: config.clone(), topology, mixing, profiles, budgets, task, partitions, validation, test })
    }

    pub fn simulation_config(&self) -> Result<SimulationConfig, RunError> {
        let c = &self.config;
        Ok(SimulationConfig {
            schedule: RoundSchedule::new(c.gamma_train, c.gamma_sync, c.rounds)?,
            algorithm: c.algorithm,
            learning_rate: c.learning_rate,
            local_steps: c.local_steps,
            batch_size: c.batch_size,
            seed: c.seed,
            cadence: c.eval_cadence,
            aggregation: c.aggregation,
            threads: c.threads,
        })
    }

    pub fn simulate(&self) -> Result<SimulationOutput, RunError> {
        let workload = match &self.task {
            None => Workload::EnergyOnly,
            Some(task) => Workload::Learning {
                task,
                partitions: &self.partitions,
                eval_set: match self.config.eval_split {
                    EvalSplit::Validation => &self.validation,
                    EvalSplit::Test => &self.test,
                },
            },
        };
        let inputs =
            SimulationInputs { mixing: &self.mixing, profiles: &self.profiles, budgets: &self.budgets, workload };
        Ok(run_simulation(&self.simulation_config()?, &inputs)?)
    }
}

/// Prepares and runs `config` in memory.
pub fn execute(config: &RunConfig) -> Result<SimulationOutput, RunError> {
    PreparedRun::new(config)?.simulate()
}

/// The metrics CSV `config` would write, without touching the file system.
pub fn execute_to_csv(config: &RunConfig) -> Result<String, RunError> {
    let out = execute(config)?;
    Ok(metrics_csv(&out.records, &out.ledger))
}

/// Runs `config` and writes `<label>.metrics.csv` and `<label>.summary.json`
/// into its output directory.
pub fn run_and_emit(config: &RunConfig) -> Result<(SimulationOutput, ResultFiles), RunError> {
    let out = execute(config)?;
    let files = emit_results(&out.records, &out.ledger, &config.output, &config.effective_label(), &config.to_json())
        .map_err(|e| RunError::Runtime(e.to_string()))?;
    Ok((out, files))
}
