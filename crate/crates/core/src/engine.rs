//! Barrier-synchronized round loop for D-PSGD, SkipTrain,
//! SkipTrain-constrained and Greedy, plus an exact all-reduce mode.
//!
//! Each round has four phases: every node copies its model, optionally runs
//! local SGD, shares the result, and aggregates a frozen snapshot of all
//! shared models. Training decisions and the energy ledger are settled
//! sequentially at the barrier; SGD, aggregation and evaluation run on a
//! rayon pool. Every node owns private random streams derived from the run
//! seed, so results do not depend on the number of worker threads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{planned_training_rounds, training_probability, DeviceProfile, EnergyLedger};
use crate::learning::{sgd_local_update, BatchSampler, LabeledDataset, LearningError, ModelVector, TaskSpec};
use crate::metrics::{self, MetricsError, MetricsRecord, Phase};
use crate::rng::{stream, StreamPurpose};
use crate::topology::MixingMatrix;

/// Scale of the shared initial model drawn from a standard normal.
pub const INIT_SCALE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid simulation configuration: {0}")]
    Config(String),
    #[error("round {round} is outside the schedule of {total} rounds")]
    RoundOutOfRange { round: u64, total: u64 },
    #[error("model of node {node} became non-finite in round {round}")]
    Divergence { round: u64, node: usize },
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundKind {
    Train,
    Sync,
}

/// Alternating blocks of `gamma_train` training rounds and `gamma_sync`
/// synchronization rounds over `total_rounds` 0-based rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSchedule {
    pub gamma_train: u64,
    pub gamma_sync: u64,
    pub total_rounds: u64,
}

impl RoundSchedule {
    pub fn new(gamma_train: u64, gamma_sync: u64, total_rounds: u64) -> Result<Self, EngineError> {
        if gamma_train == 0 {
            return Err(EngineError::Config("gamma_train must be at least 1".into()));
        }
        Ok(RoundSchedule { gamma_train, gamma_sync, total_rounds })
    }

    pub fn period(&self) -> u64 {
        self.gamma_train + self.gamma_sync
    }

    pub fn round_kind(&self, t: u64) -> Result<RoundKind, EngineError> {
        if t >= self.total_rounds {
            return Err(EngineError::RoundOutOfRange { round: t, total: self.total_rounds });
        }
        Ok(self.kind_at(t))
    }

    fn kind_at(&self, t: u64) -> RoundKind {
        if t % self.period() < self.gamma_train {
            RoundKind::Train
        } else {
            RoundKind::Sync
        }
    }

    /// Exact number of training rounds in the schedule.
    pub fn training_rounds(&self) -> u64 {
        planned_training_rounds(self.gamma_train, self.gamma_sync, self.total_rounds)
    }

    /// Phase label for the state after round `t` completes.
    pub fn phase_after(&self, t: u64) -> Phase {
        let pos = t % self.period();
        if self.gamma_sync > 0 && pos == self.period() - 1 {
            Phase::AfterSyncBlock
        } else if pos == self.gamma_train - 1 {
            Phase::AfterTrainBlock
        } else {
            Phase::PerRound
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlgorithmKind {
    Dpsgd,
    #[serde(rename = "skiptrain")]
    SkipTrain,
    #[serde(rename = "skiptrain-constrained")]
    SkipTrainConstrained,
    Greedy,
}

impl AlgorithmKind {
    pub fn label(self) -> &'static str {
        match self {
            AlgorithmKind::Dpsgd => "dpsgd",
            AlgorithmKind::SkipTrain => "skiptrain",
            AlgorithmKind::SkipTrainConstrained => "skiptrain-constrained",
            AlgorithmKind::Greedy => "greedy",
        }
    }

    /// Whether per-node budgets limit training.
    pub fn enforces_budget(self) -> bool {
        matches!(self, AlgorithmKind::SkipTrainConstrained | AlgorithmKind::Greedy)
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AlgorithmKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "dpsgd" | "d-psgd" => Ok(AlgorithmKind::Dpsgd),
            "skiptrain" => Ok(AlgorithmKind::SkipTrain),
            "skiptrain-constrained" => Ok(AlgorithmKind::SkipTrainConstrained),
            "greedy" => Ok(AlgorithmKind::Greedy),
            other => Err(format!(
                "unknown algorithm `{other}` (expected dpsgd, skiptrain, skiptrain-constrained or greedy)"
            )),
        }
    }
}

/// How shared models are combined at the end of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Weighted neighbourhood average through the mixing matrix.
    #[default]
    Gossip,
    /// Exact global average (the all-reduce oracle).
    AllReduce,
}

/// When evaluation snapshots are taken. A final snapshot is always emitted
/// after the last round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalCadence {
    /// Every `gamma_train + gamma_sync` rounds.
    #[default]
    Block,
    /// Every `k` rounds; `Every(1)` is per-round evaluation.
    Every(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub schedule: RoundSchedule,
    pub algorithm: AlgorithmKind,
    pub learning_rate: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub cadence: EvalCadence,
    pub aggregation: Aggregation,
    /// Worker threads; 0 uses the ambient rayon pool.
    pub threads: usize,
}

/// What nodes compute when they train.
#[derive(Debug, Clone, Copy)]
pub enum Workload<'a> {
    /// Only training decisions and energy are simulated.
    EnergyOnly,
    Learning {
        task: &'a TaskSpec,
        partitions: &'a [LabeledDataset],
        eval_set: &'a LabeledDataset,
    },
}

/// Per-node inputs of one run.
#[derive(Debug, Clone)]
pub struct SimulationInputs<'a> {
    pub mixing: &'a MixingMatrix,
    /// Device profile of each node.
    pub profiles: &'a [DeviceProfile],
    /// τ per node; `None` is an unlimited budget.
    pub budgets: &'a [Option<u64>],
    pub workload: Workload<'a>,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub records: Vec<MetricsRecord>,
    pub ledger: EnergyLedger,
    /// Final models; empty for energy-only runs.
    pub models: Vec<ModelVector>,
    pub initial_model: Option<ModelVector>,
    /// Training probability each node used.
    pub train_probabilities: Vec<f64>,
}

/// Mutable per-node state carried across rounds.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: usize,
    /// Remaining training rounds; `None` when unlimited.
    pub remaining_budget: Option<u64>,
    /// Fixed for the whole run.
    pub train_probability: f64,
    decision_rng: ChaCha8Rng,
}

impl NodeState {
    pub fn new(id: usize, budget: Option<u64>, train_probability: f64, seed: u64) -> Self {
        NodeState {
            id,
            remaining_budget: budget,
            train_probability,
            decision_rng: stream(seed, id as u64, 0, StreamPurpose::TrainDecision),
        }
    }

    fn has_budget(&self) -> bool {
        self.remaining_budget != Some(0)
    }

    fn spend(&mut self) {
        if let Some(b) = self.remaining_budget.as_mut() {
            *b -= 1;
        }
    }
}

/// Decides whether `node` trains in round `t`.
///
/// D-PSGD always trains. Greedy trains while budget remains. Both SkipTrain
/// variants train only in training rounds with budget left, after a
/// uniform draw `r ≤ p_i` from the node's private stream; the draw is
/// consumed only when the first two conditions hold.
pub fn should_train(node: &mut NodeState, t: u64, schedule: &RoundSchedule, kind: AlgorithmKind) -> bool {
    match kind {
        AlgorithmKind::Dpsgd => true,
        AlgorithmKind::Greedy => node.has_budget(),
        AlgorithmKind::SkipTrain | AlgorithmKind::SkipTrainConstrained => {
            if schedule.kind_at(t) != RoundKind::Train || !node.has_budget() {
                return false;
            }
            let r: f64 = node.decision_rng.random();
            r <= node.train_probability
        }
    }
}

/// `Σ_j W[j][i] · models[j]` over the non-zero entries of column `i`.
pub fn gossip_aggregate(models: &[ModelVector], w: &MixingMatrix, i: usize) -> Result<ModelVector, EngineError> {
    if models.len() != w.n() {
        return Err(EngineError::Config(format!("{} models for a {}-node mixing matrix", models.len(), w.n())));
    }
    let dim = models[i].len();
    let mut out = ModelVector::zeros(dim);
    for &(j, weight) in w.column_support(i) {
        if models[j].len() != dim {
            return Err(LearningError::DimensionMismatch { expected: dim, got: models[j].len() }.into());
        }
        out.axpy(weight, &models[j]);
    }
    Ok(out)
}

/// Unweighted global average.
pub fn all_reduce(models: &[ModelVector]) -> Result<ModelVector, EngineError> {
    metrics::average_model(models).map_err(|e| match e {
        MetricsError::Empty => EngineError::Config("all-reduce over an empty model list".into()),
        other => other.into(),
    })
}

/// The shared starting model: a seeded standard normal draw scaled by [`INIT_SCALE`].
pub fn initial_model(dim: usize, seed: u64) -> ModelVector {
    let mut rng = stream(seed, 0, 0, StreamPurpose::ModelInit);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            INIT_SCALE * z
        })
        .collect::<Vec<_>>()
        .into()
}

/// Per-node training probabilities for `algorithm` under `budgets`.
pub fn train_probabilities(
    algorithm: AlgorithmKind,
    schedule: &RoundSchedule,
    budgets: &[Option<u64>],
) -> Vec<f64> {
    budgets
        .iter()
        .map(|b| match (algorithm, b) {
            (AlgorithmKind::SkipTrainConstrained, Some(tau)) => {
                training_probability(*tau, schedule.training_rounds()).unwrap_or(1.0)
            }
            _ => 1.0,
        })
        .collect()
}

fn validate(config: &SimulationConfig, inputs: &SimulationInputs<'_>) -> Result<(), EngineError> {
    let n = inputs.mixing.n();
    let bad = |m: String| Err(EngineError::Config(m));
    if n == 0 {
        return bad("at least one node is required".into());
    }
    if inputs.profiles.len() != n {
        return bad(format!("{} device profiles for {n} nodes", inputs.profiles.len()));
    }
    if inputs.budgets.len() != n {
        return bad(format!("{} budgets for {n} nodes", inputs.budgets.len()));
    }
    if let Workload::Learning { task, partitions, eval_set } = inputs.workload {
        if partitions.len() != n {
            return bad(format!("{} data partitions for {n} nodes", partitions.len()));
        }
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", config.learning_rate));
        }
        if config.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if let Some(i) = partitions.iter().position(LabeledDataset::is_empty) {
            if config.local_steps > 0 {
                return bad(format!("node {i} has no local data"));
            }
        }
        if eval_set.is_empty() {
            return bad("evaluation set is empty".into());
        }
        for p in partitions.iter().filter(|p| !p.is_empty()) {
            task.check(&ModelVector::zeros(task.model_dim()), p)?;
        }
        task.check(&ModelVector::zeros(task.model_dim()), eval_set)?;
    }
    if let EvalCadence::Every(0) = config.cadence {
        return bad("evaluation cadence must be positive".into());
    }
    Ok(())
}

/// Runs one simulation to completion.
pub fn run_simulation(
    config: &SimulationConfig,
    inputs: &SimulationInputs<'_>,
) -> Result<SimulationOutput, EngineError> {
    validate(config, inputs)?;
    if config.threads == 0 {
        return simulate(config, inputs);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| EngineError::Config(format!("thread pool: {e}")))?;
    pool.install(|| simulate(config, inputs))
}

struct LearningState<'a> {
    task: &'a TaskSpec,
    partitions: &'a [LabeledDataset],
    eval_set: &'a LabeledDataset,
    models: Vec<ModelVector>,
    samplers: Vec<BatchSampler>,
}

fn simulate(config: &SimulationConfig, inputs: &SimulationInputs<'_>) -> Result<SimulationOutput, EngineError> {
    let n = inputs.mixing.n();
    let schedule = &config.schedule;
    let probabilities = train_probabilities(config.algorithm, schedule, inputs.budgets);
    let mut nodes: Vec<NodeState> = (0..n)
        .map(|i| {
            let budget = if config.algorithm.enforces_budget() { inputs.budgets[i] } else { None };
            NodeState::new(i, budget, probabilities[i], config.seed)
        })
        .collect();
    let mut ledger = EnergyLedger::new(inputs.profiles);

    let mut learning = match inputs.workload {
        Workload::EnergyOnly => None,
        Workload::Learning { task, partitions, eval_set } => {
            let x0 = initial_model(task.model_dim(), config.seed);
            Some(LearningState {
                task,
                partitions,
                eval_set,
                models: vec![x0; n],
                samplers: partitions
                    .iter()
                    .enumerate()
                    .map(|(i, p)| BatchSampler::new(p.len(), stream(config.seed, i as u64, 0, StreamPurpose::Sampling)))
                    .collect(),
            })
        }
    };
    let initial_model = learning.as_ref().map(|l| l.models[0].clone());

    let cadence = match config.cadence {
        EvalCadence::Block => schedule.period(),
        EvalCadence::Every(k) => k,
    };
    let mut records = Vec::new();
    let mut training = vec![false; n];

    for t in 0..schedule.total_rounds {
        for (node, flag) in nodes.iter_mut().zip(training.iter_mut()) {
            *flag = should_train(node, t, schedule, config.algorithm);
        }

        if let Some(state) = learning.as_mut() {
            train_round(config, state, &training, t)?;
            state.models = aggregate(config.aggregation, inputs.mixing, &state.models)?;
        }

        for (i, node) in nodes.iter_mut().enumerate() {
            if training[i] {
                node.spend();
                ledger.charge(i);
            }
        }

        let completed = t + 1;
        if completed % cadence == 0 || completed == schedule.total_rounds {
            records.push(snapshot(config, learning.as_ref(), &ledger, t)?);
        }
    }

    Ok(SimulationOutput {
        records,
        ledger,
        models: learning.map(|l| l.models).unwrap_or_default(),
        initial_model,
        train_probabilities: probabilities,
    })
}

fn train_round(
    config: &SimulationConfig,
    state: &mut LearningState<'_>,
    training: &[bool],
    t: u64,
) -> Result<(), EngineError> {
    let task = state.task;
    let partitions = state.partitions;
    let results: Vec<Result<(), EngineError>> = state
        .models
        .par_iter_mut()
        .zip(state.samplers.par_iter_mut())
        .enumerate()
        .map(|(i, (model, sampler))| {
            if !training[i] {
                return Ok(());
            }
            let updated = sgd_local_update(
                model,
                &partitions[i],
                task,
                config.learning_rate,
                config.local_steps,
                config.batch_size,
                sampler,
            )?;
            if !updated.is_finite() {
                return Err(EngineError::Divergence { round: t, node: i });
            }
            *model = updated;
            Ok(())
        })
        .collect();
    results.into_iter().collect()
}

fn aggregate(
    mode: Aggregation,
    mixing: &MixingMatrix,
    shared: &[ModelVector],
) -> Result<Vec<ModelVector>, EngineError> {
    match mode {
        Aggregation::Gossip => (0..shared.len()).into_par_iter().map(|i| gossip_aggregate(shared, mixing, i)).collect(),
        Aggregation::AllReduce => Ok(vec![all_reduce(shared)?; shared.len()]),
    }
}

fn snapshot(
    config: &SimulationConfig,
    learning: Option<&LearningState<'_>>,
    ledger: &EnergyLedger,
    t: u64,
) -> Result<MetricsRecord, EngineError> {
    let mut record = MetricsRecord {
        round: t + 1,
        mean_accuracy: None,
        std_accuracy: None,
        mean_loss: None,
        consensus_distance: None,
        cumulative_energy_wh: ledger.total_wh(),
        algorithm: config.algorithm.label().to_string(),
        phase: config.schedule.phase_after(t),
    };
    if let Some(state) = learning {
        let task = state.task;
        let per_node: Vec<(Option<f64>, f64)> = state
            .models
            .par_iter()
            .map(|m| -> Result<_, EngineError> {
                let acc = if task.is_classification() { Some(task.accuracy(m, state.eval_set)?) } else { None };
                Ok((acc, task.loss(m, state.eval_set)?))
            })
            .collect::<Result<_, _>>()?;
        let losses: Vec<f64> = per_node.iter().map(|p| p.1).collect();
        record.mean_loss = metrics::mean_std(&losses).map(|s| s.0);
        if task.is_classification() {
            let accs: Vec<f64> = per_node.iter().filter_map(|p| p.0).collect();
            if let Some((mean, std)) = metrics::mean_std(&accs) {
                record.mean_accuracy = Some(mean);
                record.std_accuracy = Some(std);
            }
        }
        record.consensus_distance = Some(metrics::consensus_distance(&state.models)?);
    }
    Ok(record)
}
