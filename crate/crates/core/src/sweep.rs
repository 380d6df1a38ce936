//! Grid search over (Γ_train, Γ_sync) at a fixed round count.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, EvalSplit, RunConfig};
use crate::runner::{execute, RunError};

/// Outcome of one grid cell. `error` is set when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub gamma_train: u64,
    pub gamma_sync: u64,
    pub accuracy: Option<f64>,
    pub energy_wh: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub gamma_train: Vec<u64>,
    pub gamma_sync: Vec<u64>,
    /// Row-major over `gamma_train` × `gamma_sync`.
    pub cells: Vec<SweepCell>,
}

/// Parses `a-b`, `a..b` (both inclusive), `a,b,c` or a single value.
pub fn parse_range(field: &str, text: &str) -> Result<Vec<u64>, ConfigError> {
    let bad = |m: String| ConfigError::new(field, m);
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad(format!("`{s}` is not a non-negative integer")));
    let text = text.trim();
    let values = if let Some((a, b)) = text.split_once("..").or_else(|| text.split_once('-')) {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(bad(format!("empty range `{text}`")));
        }
        (a..=b).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() {
        return Err(bad("range is empty".into()));
    }
    Ok(values)
}

/// Runs every grid cell on the validation split. Cells run in parallel;
/// a failing cell is recorded with its error and the sweep continues.
/// Configuration errors shared by all cells are reported up front.
pub fn run_sweep(base: &RunConfig, gamma_train: &[u64], gamma_sync: &[u64]) -> Result<SweepResult, RunError> {
    if gamma_train.is_empty() {
        return Err(ConfigError::new("gamma_train", "range is empty").into());
    }
    if gamma_sync.is_empty() {
        return Err(ConfigError::new("gamma_sync", "range is empty").into());
    }
    if gamma_train.contains(&0) {
        return Err(ConfigError::new("gamma_train", "values must be at least 1").into());
    }
    base.validate()?;
    let grid: Vec<(u64, u64)> = gamma_train.iter().flat_map(|&t| gamma_sync.iter().map(move |&s| (t, s))).collect();
    let run_cell = |&(gt, gs): &(u64, u64)| {
        let mut config = base.clone();
        config.gamma_train = gt;
        config.gamma_sync = gs;
        config.eval_split = EvalSplit::Validation;
        config.threads = 0;
        match execute(&config) {
            Ok(out) => SweepCell {
                gamma_train: gt,
                gamma_sync: gs,
                accuracy: out.records.last().and_then(|r| r.mean_accuracy),
                energy_wh: Some(out.ledger.total_wh()),
                error: None,
            },
            Err(e) => SweepCell { gamma_train: gt, gamma_sync: gs, accuracy: None, energy_wh: None, error: Some(e.to_string()) },
        }
    };
    let cells = if base.threads == 0 {
        grid.par_iter().map(run_cell).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(base.threads)
            .build()
            .map_err(|e| RunError::Runtime(format!("thread pool: {e}")))?
            .install(|| grid.par_iter().map(run_cell).collect())
    };
    Ok(SweepResult { gamma_train: gamma_train.to_vec(), gamma_sync: gamma_sync.to_vec(), cells })
}

/// Highest accuracy wins; equal accuracies go to the lower energy, then to
/// the earlier cell. Cells without an accuracy are never selected.
pub fn select_best(cells: &[SweepCell]) -> Option<&SweepCell> {
    let mut best: Option<&SweepCell> = None;
    for cell in cells {
        let (Some(acc), Some(energy)) = (cell.accuracy, cell.energy_wh) else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let (b_acc, b_energy) = (b.accuracy.unwrap(), b.energy_wh.unwrap());
                acc > b_acc || (acc == b_acc && energy < b_energy)
            }
        };
        if better {
            best = Some(cell);
        }
    }
    best
}

fn matrix_csv(result: &SweepResult, value: impl Fn(&SweepCell) -> Option<f64>) -> String {
    let mut out = String::from("gamma_train");
    for s in &result.gamma_sync {
        let _ = write!(out, ",sync_{s}");
    }
    out.push('\n');
    for (row, t) in result.gamma_train.iter().enumerate() {
        let _ = write!(out, "{t}");
        for cell in &result.cells[row * result.gamma_sync.len()..(row + 1) * result.gamma_sync.len()] {
            out.push(',');
            if let Some(v) = value(cell) {
                let _ = write!(out, "{v}");
            }
        }
        out.push('\n');
    }
    out
}

/// Final mean validation accuracy; rows are Γ_train, columns Γ_sync, failed cells empty.
pub fn accuracy_matrix_csv(result: &SweepResult) -> String {
    matrix_csv(result, |c| c.accuracy)
}

/// Total energy in Wh; same layout as [`accuracy_matrix_csv`].
pub fn energy_matrix_csv(result: &SweepResult) -> String {
    matrix_csv(result, |c| c.energy_wh)
}
