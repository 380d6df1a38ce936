//! Evaluation snapshots, cross-node statistics and result files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::EnergyLedger;
use crate::learning::{LabeledDataset, LearningError, ModelVector, TaskSpec};

/// Fixed column order of the metrics CSV.
pub const CSV_HEADER: &str =
    "round,mean_accuracy,std_accuracy,mean_loss,consensus_distance,cumulative_energy_wh,algorithm,phase";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no models to evaluate")]
    Empty,
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error("metrics csv line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Where in the train/sync pattern a snapshot was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    AfterTrainBlock,
    AfterSyncBlock,
    PerRound,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::AfterTrainBlock => "after-train-block",
            Phase::AfterSyncBlock => "after-sync-block",
            Phase::PerRound => "per-round",
        }
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "after-train-block" => Ok(Phase::AfterTrainBlock),
            "after-sync-block" => Ok(Phase::AfterSyncBlock),
            "per-round" => Ok(Phase::PerRound),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

/// One evaluation snapshot. Learning-derived fields are `None` for
/// energy-only runs, and accuracies are `None` for regression tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Number of completed rounds.
    pub round: u64,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    pub mean_loss: Option<f64>,
    pub consensus_distance: Option<f64>,
    pub cumulative_energy_wh: f64,
    pub algorithm: String,
    pub phase: Phase,
}

/// Population mean and standard deviation of per-node Top-1 accuracy.
pub fn accuracy_stats(
    models: &[ModelVector],
    testset: &LabeledDataset,
    task: &TaskSpec,
) -> Result<(f64, f64), MetricsError> {
    let accuracies = models.iter().map(|m| task.accuracy(m, testset)).collect::<Result<Vec<_>, _>>()?;
    mean_std(&accuracies).ok_or(MetricsError::Empty)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Coordinate-wise average of all models.
pub fn average_model(models: &[ModelVector]) -> Result<ModelVector, MetricsError> {
    let first = models.first().ok_or(MetricsError::Empty)?;
    let mut avg = vec![0.0; first.len()];
    for m in models {
        if m.len() != avg.len() {
            return Err(LearningError::DimensionMismatch { expected: avg.len(), got: m.len() }.into());
        }
        for (a, v) in avg.iter_mut().zip(m.as_slice()) {
            *a += v;
        }
    }
    let n = models.len() as f64;
    avg.iter_mut().for_each(|a| *a /= n);
    Ok(avg.into())
}

/// Mean Euclidean distance of each model from the global average.
pub fn consensus_distance(models: &[ModelVector]) -> Result<f64, MetricsError> {
    let avg = average_model(models)?;
    Ok(models.iter().map(|m| m.squared_distance(&avg).sqrt()).sum::<f64>() / models.len() as f64)
}

/// Root-mean-square distance from the global average, `‖X − X̄‖_F / √n`.
pub fn consensus_rms(models: &[ModelVector]) -> Result<f64, MetricsError> {
    let avg = average_model(models)?;
    Ok((models.iter().map(|m| m.squared_distance(&avg)).sum::<f64>() / models.len() as f64).sqrt())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders the metrics CSV: header, one row per record, then a `#` summary line.
pub fn metrics_csv(records: &[MetricsRecord], ledger: &EnergyLedger) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.round,
            opt(r.mean_accuracy),
            opt(r.std_accuracy),
            opt(r.mean_loss),
            opt(r.consensus_distance),
            r.cumulative_energy_wh,
            r.algorithm,
            r.phase.as_str()
        );
    }
    let final_acc = records.last().and_then(|r| r.mean_accuracy);
    let _ = writeln!(out, "# summary,final_mean_accuracy={},total_energy_wh={}", opt(final_acc), ledger.total_wh());
    out
}

/// Parses a metrics CSV written by [`metrics_csv`]; the summary line is skipped.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        _ => return Err(MetricsError::Parse { line: 1, message: "missing or unexpected header".into() }),
    }
    lines
        .map(|(idx, line)| {
            let line_no = idx + 1;
            let err = |message: String| MetricsError::Parse { line: line_no, message };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(err(format!("expected 8 fields, found {}", fields.len())));
            }
            let num = |s: &str| -> Result<Option<f64>, MetricsError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| err(format!("bad number `{s}`")))
                }
            };
            Ok(MetricsRecord {
                round: fields[0].parse().map_err(|_| err(format!("bad round `{}`", fields[0])))?,
                mean_accuracy: num(fields[1])?,
                std_accuracy: num(fields[2])?,
                mean_loss: num(fields[3])?,
                consensus_distance: num(fields[4])?,
                cumulative_energy_wh: num(fields[5])?.ok_or_else(|| err("missing energy".into()))?,
                algorithm: fields[6].to_string(),
                phase: fields[7].parse().map_err(err)?,
            })
        })
        .collect()
}

/// Paths written by [`emit_results`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResultFiles {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
}

/// Summary document mirroring the run: totals, per-node training counts
/// and the effective configuration.
pub fn summary_json(
    label: &str,
    records: &[MetricsRecord],
    ledger: &EnergyLedger,
    config: &serde_json::Value,
) -> serde_json::Value {
    let last = records.last();
    serde_json::json!({
        "label": label,
        "final_round": last.map(|r| r.round),
        "final_mean_accuracy": last.and_then(|r| r.mean_accuracy),
        "final_std_accuracy": last.and_then(|r| r.std_accuracy),
        "total_energy_wh": ledger.total_wh(),
        "train_rounds_per_node": ledger.train_rounds(),
        "records": records.len(),
        "config": config,
    })
}

/// Writes `<label>.metrics.csv` and `<label>.summary.json` into `dir`.
pub fn emit_results(
    records: &[MetricsRecord],
    ledger: &EnergyLedger,
    dir: &Path,
    label: &str,
    config: &serde_json::Value,
) -> Result<ResultFiles, MetricsError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| MetricsError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let metrics_csv = dir.join(format!("{label}.metrics.csv"));
    std::fs::write(&metrics_csv, self::metrics_csv(records, ledger)).map_err(io(&metrics_csv))?;
    let summary_json = dir.join(format!("{label}.summary.json"));
    let summary = serde_json::to_string_pretty(&self::summary_json(label, records, ledger, config))
        .expect("summary serializes");
    std::fs::write(&summary_json, summary + "\n").map_err(io(&summary_json))?;
    Ok(ResultFiles { metrics_csv, summary_json })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::DeviceProfile;
    use proptest::prelude::*;

    #[test]
    fn two_point_population_std() {
        let (mean, std) = mean_std(&[0.4, 0.6]).unwrap();
        assert!((mean - 0.5).abs() < 1e-15);
        assert!((std - 0.1).abs() < 1e-15);
        assert_eq!(mean_std(&[]), None);
    }

    #[test]
    fn identical_models_have_zero_spread() {
        let data = LabeledDataset::new(1, vec![1.0, -1.0, 2.0], vec![0, 1, 1]).unwrap();
        let task = TaskSpec::logistic(1, 2, 0.0);
        let models = vec![ModelVector::from(vec![0.3, -0.2]); 4];
        let (_, std) = accuracy_stats(&models, &data, &task).unwrap();
        assert_eq!(std, 0.0);
        assert_eq!(consensus_distance(&models).unwrap(), 0.0);
        assert!(matches!(accuracy_stats(&[], &data, &task), Err(MetricsError::Empty)));
    }

    #[test]
    fn consensus_of_two_scalars() {
        let models = vec![ModelVector::from(vec![0.0]), ModelVector::from(vec![2.0])];
        assert_eq!(consensus_distance(&models).unwrap(), 1.0);
        assert!(matches!(consensus_distance(&[]), Err(MetricsError::Empty)));
    }

    fn ledger() -> EnergyLedger {
        EnergyLedger::new(&[DeviceProfile::new("a", 1.5, 3).unwrap()])
    }

    #[test]
    fn empty_records_give_header_and_zero_summary() {
        let csv = metrics_csv(&[], &ledger());
        assert_eq!(csv, format!("{CSV_HEADER}\n# summary,final_mean_accuracy=,total_energy_wh=0\n"));
        assert!(parse_metrics_csv(&csv).unwrap().is_empty());
    }

    #[test]
    fn emit_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let rec = MetricsRecord {
            round: 8,
            mean_accuracy: Some(0.5),
            std_accuracy: Some(0.25),
            mean_loss: Some(1.2),
            consensus_distance: Some(0.01),
            cumulative_energy_wh: 3.0,
            algorithm: "skiptrain".into(),
            phase: Phase::AfterSyncBlock,
        };
        let files = emit_results(&[rec.clone()], &ledger(), dir.path(), "demo", &serde_json::json!({"n": 1})).unwrap();
        let text = std::fs::read_to_string(&files.metrics_csv).unwrap();
        assert!(text.starts_with("round,mean_accuracy,std_accuracy,mean_loss,consensus_distance,cumulative_energy_wh"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), vec![rec]);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&files.summary_json).unwrap()).unwrap();
        assert_eq!(summary["config"]["n"], 1);
        assert_eq!(summary["final_mean_accuracy"], 0.5);
    }

    #[test]
    fn parse_rejects_malformed_rows() {
        let text = format!("{CSV_HEADER}\n1,0.5,0.1,1,0,2,x,per-round\n2,zz,0.1,1,0,2,x,per-round\n");
        assert!(matches!(parse_metrics_csv(&text), Err(MetricsError::Parse { line: 3, .. })));
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL
    }

    proptest! {
        #[test]
        fn csv_roundtrip(rows in prop::collection::vec((any::<u64>(), prop::option::of(finite()), finite(), 0usize..3), 0..20)) {
            let records: Vec<MetricsRecord> = rows
                .into_iter()
                .map(|(round, acc, e, phase)| MetricsRecord {
                    round,
                    mean_accuracy: acc,
                    std_accuracy: acc.map(f64::abs),
                    mean_loss: Some(e),
                    consensus_distance: None,
                    cumulative_energy_wh: e,
                    algorithm: "dpsgd".into(),
                    phase: [Phase::AfterTrainBlock, Phase::AfterSyncBlock, Phase::PerRound][phase],
                })
                .collect();
            let parsed = parse_metrics_csv(&metrics_csv(&records, &ledger())).unwrap();
            prop_assert_eq!(parsed, records);
        }
    }
}
