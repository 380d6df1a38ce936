//! Device energy profiles, training-energy accounting and budgets.
//!
//! Only training is charged: a node's consumption is its executed training
//! rounds times its per-round energy. Sharing and aggregation are free.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BUILTIN_TRACES: &str = include_str!("../data/builtin_traces.csv");

/// Ratio of training time to inference time for one batch.
pub const TRAINING_MULTIPLIER: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("{what} must lie in [0, 1], got {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("training round count must be at least 1")]
    NoTrainingRounds,
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate device `{0}` in trace")]
    DuplicateDevice(String),
    #[error("unknown trace dataset `{0}` (expected cifar10 or femnist)")]
    UnknownDataset(String),
    #[error("{device}: {message}")]
    Benchmark { device: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Energy characteristics of one device type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Energy of one training round, in mWh.
    pub per_round_mwh: f64,
    /// τ: training rounds affordable before the budget is exhausted.
    pub budget_rounds: u64,
    pub power_w: Option<f64>,
    pub round_duration_s: Option<f64>,
}

impl DeviceProfile {
    pub fn new(name: impl Into<String>, per_round_mwh: f64, budget_rounds: u64) -> Result<Self, EnergyError> {
        positive("per-round energy", per_round_mwh)?;
        Ok(DeviceProfile { name: name.into(), per_round_mwh, budget_rounds, power_w: None, round_duration_s: None })
    }

    /// Profile whose per-round energy is `power_w · round_duration_s`.
    pub fn from_power(
        name: impl Into<String>,
        power_w: f64,
        round_duration_s: f64,
        budget_rounds: u64,
    ) -> Result<Self, EnergyError> {
        let per_round_mwh = round_energy(power_w, round_duration_s)?;
        Ok(DeviceProfile {
            name: name.into(),
            per_round_mwh,
            budget_rounds,
            power_w: Some(power_w),
            round_duration_s: Some(round_duration_s),
        })
    }
}

fn positive(what: &'static str, value: f64) -> Result<f64, EnergyError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(EnergyError::NonPositive { what, value })
    }
}

/// Energy of one round, `P · Δ`, converted from W·s to mWh.
pub fn round_energy(power_w: f64, duration_s: f64) -> Result<f64, EnergyError> {
    positive("power", power_w)?;
    positive("duration", duration_s)?;
    Ok(power_w * duration_s / 3600.0 * 1000.0)
}

/// Per-round energy derived from a single-sample inference benchmark.
///
/// The round lasts `3 · inference_s_per_sample · param_ratio · batch_size · local_steps` seconds.
pub fn trace_from_benchmark(
    power_w: f64,
    inference_s_per_sample: f64,
    batch_size: u64,
    local_steps: u64,
    param_ratio: f64,
) -> Result<f64, EnergyError> {
    positive("inference time", inference_s_per_sample)?;
    positive("batch size", batch_size as f64)?;
    positive("local steps", local_steps as f64)?;
    positive("parameter ratio", param_ratio)?;
    let duration =
        TRAINING_MULTIPLIER * inference_s_per_sample * param_ratio * batch_size as f64 * local_steps as f64;
    round_energy(power_w, duration)
}

/// τ = ⌊capacity · fraction · 1000 / per-round energy⌋.
pub fn budget_from_battery(capacity_wh: f64, fraction: f64, per_round_mwh: f64) -> Result<u64, EnergyError> {
    positive("per-round energy", per_round_mwh)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(EnergyError::OutOfRange { what: "battery fraction", value: fraction });
    }
    if !(capacity_wh >= 0.0 && capacity_wh.is_finite()) {
        return Err(EnergyError::NonPositive { what: "battery capacity", value: capacity_wh });
    }
    Ok((capacity_wh * fraction * 1000.0 / per_round_mwh).floor() as u64)
}

/// Exact number of rounds `t ∈ [0, T)` with `t mod (Γt + Γs) < Γt`.
pub fn planned_training_rounds(gamma_train: u64, gamma_sync: u64, total_rounds: u64) -> u64 {
    let period = gamma_train + gamma_sync;
    if period == 0 {
        return 0;
    }
    (total_rounds / period) * gamma_train + (total_rounds % period).min(gamma_train)
}

/// Continuous estimate `Γt · T / (Γt + Γs)`.
pub fn planned_training_rounds_ratio(gamma_train: u64, gamma_sync: u64, total_rounds: u64) -> f64 {
    gamma_train as f64 * total_rounds as f64 / (gamma_train + gamma_sync) as f64
}

/// p = min(τ / T_train, 1).
pub fn training_probability(budget_rounds: u64, training_rounds: u64) -> Result<f64, EnergyError> {
    if training_rounds == 0 {
        return Err(EnergyError::NoTrainingRounds);
    }
    Ok((budget_rounds as f64 / training_rounds as f64).min(1.0))
}

/// Cumulative per-node training energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    per_round_mwh: Vec<f64>,
    train_rounds: Vec<u64>,
}

impl EnergyLedger {
    /// Empty ledger for nodes with the given per-node profiles.
    pub fn new(profiles: &[DeviceProfile]) -> Self {
        EnergyLedger {
            per_round_mwh: profiles.iter().map(|p| p.per_round_mwh).collect(),
            train_rounds: vec![0; profiles.len()],
        }
    }

    pub fn n(&self) -> usize {
        self.train_rounds.len()
    }

    pub fn charge(&mut self, node: usize) {
        self.train_rounds[node] += 1;
    }

    pub fn train_rounds(&self) -> &[u64] {
        &self.train_rounds
    }

    pub fn per_node_mwh(&self, node: usize) -> f64 {
        self.train_rounds[node] as f64 * self.per_round_mwh[node]
    }

    pub fn total_mwh(&self) -> f64 {
        (0..self.n()).map(|i| self.per_node_mwh(i)).sum()
    }

    /// Total consumption over all nodes, in Wh.
    pub fn total_wh(&self) -> f64 {
        self.total_mwh() / 1000.0
    }
}

pub fn total_energy(ledger: &EnergyLedger) -> f64 {
    ledger.total_wh()
}

/// Assigns profiles to `n` nodes round-robin, spreading device types evenly.
pub fn assign_round_robin(profiles: &[DeviceProfile], n: usize) -> Vec<DeviceProfile> {
    (0..n).map(|i| profiles[i % profiles.len()].clone()).collect()
}

/// Rounds a budget-oblivious run can afford if every node trains each round
/// and the network as a whole may spend the sum of the node budgets.
pub fn budget_matched_rounds(node_profiles: &[DeviceProfile], budgets: &[u64]) -> u64 {
    let budget: f64 = node_profiles.iter().zip(budgets).map(|(p, &b)| b as f64 * p.per_round_mwh).sum();
    let per_round: f64 = node_profiles.iter().map(|p| p.per_round_mwh).sum();
    if per_round > 0.0 {
        (budget / per_round).floor() as u64
    } else {
        0
    }
}

/// Which column of a two-dataset trace file to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TraceDataset {
    #[default]
    Cifar10,
    Femnist,
}

impl FromStr for TraceDataset {
    type Err = EnergyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" | "cifar" => Ok(TraceDataset::Cifar10),
            "femnist" => Ok(TraceDataset::Femnist),
            _ => Err(EnergyError::UnknownDataset(s.to_string())),
        }
    }
}

/// The shipped four-device smartphone trace.
pub fn builtin_trace(dataset: TraceDataset) -> Vec<DeviceProfile> {
    parse_traces(BUILTIN_TRACES, dataset).expect("built-in trace is well-formed")
}

pub fn load_traces(path: &Path, dataset: TraceDataset) -> Result<Vec<DeviceProfile>, EnergyError> {
    let text = std::fs::read_to_string(path).map_err(|e| EnergyError::Io(format!("{}: {e}", path.display())))?;
    parse_traces(&text, dataset)
}

/// Parses either the two-dataset trace layout
/// (`device,per_round_mwh_cifar,per_round_mwh_femnist,rounds_cifar,rounds_femnist`)
/// or the generic layout (`device,per_round_mwh,budget_rounds`).
pub fn parse_traces(text: &str, dataset: TraceDataset) -> Result<Vec<DeviceProfile>, EnergyError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| EnergyError::Parse { line: 1, message: e.to_string() })?
        .clone();
    let columns: Vec<&str> = header.iter().collect();
    let (energy_col, rounds_col) = match columns.as_slice() {
        ["device", "per_round_mwh_cifar", "per_round_mwh_femnist", "rounds_cifar", "rounds_femnist"] => {
            match dataset {
                TraceDataset::Cifar10 => (1, 3),
                TraceDataset::Femnist => (2, 4),
            }
        }
        ["device", "per_round_mwh", "budget_rounds"] => (1, 2),
        [] | [""] => return Err(EnergyError::Parse { line: 1, message: "empty trace".into() }),
        _ => {
            return Err(EnergyError::Parse { line: 1, message: format!("unrecognised header `{}`", columns.join(",")) })
        }
    };
    let mut seen = HashSet::new();
    let mut profiles = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| EnergyError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let name = record[0].to_string();
        let energy: f64 = record[energy_col]
            .parse()
            .map_err(|_| EnergyError::Parse { line, message: format!("bad energy `{}`", &record[energy_col]) })?;
        let rounds: u64 = record[rounds_col]
            .parse()
            .map_err(|_| EnergyError::Parse { line, message: format!("bad round count `{}`", &record[rounds_col]) })?;
        if !seen.insert(name.clone()) {
            return Err(EnergyError::DuplicateDevice(name));
        }
        let profile =
            DeviceProfile::new(name, energy, rounds).map_err(|e| EnergyError::Parse { line, message: e.to_string() })?;
        profiles.push(profile);
    }
    if profiles.is_empty() {
        return Err(EnergyError::Parse { line: 2, message: "trace has no devices".into() });
    }
    Ok(profiles)
}

/// Writes profiles in the generic `device,per_round_mwh,budget_rounds` layout.
pub fn write_generic_trace(profiles: &[DeviceProfile]) -> String {
    let mut out = String::from("device,per_round_mwh,budget_rounds\n");
    for p in profiles {
        let _ = writeln!(out, "{},{},{}", p.name, p.per_round_mwh, p.budget_rounds);
    }
    out
}

/// One row of a benchmark parameter file used to synthesise a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkParams {
    pub device: String,
    pub power_w: f64,
    pub inference_s_per_sample: f64,
    pub batch_size: u64,
    pub local_steps: u64,
    pub param_ratio: f64,
    pub battery_capacity_wh: f64,
    pub battery_fraction: f64,
}

impl BenchmarkParams {
    pub fn to_profile(&self) -> Result<DeviceProfile, EnergyError> {
        let wrap = |e: EnergyError| EnergyError::Benchmark { device: self.device.clone(), message: e.to_string() };
        let per_round_mwh = trace_from_benchmark(
            self.power_w,
            self.inference_s_per_sample,
            self.batch_size,
            self.local_steps,
            self.param_ratio,
        )
        .map_err(wrap)?;
        let budget_rounds =
            budget_from_battery(self.battery_capacity_wh, self.battery_fraction, per_round_mwh).map_err(wrap)?;
        let duration = TRAINING_MULTIPLIER
            * self.inference_s_per_sample
            * self.param_ratio
            * self.batch_size as f64
            * self.local_steps as f64;
        Ok(DeviceProfile {
            name: self.device.clone(),
            per_round_mwh,
            budget_rounds,
            power_w: Some(self.power_w),
            round_duration_s: Some(duration),
        })
    }
}

/// Parses a benchmark CSV with header
/// `device,power_w,inference_s_per_sample,batch_size,local_steps,param_ratio,battery_capacity_wh,battery_fraction`.
pub fn parse_benchmarks(text: &str) -> Result<Vec<BenchmarkParams>, EnergyError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (idx, row) in reader.deserialize::<BenchmarkParams>().enumerate() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(idx + 2, |p| p.line() as usize);
            EnergyError::Parse { line, message: e.to_string() }
        })?;
        out.push(row);
    }
    if out.is_empty() {
        return Err(EnergyError::Parse { line: 2, message: "no devices".into() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn round_energy_units() {
        assert_abs_diff_eq!(round_energy(10.0, 360.0).unwrap(), 1000.0, epsilon = 1e-9);
        assert_abs_diff_eq!(round_energy(6.532875, 3.6).unwrap(), 6.532875, epsilon = 1e-9);
        assert_abs_diff_eq!(round_energy(3.0, 7.0).unwrap(), round_energy(6.0, 3.5).unwrap(), epsilon = 1e-12);
        assert!(round_energy(0.0, 1.0).is_err());
        assert!(round_energy(1.0, -1.0).is_err());
    }

    #[test]
    fn profile_from_power_is_consistent() {
        let p = DeviceProfile::from_power("x", 2.5, 12.0, 10).unwrap();
        let expected = p.power_w.unwrap() * p.round_duration_s.unwrap() / 3600.0 * 1000.0;
        assert!((p.per_round_mwh - expected).abs() <= 1e-9);
        assert!(DeviceProfile::new("y", 0.0, 1).is_err());
    }

    #[test]
    fn battery_budget() {
        assert_eq!(budget_from_battery(17.77, 0.0, 6.532875).unwrap(), 0);
        assert_eq!(budget_from_battery(17.77, 0.10, 6.532875).unwrap(), 272);
        assert_eq!(budget_from_battery(1.0, 0.001, 6.532875).unwrap(), 0);
        assert!(budget_from_battery(1.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn planned_rounds_examples() {
        assert_eq!(planned_training_rounds(4, 4, 1000), 500);
        assert_eq!(planned_training_rounds(4, 2, 1000), 668);
        assert_eq!(planned_training_rounds(3, 3, 1000), 501);
        assert_eq!(planned_training_rounds(4, 2, 3000), 2000);
        for k in 1..6 {
            assert_eq!(planned_training_rounds(k, 0, 137), 137);
        }
        assert_abs_diff_eq!(planned_training_rounds_ratio(4, 2, 1000), 666.666_666_666_666_6, epsilon = 1e-9);
    }

    #[test]
    fn probability_examples() {
        assert_eq!(training_probability(500, 500).unwrap(), 1.0);
        assert_abs_diff_eq!(training_probability(272, 500).unwrap(), 0.544, epsilon = 1e-15);
        assert_eq!(training_probability(700, 500).unwrap(), 1.0);
        assert_eq!(training_probability(1, 0), Err(EnergyError::NoTrainingRounds));
    }

    #[test]
    fn builtin_traces_match_table() {
        let cifar = builtin_trace(TraceDataset::Cifar10);
        let expected = [
            ("Xiaomi 12 Pro", 6.532875, 272),
            ("Samsung Galaxy S22 Ultra", 5.986076, 324),
            ("OnePlus Nord 2 5G", 2.556283, 681),
            ("Xiaomi Poco X3", 8.51912, 272),
        ];
        for (p, (name, e, r)) in cifar.iter().zip(expected) {
            assert_eq!((p.name.as_str(), p.per_round_mwh, p.budget_rounds), (name, e, r));
        }
        let femnist: Vec<(f64, u64)> =
            builtin_trace(TraceDataset::Femnist).iter().map(|p| (p.per_round_mwh, p.budget_rounds)).collect();
        assert_eq!(femnist, vec![(21.508007, 413), (19.707797, 492), (8.415981, 1034), (28.047269, 413)]);
    }

    #[test]
    fn trace_parse_errors() {
        assert!(matches!(parse_traces("", TraceDataset::Cifar10), Err(EnergyError::Parse { .. })));
        assert!(matches!(
            parse_traces("device,per_round_mwh,budget_rounds\n", TraceDataset::Cifar10),
            Err(EnergyError::Parse { .. })
        ));
        assert_eq!(
            parse_traces("device,per_round_mwh,budget_rounds\na,1.0,3\nb,oops,4\n", TraceDataset::Cifar10),
            Err(EnergyError::Parse { line: 3, message: "bad energy `oops`".into() })
        );
        assert_eq!(
            parse_traces("device,per_round_mwh,budget_rounds\na,1.0,3\na,2.0,4\n", TraceDataset::Cifar10),
            Err(EnergyError::DuplicateDevice("a".into()))
        );
    }

    #[test]
    fn generic_trace_roundtrip() {
        let profiles = builtin_trace(TraceDataset::Femnist);
        let text = write_generic_trace(&profiles);
        assert_eq!(parse_traces(&text, TraceDataset::Cifar10).unwrap(), profiles);
    }

    #[test]
    fn benchmark_trace_structure() {
        // One step over one sample is three inferences.
        let inference = round_energy(4.0, 0.02).unwrap();
        assert_abs_diff_eq!(trace_from_benchmark(4.0, 0.02, 1, 1, 1.0).unwrap(), 3.0 * inference, epsilon = 1e-12);
        let full = trace_from_benchmark(4.0, 0.02, 32, 20, 1.0).unwrap();
        assert_abs_diff_eq!(trace_from_benchmark(4.0, 0.02, 32, 20, 0.5).unwrap(), full / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(trace_from_benchmark(4.0, 0.02, 64, 20, 1.0).unwrap(), 2.0 * full, epsilon = 1e-12);
        // Inverting for a 6.532875 mWh round: Δ = 6.532875 · 3.6 / P seconds.
        let power = 5.0;
        let inference_s = 6.532875 * 3.6 / power / (3.0 * 32.0 * 20.0);
        assert_abs_diff_eq!(trace_from_benchmark(power, inference_s, 32, 20, 1.0).unwrap(), 6.532875, epsilon = 1e-9);
        assert!(trace_from_benchmark(4.0, 0.02, 0, 20, 1.0).is_err());
    }

    #[test]
    fn benchmark_file_to_profiles() {
        let text = "device,power_w,inference_s_per_sample,batch_size,local_steps,param_ratio,battery_capacity_wh,battery_fraction\n\
                    a,5.0,0.001,32,20,1.0,17.77,0.1\n";
        let rows = parse_benchmarks(text).unwrap();
        let p = rows[0].to_profile().unwrap();
        assert_abs_diff_eq!(p.per_round_mwh, round_energy(5.0, 3.0 * 0.001 * 640.0).unwrap(), epsilon = 1e-12);
        assert_eq!(p.budget_rounds, budget_from_battery(17.77, 0.1, p.per_round_mwh).unwrap());
        let bad = "device,power_w,inference_s_per_sample,batch_size,local_steps,param_ratio,battery_capacity_wh,battery_fraction\n\
                   b,-1,0.001,32,20,1.0,10,0.1\n";
        let err = parse_benchmarks(bad).unwrap()[0].to_profile().unwrap_err();
        assert!(matches!(err, EnergyError::Benchmark { ref device, .. } if device == "b"));
    }

    #[test]
    fn table_totals() {
        let nodes = assign_round_robin(&builtin_trace(TraceDataset::Cifar10), 256);
        let mut ledger = EnergyLedger::new(&nodes);
        assert_eq!(total_energy(&ledger), 0.0);
        for _ in 0..1000 {
            for i in 0..256 {
                ledger.charge(i);
            }
        }
        assert_abs_diff_eq!(total_energy(&ledger), 1510.04, epsilon = 0.01);
        let mut half = EnergyLedger::new(&nodes);
        for _ in 0..500 {
            (0..256).for_each(|i| half.charge(i));
        }
        assert_abs_diff_eq!(total_energy(&half), 755.02, epsilon = 0.01);
    }

    #[test]
    fn budget_matched_rounds_of_identical_devices() {
        let p = DeviceProfile::new("a", 2.0, 0).unwrap();
        assert_eq!(budget_matched_rounds(&[p.clone(), p], &[10, 20]), 15);
    }

    proptest! {
        #[test]
        fn planned_rounds_bracket_ratio(gt in 1u64..10, gs in 0u64..10, t in 1u64..5000) {
            let exact = planned_training_rounds(gt, gs, t) as f64;
            let ratio = planned_training_rounds_ratio(gt, gs, t);
            prop_assert!(exact >= ratio - gs as f64 - 1e-9 && exact <= ratio + gt as f64 + 1e-9);
            if t % (gt + gs) == 0 {
                prop_assert!((exact - ratio).abs() < 1e-9);
            }
            let brute = (0..t).filter(|x| x % (gt + gs) < gt).count() as f64;
            prop_assert_eq!(exact, brute);
        }
    }
}
