use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LearningError;
use crate::rng::{stream, StreamPurpose};

/// Row-major feature matrix with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    feature_dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(feature_dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self, LearningError> {
        if features.len() != feature_dim * labels.len() {
            return Err(LearningError::InvalidDataset(format!(
                "{} feature values for {} rows of width {feature_dim}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(LearningError::InvalidDataset("non-finite feature value".into()));
        }
        Ok(LabeledDataset { feature_dim, features, labels })
    }

    pub fn empty(feature_dim: usize) -> Self {
        LabeledDataset { feature_dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Largest label plus one, or 0 for an empty dataset.
    pub fn label_span(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset { feature_dim: self.feature_dim, features, labels }
    }

    /// Appends all rows of `other`.
    pub fn extend(&mut self, other: &LabeledDataset) -> Result<(), LearningError> {
        if other.feature_dim != self.feature_dim {
            return Err(LearningError::DimensionMismatch { expected: self.feature_dim, got: other.feature_dim });
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// Writes `f0,..,f{k-1},label` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), LearningError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.feature_dim).map(|k| format!("f{k}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(io_err)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            record.push(self.labels[i].to_string());
            w.write_record(&record).map_err(io_err)?;
        }
        w.flush().map_err(|e| LearningError::Io(e.to_string()))
    }

    /// Reads the CSV layout produced by [`LabeledDataset::write_csv`]: a
    /// header row, feature columns, then an integer label column.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, LearningError> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let width = r.headers().map_err(io_err)?.len();
        if width < 2 {
            return Err(LearningError::Csv { line: 1, message: "need at least one feature and a label".into() });
        }
        let feature_dim = width - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (idx, record) in r.records().enumerate() {
            let line = idx + 2;
            let record = record.map_err(|e| LearningError::Csv { line, message: e.to_string() })?;
            for field in record.iter().take(feature_dim) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| LearningError::Csv { line, message: format!("bad feature `{field}`") })?;
                features.push(v);
            }
            let label = &record[feature_dim];
            labels.push(
                label
                    .parse()
                    .map_err(|_| LearningError::Csv { line, message: format!("bad label `{label}`") })?,
            );
        }
        LabeledDataset::new(feature_dim, features, labels)
    }
}

fn io_err(e: csv::Error) -> LearningError {
    LearningError::Io(e.to_string())
}

/// Splits a dataset into label-sorted shards and deals `shards_per_node`
/// shards to each of `n` nodes through a seeded permutation.
///
/// Shard `s` covers sorted positions `[s*len/k, (s+1)*len/k)` with
/// `k = n * shards_per_node`, so shard sizes differ by at most one.
pub fn shard_partition(
    dataset: &LabeledDataset,
    n: usize,
    shards_per_node: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>, LearningError> {
    let shards = n * shards_per_node;
    if shards == 0 || dataset.len() < shards {
        return Err(LearningError::DatasetTooSmall { size: dataset.len(), shards });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| dataset.label(i));
    let len = dataset.len();
    let bounds = |s: usize| (s * len / shards, (s + 1) * len / shards);

    let mut shard_ids: Vec<usize> = (0..shards).collect();
    shard_ids.shuffle(&mut stream(seed, 0, 0, StreamPurpose::Partition));

    Ok(shard_ids
        .chunks_exact(shards_per_node)
        .map(|assigned| {
            let indices: Vec<usize> = assigned
                .iter()
                .flat_map(|&s| {
                    let (lo, hi) = bounds(s);
                    order[lo..hi].iter().copied()
                })
                .collect();
            dataset.subset(&indices)
        })
        .collect())
}

/// Parameters of the Gaussian class-conditional generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    /// Samples per class in each of the validation and test sets.
    pub eval_per_class: usize,
    /// Standard deviation of the class centres around the origin.
    pub separation: f64,
    /// Standard deviation of samples around their class centre.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            feature_dim: 20,
            train_per_class: 160,
            eval_per_class: 100,
            separation: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Disjoint train, validation and test draws from one generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<SyntheticData, LearningError> {
        if self.classes == 0 || self.feature_dim == 0 {
            return Err(LearningError::InvalidDataset("classes and feature_dim must be positive".into()));
        }
        if !(self.separation.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            return Err(LearningError::InvalidDataset("separation and noise must be finite, noise >= 0".into()));
        }
        let mut center_rng = stream(self.seed, 0, 0, StreamPurpose::Dataset);
        let centers: Vec<f64> = (0..self.classes * self.feature_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut center_rng);
                self.separation * z
            })
            .collect();
        let draw = |split: u64, per_class: usize| {
            let mut rng = stream(self.seed, 0, split, StreamPurpose::Dataset);
            let mut features = Vec::with_capacity(self.classes * per_class * self.feature_dim);
            let mut labels = Vec::with_capacity(self.classes * per_class);
            for _ in 0..per_class {
                for c in 0..self.classes {
                    let center = &centers[c * self.feature_dim..(c + 1) * self.feature_dim];
                    features.extend(center.iter().map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + self.noise * z
                    }));
                    labels.push(c);
                }
            }
            LabeledDataset::new(self.feature_dim, features, labels)
        };
        Ok(SyntheticData {
            train: draw(1, self.train_per_class)?,
            validation: draw(2, self.eval_per_class)?,
            test: draw(3, self.eval_per_class)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ten_by_ten() -> LabeledDataset {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let features: Vec<f64> = (0..100).map(|i| i as f64).collect();
        LabeledDataset::new(1, features, labels).unwrap()
    }

    fn multiset(d: &LabeledDataset) -> Vec<(u64, usize)> {
        let mut v: Vec<_> = (0..d.len()).map(|i| (d.row(i)[0].to_bits(), d.label(i))).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn single_node_gets_everything() {
        let data = ten_by_ten();
        let parts = shard_partition(&data, 1, 2, 3).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(multiset(&parts[0]), multiset(&data));
    }

    #[test]
    fn two_shards_per_node_limit_labels() {
        let data = ten_by_ten();
        for seed in 0..10 {
            let parts = shard_partition(&data, 5, 2, seed).unwrap();
            for p in &parts {
                assert_eq!(p.len(), 20);
                let labels: BTreeSet<_> = p.labels().iter().collect();
                assert!(labels.len() <= 2);
            }
        }
    }

    #[test]
    fn too_small_dataset_errors() {
        let data = ten_by_ten();
        assert_eq!(
            shard_partition(&data, 60, 2, 0),
            Err(LearningError::DatasetTooSmall { size: 100, shards: 120 })
        );
    }

    #[test]
    fn csv_roundtrip() {
        let data = SyntheticSpec { train_per_class: 3, eval_per_class: 1, ..Default::default() }
            .generate()
            .unwrap()
            .train;
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        assert_eq!(LabeledDataset::read_csv(buf.as_slice()).unwrap(), data);
    }

    #[test]
    fn csv_errors_carry_line() {
        let text = "f0,label\n1.0,0\nabc,1\n";
        assert!(matches!(LabeledDataset::read_csv(text.as_bytes()), Err(LearningError::Csv { line: 3, .. })));
    }

    #[test]
    fn synthetic_splits_have_expected_sizes() {
        let spec = SyntheticSpec { classes: 4, feature_dim: 3, train_per_class: 5, eval_per_class: 2, ..Default::default() };
        let data = spec.generate().unwrap();
        assert_eq!(data.train.len(), 20);
        assert_eq!(data.validation.len(), 8);
        assert_eq!(data.test.len(), 8);
        assert_ne!(data.validation, data.test);
        assert_eq!(spec.generate().unwrap(), data);
    }

    proptest! {
        #[test]
        fn partition_is_a_partition(size in 10usize..200, n in 1usize..5, spn in 1usize..3, seed in any::<u64>()) {
            let labels: Vec<usize> = (0..size).map(|i| (i * 7) % 5).collect();
            let features: Vec<f64> = (0..size).map(|i| i as f64).collect();
            let data = LabeledDataset::new(1, features, labels).unwrap();
            prop_assume!(size >= n * spn);
            let parts = shard_partition(&data, n, spn, seed).unwrap();
            prop_assert_eq!(parts.len(), n);
            let mut union = LabeledDataset::empty(1);
            for p in &parts {
                union.extend(p).unwrap();
            }
            prop_assert_eq!(multiset(&union), multiset(&data));
            let sizes: Vec<usize> = parts.iter().map(LabeledDataset::len).collect();
            let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= spn);
        }
    }
}
