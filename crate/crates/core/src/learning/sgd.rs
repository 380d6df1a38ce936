use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{LabeledDataset, LearningError, ModelVector, TaskSpec};

/// Without-replacement mini-batch sampler over a node's local data.
///
/// Samples are drawn from a shuffled order; once fewer than a full batch
/// remain, the order is reshuffled. The sampler carries its position across
/// calls, so consecutive local updates continue the same epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(len: usize, rng: ChaCha8Rng) -> Self {
        BatchSampler { rng, order: (0..len).collect(), cursor: len }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Next batch of at most `batch_size` distinct indices.
    pub fn next_batch(&mut self, batch_size: usize) -> &[usize] {
        let size = batch_size.min(self.order.len());
        if self.cursor + size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += size;
        &self.order[start..self.cursor]
    }
}

/// Runs `steps` sequential SGD steps `x ← x − lr·∇f(x, ξ)` on mini-batches
/// drawn from `sampler`.
pub fn sgd_local_update(
    model: &ModelVector,
    data: &LabeledDataset,
    task: &TaskSpec,
    learning_rate: f64,
    steps: usize,
    batch_size: usize,
    sampler: &mut BatchSampler,
) -> Result<ModelVector, LearningError> {
    if steps == 0 {
        return Ok(model.clone());
    }
    if data.is_empty() || batch_size == 0 {
        return Err(LearningError::EmptyBatch);
    }
    if sampler.len() != data.len() {
        return Err(LearningError::DimensionMismatch { expected: data.len(), got: sampler.len() });
    }
    task.check(model, data)?;
    let mut x = model.clone();
    for _ in 0..steps {
        let grad = task.gradient_on(&x, data, sampler.next_batch(batch_size))?;
        x.axpy(-learning_rate, &grad);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::SyntheticSpec;
    use crate::rng::{stream, StreamPurpose};
    use nalgebra::DMatrix;

    fn sampler(len: usize, seed: u64) -> BatchSampler {
        BatchSampler::new(len, stream(seed, 0, 0, StreamPurpose::Sampling))
    }

    #[test]
    fn zero_steps_is_identity() {
        let data = LabeledDataset::new(1, vec![1.0], vec![0]).unwrap();
        let model = ModelVector::from(vec![0.7]);
        let out = sgd_local_update(&model, &data, &TaskSpec::least_squares(1, 0.0), 0.1, 0, 4, &mut sampler(1, 0)).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn analytic_single_step() {
        // f(x) = ½x² from the single sample a = 1, y = 0.
        let data = LabeledDataset::new(1, vec![1.0], vec![0]).unwrap();
        let out = sgd_local_update(
            &ModelVector::from(vec![1.0]),
            &data,
            &TaskSpec::least_squares(1, 0.0),
            0.1,
            1,
            1,
            &mut sampler(1, 0),
        )
        .unwrap();
        assert!((out.as_slice()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn two_steps_equal_two_chained_calls() {
        let spec = SyntheticSpec { classes: 3, feature_dim: 4, train_per_class: 7, eval_per_class: 1, ..Default::default() };
        let data = spec.generate().unwrap().train;
        let task = TaskSpec::logistic(4, 3, 0.01);
        let x0 = ModelVector::zeros(12);
        for batch in [1, 4, 5, 50] {
            let mut s1 = sampler(data.len(), 9);
            let joint = sgd_local_update(&x0, &data, &task, 0.3, 2, batch, &mut s1).unwrap();
            let mut s2 = sampler(data.len(), 9);
            let once = sgd_local_update(&x0, &data, &task, 0.3, 1, batch, &mut s2).unwrap();
            let twice = sgd_local_update(&once, &data, &task, 0.3, 1, batch, &mut s2).unwrap();
            assert_eq!(joint, twice);
        }
    }

    #[test]
    fn sampler_covers_an_epoch_without_repeats() {
        let mut s = sampler(10, 3);
        let mut seen: Vec<usize> = Vec::new();
        for _ in 0..5 {
            seen.extend_from_slice(s.next_batch(2));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn full_batch_descent_on_least_squares_is_monotone() {
        let spec = SyntheticSpec { classes: 5, feature_dim: 6, train_per_class: 8, eval_per_class: 1, seed: 4, ..Default::default() };
        let data = spec.generate().unwrap().train;
        let task = TaskSpec::least_squares(6, 0.0);
        // Largest curvature of the mean loss: top eigenvalue of AᵀA / s.
        let a = DMatrix::from_fn(data.len(), 6, |i, k| data.row(i)[k]);
        let hessian = a.transpose() * &a / data.len() as f64;
        let curvature = hessian.symmetric_eigenvalues().max();
        let lr = 1.0 / curvature;
        let mut s = sampler(data.len(), 1);
        let mut x = ModelVector::zeros(6);
        let mut last = task.loss(&x, &data).unwrap();
        for _ in 0..50 {
            x = sgd_local_update(&x, &data, &task, lr, 1, data.len(), &mut s).unwrap();
            let now = task.loss(&x, &data).unwrap();
            assert!(now <= last + 1e-12, "{now} > {last}");
            last = now;
        }
    }

    #[test]
    fn empty_data_is_rejected() {
        let task = TaskSpec::least_squares(1, 0.0);
        let err = sgd_local_update(&ModelVector::zeros(1), &LabeledDataset::empty(1), &task, 0.1, 1, 1, &mut sampler(0, 0));
        assert_eq!(err, Err(LearningError::EmptyBatch));
    }
}
