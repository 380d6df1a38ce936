use serde::{Deserialize, Serialize};

use super::{LabeledDataset, LearningError};

/// Flat parameter vector exchanged between nodes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelVector(Vec<f64>);

impl ModelVector {
    pub fn zeros(dim: usize) -> Self {
        ModelVector(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &ModelVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn squared_distance(&self, other: &ModelVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for ModelVector {
    fn from(values: Vec<f64>) -> Self {
        ModelVector(values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    /// Linear regression onto the numeric label, loss `½(a·x − y)²`.
    LeastSquares,
    /// Softmax regression with cross-entropy loss.
    Logistic { classes: usize },
}

/// A convex learning task; the model is either `f` weights or a `C × f`
/// class-major weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub feature_dim: usize,
    /// Coefficient λ of the `λ/2 ‖x‖²` penalty.
    pub l2: f64,
}

impl TaskSpec {
    pub fn least_squares(feature_dim: usize, l2: f64) -> Self {
        TaskSpec { kind: TaskKind::LeastSquares, feature_dim, l2 }
    }

    pub fn logistic(feature_dim: usize, classes: usize, l2: f64) -> Self {
        TaskSpec { kind: TaskKind::Logistic { classes }, feature_dim, l2 }
    }

    pub fn model_dim(&self) -> usize {
        match self.kind {
            TaskKind::LeastSquares => self.feature_dim,
            TaskKind::Logistic { classes } => self.feature_dim * classes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.kind, TaskKind::Logistic { .. })
    }

    pub(crate) fn check(&self, model: &ModelVector, data: &LabeledDataset) -> Result<(), LearningError> {
        if model.len() != self.model_dim() {
            return Err(LearningError::DimensionMismatch { expected: self.model_dim(), got: model.len() });
        }
        if data.feature_dim() != self.feature_dim {
            return Err(LearningError::DimensionMismatch { expected: self.feature_dim, got: data.feature_dim() });
        }
        if let TaskKind::Logistic { classes } = self.kind {
            if let Some(&label) = data.labels().iter().find(|&&l| l >= classes) {
                return Err(LearningError::LabelOutOfRange { label, classes });
            }
        }
        Ok(())
    }

    /// Mean per-sample loss plus the l2 penalty.
    pub fn loss(&self, model: &ModelVector, data: &LabeledDataset) -> Result<f64, LearningError> {
        self.check(model, data)?;
        if data.is_empty() {
            return Err(LearningError::EmptyBatch);
        }
        let x = model.as_slice();
        let f = self.feature_dim;
        let mut total = 0.0;
        let mut scores = vec![0.0; self.model_dim() / f.max(1)];
        for i in 0..data.len() {
            let a = data.row(i);
            total += match self.kind {
                TaskKind::LeastSquares => {
                    let r = dot(a, x) - data.label(i) as f64;
                    0.5 * r * r
                }
                TaskKind::Logistic { .. } => {
                    class_scores(x, a, &mut scores);
                    log_sum_exp(&scores) - scores[data.label(i)]
                }
            };
        }
        Ok(total / data.len() as f64 + 0.5 * self.l2 * model.norm().powi(2))
    }

    /// Gradient of the batch-mean loss.
    pub fn gradient(&self, model: &ModelVector, batch: &LabeledDataset) -> Result<ModelVector, LearningError> {
        self.check(model, batch)?;
        let all: Vec<usize> = (0..batch.len()).collect();
        self.gradient_on(model, batch, &all)
    }

    /// Gradient of the mean loss over `indices` of `data`; dimensions are assumed checked.
    pub(crate) fn gradient_on(
        &self,
        model: &ModelVector,
        data: &LabeledDataset,
        indices: &[usize],
    ) -> Result<ModelVector, LearningError> {
        if indices.is_empty() {
            return Err(LearningError::EmptyBatch);
        }
        let x = model.as_slice();
        let f = self.feature_dim;
        let scale = 1.0 / indices.len() as f64;
        let mut grad = vec![0.0; x.len()];
        match self.kind {
            TaskKind::LeastSquares => {
                for &i in indices {
                    let a = data.row(i);
                    let r = (dot(a, x) - data.label(i) as f64) * scale;
                    for (g, ak) in grad.iter_mut().zip(a) {
                        *g += r * ak;
                    }
                }
            }
            TaskKind::Logistic { classes } => {
                let mut probs = vec![0.0; classes];
                for &i in indices {
                    let a = data.row(i);
                    class_scores(x, a, &mut probs);
                    softmax_in_place(&mut probs);
                    probs[data.label(i)] -= 1.0;
                    for (c, p) in probs.iter().enumerate() {
                        let coeff = p * scale;
                        for (g, ak) in grad[c * f..(c + 1) * f].iter_mut().zip(a) {
                            *g += coeff * ak;
                        }
                    }
                }
            }
        }
        if self.l2 != 0.0 {
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += self.l2 * xi;
            }
        }
        Ok(ModelVector(grad))
    }

    /// Index of the highest class score; ties go to the lowest index.
    pub fn predict(&self, model: &ModelVector, features: &[f64]) -> Result<usize, LearningError> {
        let TaskKind::Logistic { classes } = self.kind else {
            return Err(LearningError::UnsupportedMetric);
        };
        let mut scores = vec![0.0; classes];
        class_scores(model.as_slice(), features, &mut scores);
        Ok(argmax(&scores))
    }

    /// Top-1 accuracy on `data`.
    pub fn accuracy(&self, model: &ModelVector, data: &LabeledDataset) -> Result<f64, LearningError> {
        let TaskKind::Logistic { classes } = self.kind else {
            return Err(LearningError::UnsupportedMetric);
        };
        self.check(model, data)?;
        if data.is_empty() {
            return Err(LearningError::EmptyBatch);
        }
        let mut scores = vec![0.0; classes];
        let correct = (0..data.len())
            .filter(|&i| {
                class_scores(model.as_slice(), data.row(i), &mut scores);
                argmax(&scores) == data.label(i)
            })
            .count();
        Ok(correct as f64 / data.len() as f64)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn class_scores(weights: &[f64], features: &[f64], out: &mut [f64]) {
    let f = features.len();
    for (c, s) in out.iter_mut().enumerate() {
        *s = dot(&weights[c * f..(c + 1) * f], features);
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}
