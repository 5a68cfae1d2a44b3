use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, TrainingError};
use crate::hash::Hash32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activated output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub(crate) fn code(self) -> u64 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }
}

/// Dense network descriptor: `layers = [inputs, hidden..., classes]`.
///
/// Two entries give multinomial logistic regression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(inputs: usize, classes: usize) -> Self {
        ModelSpec {
            layers: vec![inputs, classes],
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.layers.len() < 2 {
            return Err(TrainingError::InvalidSpec(
                "need at least input and output layers".into(),
            ));
        }
        if self.layers.contains(&0) {
            return Err(TrainingError::InvalidSpec("zero-width layer".into()));
        }
        if *self.layers.last().unwrap() < 2 {
            return Err(TrainingError::InvalidSpec(
                "need at least two classes".into(),
            ));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MetricId {
    #[default]
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub metric_id: MetricId,
    pub threshold: f64,
}

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 3,
            learning_rate: 0.01,
            batch_size: 64,
        }
    }
}

/// Flat parameter vector. Per layer: the `out x in` weight matrix in row-major
/// order followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub shape: Vec<usize>,
    pub activation: Activation,
    pub values: Vec<f64>,
}

struct LayerView {
    w: usize,
    b: usize,
    inputs: usize,
    outputs: usize,
}

impl ModelWeights {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ModelWeights {
            shape: spec.layers.clone(),
            activation: spec.activation,
            values: vec![0.0; spec.parameter_count()],
        }
    }

    /// Logistic models start at zero; deeper models get seeded Glorot-uniform
    /// weights so hidden units are not symmetric.
    pub fn init(spec: &ModelSpec, seed: &Hash32) -> Self {
        let mut w = Self::zeros(spec);
        if spec.layers.len() > 2 {
            let mut rng = seed.rng();
            let layers = w.layers();
            for l in layers {
                let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
                for v in &mut w.values[l.w..l.b] {
                    *v = rng.random_range(-limit..limit);
                }
            }
        }
        w
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            layers: self.shape.clone(),
            activation: self.activation,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn inputs(&self) -> usize {
        self.shape[0]
    }

    pub fn classes(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// `self + step * delta`.
    pub fn stepped(&self, delta: &[f64], step: f64) -> ModelWeights {
        assert_eq!(delta.len(), self.values.len());
        let mut out = self.clone();
        for (v, d) in out.values.iter_mut().zip(delta) {
            *v += step * d;
        }
        out
    }

    pub fn with_values(&self, values: Vec<f64>) -> ModelWeights {
        assert_eq!(values.len(), self.values.len());
        ModelWeights {
            shape: self.shape.clone(),
            activation: self.activation,
            values,
        }
    }

    fn layers(&self) -> Vec<LayerView> {
        let mut off = 0;
        self.shape
            .windows(2)
            .map(|d| {
                let l = LayerView {
                    w: off,
                    b: off + d[0] * d[1],
                    inputs: d[0],
                    outputs: d[1],
                };
                off = l.b + d[1];
                l
            })
            .collect()
    }

    /// Activations of every layer for one input; the last entry holds logits.
    fn forward(&self, layers: &[LayerView], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (li, l) in layers.iter().enumerate() {
            let input = &acts[li];
            let mut out = Vec::with_capacity(l.outputs);
            for o in 0..l.outputs {
                let row = &self.values[l.w + o * l.inputs..l.w + (o + 1) * l.inputs];
                let z: f64 =
                    self.values[l.b + o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if li + 1 < layers.len() {
                    self.activation.apply(z)
                } else {
                    z
                });
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let layers = self.layers();
        self.forward(&layers, x).pop().unwrap()
    }

    /// Predicted class; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    /// Cross-entropy of one example.
    pub fn example_loss(&self, x: &[f64], label: usize) -> f64 {
        let z = self.logits(x);
        log_sum_exp(&z) - z[label]
    }

    /// Sum of cross-entropy losses over `rows`, accumulating the gradient of
    /// that sum into `grad`.
    pub fn accumulate_gradient(
        &self,
        data: &LabeledDataset,
        rows: &[usize],
        grad: &mut [f64],
    ) -> f64 {
        let layers = self.layers();
        let mut total = 0.0;
        for &r in rows {
            let acts = self.forward(&layers, data.row(r));
            let logits = acts.last().unwrap();
            let lse = log_sum_exp(logits);
            let label = data.labels[r];
            total += lse - logits[label];
            // dL/dz for the output layer: softmax - onehot
            let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
            delta[label] -= 1.0;
            for li in (0..layers.len()).rev() {
                let l = &layers[li];
                let input = &acts[li];
                for o in 0..l.outputs {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    grad[l.b + o] += d;
                    let g = &mut grad[l.w + o * l.inputs..l.w + (o + 1) * l.inputs];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                }
                if li > 0 {
                    let mut prev = vec![0.0; l.inputs];
                    for o in 0..l.outputs {
                        let d = delta[o];
                        if d == 0.0 {
                            continue;
                        }
                        let row = &self.values[l.w + o * l.inputs..l.w + (o + 1) * l.inputs];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += d * w;
                        }
                    }
                    for (p, y) in prev.iter_mut().zip(input) {
                        *p *= self.activation.derivative_from_output(*y);
                    }
                    delta = prev;
                }
            }
        }
        total
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_dims(w: &ModelWeights, data: &LabeledDataset) -> Result<(), TrainingError> {
    if data.dims != w.inputs() {
        return Err(TrainingError::DimensionMismatch(format!(
            "model expects {} features, data has {}",
            w.inputs(),
            data.dims
        )));
    }
    if data.class_count > w.classes() {
        return Err(TrainingError::DimensionMismatch(format!(
            "model has {} classes, data has {}",
            w.classes(),
            data.class_count
        )));
    }
    Ok(())
}

/// Runs `epochs` passes of mini-batch gradient descent on mean cross-entropy
/// and returns `w_local - w`.
pub fn local_update(
    w: &ModelWeights,
    shard: &LabeledDataset,
    config: &TrainingConfig,
    seed: &Hash32,
) -> Result<Vec<f64>, TrainingError> {
    if shard.rows() == 0 {
        return Err(TrainingError::EmptyShard);
    }
    check_dims(w, shard)?;
    let mut local = w.clone();
    let mut rng = seed.rng();
    let mut order: Vec<usize> = (0..shard.rows()).collect();
    let batch = config.batch_size.max(1);
    let mut grad = vec![0.0; w.len()];
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            local.accumulate_gradient(shard, chunk, &mut grad);
            let scale = config.learning_rate / chunk.len() as f64;
            for (v, g) in local.values.iter_mut().zip(&grad) {
                *v -= scale * g;
            }
        }
    }
    Ok(local
        .values
        .iter()
        .zip(&w.values)
        .map(|(a, b)| a - b)
        .collect())
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate_metric(
    w: &ModelWeights,
    eval_set: &LabeledDataset,
    spec: &MetricSpec,
) -> Result<f64, TrainingError> {
    if eval_set.rows() == 0 {
        return Err(TrainingError::EmptyEvalSet);
    }
    check_dims(w, eval_set)?;
    match spec.metric_id {
        MetricId::Accuracy => {
            let correct = (0..eval_set.rows())
                .filter(|&r| w.predict(eval_set.row(r)) == eval_set.labels[r])
                .count();
            Ok(correct as f64 / eval_set.rows() as f64)
        }
    }
}

/// Mean cross-entropy loss; lower is better.
pub fn utility(w: &ModelWeights, eval_set: &LabeledDataset) -> Result<f64, TrainingError> {
    if eval_set.rows() == 0 {
        return Err(TrainingError::EmptyEvalSet);
    }
    check_dims(w, eval_set)?;
    let total: f64 = (0..eval_set.rows())
        .map(|r| w.example_loss(eval_set.row(r), eval_set.labels[r]))
        .sum();
    Ok(total / eval_set.rows() as f64)
}
