use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::hash::{Hash32, SeedBuilder};

/// Row-major feature matrix with class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Vec<f64>,
    pub dims: usize,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        dims: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self, TrainingError> {
        if features.len() != dims * labels.len() {
            return Err(TrainingError::DimensionMismatch(format!(
                "{} features for {} rows of width {}",
                features.len(),
                labels.len(),
                dims
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(TrainingError::DimensionMismatch(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            dims,
            labels,
            class_count,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.dims..(r + 1) * self.dims]
    }

    pub fn subset(&self, rows: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(rows.len() * self.dims);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        LabeledDataset {
            features,
            dims: self.dims,
            labels,
            class_count: self.class_count,
        }
    }

    /// Row indices grouped by label.
    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (r, &l) in self.labels.iter().enumerate() {
            out[l].push(r);
        }
        out
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Gaussian-cluster classification task.
///
/// Class means are drawn uniformly on a sphere of radius `separation` (or
/// taken from `means` when given); rows are `mean + spread * N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub spread: f64,
    /// Fraction of rows whose label is replaced by a uniformly random class.
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            dims: 20,
            separation: 4.0,
            spread: 1.0,
            label_noise: 0.0,
            means: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

/// Generates `rows` samples (classes assigned round-robin, then shuffled)
/// and splits them 80/10/10; validation and test take `floor(rows / 10)`
/// each and the remainder goes to train.
pub fn synth_dataset(
    spec: &SynthSpec,
    rows: usize,
    seed: &Hash32,
) -> Result<DatasetSplits, TrainingError> {
    if spec.classes < 2 || spec.dims == 0 {
        return Err(TrainingError::InvalidSpec(
            "need at least two classes and one dimension".into(),
        ));
    }
    if rows < spec.classes {
        return Err(TrainingError::InvalidSpec(format!(
            "{rows} rows cannot cover {} classes",
            spec.classes
        )));
    }
    let mut rng = SeedBuilder::new("d2m/synth").hash(seed).finish().rng();
    let means: Vec<Vec<f64>> = match &spec.means {
        Some(m) => {
            if m.len() != spec.classes || m.iter().any(|v| v.len() != spec.dims) {
                return Err(TrainingError::DimensionMismatch(
                    "explicit cluster means do not match classes x dims".into(),
                ));
            }
            m.clone()
        }
        None => (0..spec.classes)
            .map(|_| {
                let v: Vec<f64> = (0..spec.dims)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm * spec.separation).collect()
            })
            .collect(),
    };
    let noise = Normal::new(0.0, spec.spread.max(0.0))
        .map_err(|e| TrainingError::InvalidSpec(e.to_string()))?;
    let mut labels: Vec<usize> = (0..rows).map(|r| r % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(rows * spec.dims);
    for &l in &labels {
        for d in 0..spec.dims {
            features.push(means[l][d] + noise.sample(&mut rng));
        }
    }
    if spec.label_noise > 0.0 {
        for l in labels.iter_mut() {
            if rng.random::<f64>() < spec.label_noise {
                *l = rng.random_range(0..spec.classes);
            }
        }
    }
    let all = LabeledDataset::new(features, spec.dims, labels, spec.classes)?;
    let val = rows / 10;
    let test = rows / 10;
    let train = rows - val - test;
    let idx: Vec<usize> = (0..rows).collect();
    Ok(DatasetSplits {
        train: all.subset(&idx[..train]),
        validation: all.subset(&idx[train..train + val]),
        test: all.subset(&idx[train + val..]),
    })
}

/// Row indices owned by each seller.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub shards: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn sellers(&self) -> usize {
        self.shards.len()
    }

    pub fn min_shard(&self) -> usize {
        self.shards.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// Label-skewed split: for each class, seller shares are drawn from a
/// symmetric Dirichlet and the class's (shuffled) rows are cut at the
/// cumulative share boundaries. Every row is assigned exactly once.
pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    sellers: usize,
    concentration: f64,
    seed: &Hash32,
) -> Result<PartitionPlan, TrainingError> {
    if sellers == 0 {
        return Err(TrainingError::InvalidSpec(
            "need at least one seller".into(),
        ));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| TrainingError::InvalidSpec(format!("concentration: {e}")))?;
    let mut rng = SeedBuilder::new("d2m/dirichlet").hash(seed).finish().rng();
    let mut shards = vec![Vec::new(); sellers];
    for mut rows in dataset.rows_by_class() {
        rows.shuffle(&mut rng);
        let draws: Vec<f64> = (0..sellers).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let n = rows.len();
        let mut acc = 0.0;
        let mut start = 0usize;
        for (s, d) in draws.iter().enumerate() {
            acc += if total > 0.0 {
                d / total
            } else {
                1.0 / sellers as f64
            };
            let end = if s + 1 == sellers {
                n
            } else {
                ((acc * n as f64).round() as usize).clamp(start, n)
            };
            shards[s].extend_from_slice(&rows[start..end]);
            start = end;
        }
    }
    for shard in &mut shards {
        shard.sort_unstable();
    }
    Ok(PartitionPlan { shards })
}
