use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::adversary::{AdversarySpec, ConeStrategy, SellerStrategy};
use crate::consensus::ConsensusParams;
use crate::economics::CatchModel;
use crate::fedcore::{Aggregator, OsmdParams};
use crate::hash::{Hash32, SeedBuilder};
use crate::training::{Activation, MetricId, MetricSpec, ModelSpec, SynthSpec, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// Plain mean instead of the configured robust aggregator.
    NoKrum,
    /// One random executor per round, no agreement.
    NoYoda,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoKrum => "no-krum",
            Ablation::NoYoda => "no-yoda",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregatorKind {
    #[default]
    CorrectedKrum,
    ClassicalKrum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    Idx,
}

/// One experiment, read from a flat TOML table. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub sellers: usize,
    pub cone_nodes: usize,
    pub t_max: u64,
    pub auction_window: u64,
    pub timeout_blocks: u64,
    pub allow_exhaustion: bool,
    pub ablation: Ablation,

    pub sample_fraction: f64,
    pub byz_fraction_max: f64,
    pub confidence_beta: f64,
    pub base_size: usize,

    pub batch_size: usize,
    pub osmd_learning_rate: f64,
    pub step_sizes: Vec<f64>,
    pub floor_fraction: f64,
    pub aggregator: AggregatorKind,
    pub krum_byzantine: usize,

    pub epochs: usize,
    pub learning_rate: f64,
    pub train_batch_size: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,

    pub byz_cone_fraction: f64,
    pub cone_strategy: ConeStrategy,
    pub byz_seller_fraction: f64,
    pub seller_strategy: SellerStrategy,
    pub adversary_seed: Option<Hash32>,

    pub dataset: DatasetKind,
    pub rows: usize,
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub spread: f64,
    pub label_noise: f64,
    pub dirichlet_concentration: f64,
    pub idx_dir: Option<PathBuf>,
    pub idx_train_rows: Option<usize>,
    pub validation_rows: usize,

    pub request_tags: Vec<String>,
    pub dataset_tags: Option<Vec<String>>,
    pub bids: Vec<u64>,
    pub buyer_balance: u64,
    pub threshold: f64,

    pub bribe: f64,
    pub claimed_quality: f64,
    pub catch_detection: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "scenario".into(),
            seed: 0,
            sellers: 50,
            cone_nodes: 50,
            t_max: 50,
            auction_window: 10,
            timeout_blocks: 10,
            allow_exhaustion: true,
            ablation: Ablation::Full,

            sample_fraction: 0.1,
            byz_fraction_max: 0.3,
            confidence_beta: 0.01,
            base_size: 5,

            batch_size: 10,
            osmd_learning_rate: 1.0,
            step_sizes: vec![1.0],
            floor_fraction: 0.5,
            aggregator: AggregatorKind::CorrectedKrum,
            krum_byzantine: 0,

            epochs: 3,
            learning_rate: 0.01,
            train_batch_size: 64,
            hidden_layers: Vec::new(),
            activation: Activation::Relu,

            byz_cone_fraction: 0.0,
            cone_strategy: ConeStrategy::RandomDigest,
            byz_seller_fraction: 0.0,
            seller_strategy: SellerStrategy::LabelFlip,
            adversary_seed: None,

            dataset: DatasetKind::Synthetic,
            rows: 10_000,
            classes: 10,
            dims: 20,
            separation: 4.0,
            spread: 1.0,
            label_noise: 0.0,
            dirichlet_concentration: 0.5,
            idx_dir: None,
            idx_train_rows: None,
            validation_rows: 1_000,

            request_tags: vec!["synthetic".into()],
            dataset_tags: None,
            bids: vec![150],
            buyer_balance: 1_000,
            threshold: 0.99,

            bribe: 0.0,
            claimed_quality: 1.0,
            catch_detection: 0.3,
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, HarnessError> {
        let s: Scenario = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Scenario::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.t_max < 1 {
            return bad("t_max must be at least 1".into());
        }
        if self.sellers == 0 || self.cone_nodes == 0 {
            return bad("need at least one seller and one compute node".into());
        }
        if self.bids.is_empty() {
            return bad("bids must list at least one amount".into());
        }
        if self.bids.iter().any(|&b| b > self.buyer_balance) {
            return bad("every bid must fit in buyer_balance".into());
        }
        if self.request_tags.is_empty() {
            return bad("request_tags must be non-empty".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if self.dataset == DatasetKind::Idx && self.idx_dir.is_none() {
            return bad("dataset = \"idx\" needs idx_dir".into());
        }
        if self.epochs > 0 && (self.train_batch_size == 0 || !(self.learning_rate > 0.0)) {
            return bad("train_batch_size and learning_rate must be positive".into());
        }
        if self.ablation != Ablation::NoYoda {
            self.consensus_params().validate()?;
        }
        self.osmd_params().validate()?;
        self.adversary_spec().validate()?;
        Ok(())
    }

    pub fn consensus_params(&self) -> ConsensusParams {
        ConsensusParams {
            total_nodes: self.cone_nodes,
            sample_fraction: self.sample_fraction,
            byz_fraction_max: self.byz_fraction_max,
            confidence_beta: self.confidence_beta,
            base_size: self.base_size,
        }
    }

    pub fn osmd_params(&self) -> OsmdParams {
        let aggregator = match (self.ablation, self.aggregator) {
            (Ablation::NoKrum, _) | (_, AggregatorKind::Mean) => Aggregator::Mean,
            (_, AggregatorKind::CorrectedKrum) => Aggregator::CorrectedKrum,
            (_, AggregatorKind::ClassicalKrum) => Aggregator::ClassicalKrum {
                byzantine: self.krum_byzantine,
            },
        };
        OsmdParams {
            batch_size: self.batch_size,
            learning_rate: self.osmd_learning_rate,
            step_sizes: self.step_sizes.clone(),
            floor_fraction: self.floor_fraction,
            aggregator,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.train_batch_size,
        }
    }

    pub fn adversary_spec(&self) -> AdversarySpec {
        AdversarySpec {
            byz_cone_fraction: self.byz_cone_fraction,
            cone_strategy: self.cone_strategy,
            byz_seller_fraction: self.byz_seller_fraction,
            seller_strategy: self.seller_strategy,
            seed: self
                .adversary_seed
                .unwrap_or_else(|| self.derived_seed("adversary")),
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.classes,
            dims: self.dims,
            separation: self.separation,
            spread: self.spread,
            label_noise: self.label_noise,
            means: None,
        }
    }

    pub fn model_spec(&self, inputs: usize, classes: usize) -> ModelSpec {
        let mut layers = vec![inputs];
        layers.extend(&self.hidden_layers);
        layers.push(classes);
        ModelSpec {
            layers,
            activation: self.activation,
        }
    }

    pub fn metric(&self) -> MetricSpec {
        MetricSpec {
            metric_id: MetricId::Accuracy,
            threshold: self.threshold,
        }
    }

    pub fn catch_model(&self) -> CatchModel {
        CatchModel::Geometric {
            detection: self.catch_detection,
        }
    }

    pub fn dataset_tags(&self) -> &[String] {
        self.dataset_tags.as_deref().unwrap_or(&self.request_tags)
    }

    /// Sub-seed for one purpose, derived from the scenario seed.
    pub fn derived_seed(&self, purpose: &str) -> Hash32 {
        SeedBuilder::new("d2m/scenario")
            .u64(self.seed)
            .str(purpose)
            .finish()
    }

    /// Identifier of the simulated auction; fixed so seeds only depend on
    /// the scenario seed.
    pub fn auction_id(&self) -> u64 {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let s = Scenario::from_toml("").unwrap();
        assert_eq!(s, Scenario::default());
    }

    #[test]
    fn keys_parse() {
        let s = Scenario::from_toml(
            r#"
            seed = 9
            sellers = 20
            ablation = "no-krum"
            cone_strategy = "colluding-common-digest"
            seller_strategy = "scaled-gradient(-10)"
            byz_cone_fraction = 0.3
            hidden_layers = [16]
            activation = "tanh"
            "#,
        )
        .unwrap();
        assert_eq!(s.seed, 9);
        assert_eq!(s.osmd_params().aggregator, Aggregator::Mean);
        assert_eq!(s.seller_strategy, SellerStrategy::ScaledGradient(-10.0));
        assert_eq!(s.model_spec(4, 3).layers, vec![4, 16, 3]);
        assert_eq!(s.adversary_spec().seed, s.derived_seed("adversary"));
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(Scenario::from_toml("selers = 3").is_err());
        assert!(Scenario::from_toml("t_max = 0").is_err());
        assert!(Scenario::from_toml("byz_cone_fraction = 1.5").is_err());
        assert!(Scenario::from_toml("byz_fraction_max = 0.6").is_err());
        assert!(Scenario::from_toml("dataset = \"idx\"").is_err());
        assert!(Scenario::from_toml("bids = [5000]").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let s = Scenario {
            seller_strategy: SellerStrategy::ScaledGradient(2.5),
            adversary_seed: Some(Hash32::of(b"x")),
            ..Scenario::default()
        };
        assert_eq!(Scenario::from_toml(&s.to_toml()).unwrap(), s);
    }
}
