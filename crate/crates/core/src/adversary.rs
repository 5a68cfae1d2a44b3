//! Byzantine behaviour for compute nodes and data sellers.
//!
//! Everything here is a pure function of the spec seed and its inputs, so a
//! run with adversaries replays exactly like an honest one.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::fedcore::ModelState;
use crate::hash::{Hash32, SeedBuilder};
use crate::training::{local_update, LabeledDataset, ModelWeights, TrainingConfig, TrainingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConeStrategy {
    /// An independent random state per node.
    #[default]
    RandomDigest,
    /// Re-commit the state the round started from.
    StaleDigest,
    /// All Byzantine nodes commit one shared wrong state.
    ColludingCommonDigest,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SellerStrategy {
    /// Train on labels mapped `y -> classes - 1 - y`.
    #[default]
    LabelFlip,
    /// Gaussian direction rescaled to the honest update norm.
    RandomGradient,
    /// Honest update multiplied by a constant.
    ScaledGradient(f64),
}

impl fmt::Display for SellerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SellerStrategy::LabelFlip => f.write_str("label-flip"),
            SellerStrategy::RandomGradient => f.write_str("random-gradient"),
            SellerStrategy::ScaledGradient(k) => write!(f, "scaled-gradient({k})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown seller strategy {0:?}; expected label-flip, random-gradient or scaled-gradient(<factor>)")]
pub struct ParseStrategyError(String);

impl FromStr for SellerStrategy {
    type Err = ParseStrategyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "label-flip" => return Ok(SellerStrategy::LabelFlip),
            "random-gradient" => return Ok(SellerStrategy::RandomGradient),
            _ => {}
        }
        s.strip_prefix("scaled-gradient(")
            .and_then(|rest| rest.strip_suffix(')'))
            .and_then(|k| k.trim().parse::<f64>().ok())
            .filter(|k| k.is_finite())
            .map(SellerStrategy::ScaledGradient)
            .ok_or_else(|| ParseStrategyError(s.to_string()))
    }
}

impl Serialize for SellerStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SellerStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarySpec {
    pub byz_cone_fraction: f64,
    pub cone_strategy: ConeStrategy,
    pub byz_seller_fraction: f64,
    pub seller_strategy: SellerStrategy,
    pub seed: Hash32,
}

impl Default for AdversarySpec {
    fn default() -> Self {
        AdversarySpec {
            byz_cone_fraction: 0.0,
            cone_strategy: ConeStrategy::default(),
            byz_seller_fraction: 0.0,
            seller_strategy: SellerStrategy::default(),
            seed: Hash32::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdversaryError {
    #[error("{name} = {value} is outside [0, 1]")]
    FractionOutOfRange { name: &'static str, value: f64 },
}

impl AdversarySpec {
    pub fn honest() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), AdversaryError> {
        for (name, value) in [
            ("byz_cone_fraction", self.byz_cone_fraction),
            ("byz_seller_fraction", self.byz_seller_fraction),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(AdversaryError::FractionOutOfRange { name, value });
            }
        }
        Ok(())
    }
}

/// Indices of the adversarial nodes and sellers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub byz_nodes: BTreeSet<usize>,
    pub byz_sellers: BTreeSet<usize>,
}

/// `⌊fraction · count⌋`, tolerant of products like `0.3 · 50` landing just
/// below an integer.
pub fn adversary_count(fraction: f64, count: usize) -> usize {
    ((fraction * count as f64) + 1e-9).floor().min(count as f64) as usize
}

fn pick(seed: &Hash32, domain: &str, count: usize, fraction: f64) -> BTreeSet<usize> {
    let k = adversary_count(fraction, count);
    let mut rng = SeedBuilder::new(domain).hash(seed).finish().rng();
    index::sample(&mut rng, count, k).into_iter().collect()
}

pub fn assign_roles(node_count: usize, seller_count: usize, spec: &AdversarySpec) -> Roles {
    Roles {
        byz_nodes: pick(
            &spec.seed,
            "d2m/adversary/nodes",
            node_count,
            spec.byz_cone_fraction,
        ),
        byz_sellers: pick(
            &spec.seed,
            "d2m/adversary/sellers",
            seller_count,
            spec.byz_seller_fraction,
        ),
    }
}

fn gaussian(seed: &Hash32, len: usize) -> Vec<f64> {
    let mut rng = seed.rng();
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Random weights with the honest output's `p` and `N`.
fn random_state(template: &ModelState, seed: Hash32) -> ModelState {
    ModelState {
        weights: template
            .weights
            .with_values(gaussian(&seed, template.weights.len())),
        ..template.clone()
    }
}

/// The state a Byzantine node reveals in global round `round`.
///
/// `input` is the accepted state the round started from and `honest` the
/// correct output. Every strategy yields a real preimage so the harness can
/// verify whatever digest wins.
pub fn byzantine_state(
    strategy: ConeStrategy,
    round: u64,
    node: usize,
    input: Option<&ModelState>,
    honest: &ModelState,
    seed: &Hash32,
) -> ModelState {
    let random_seed = || {
        SeedBuilder::new("d2m/adversary/random-state")
            .hash(seed)
            .u64(round)
            .u64(node as u64)
            .finish()
    };
    match strategy {
        ConeStrategy::RandomDigest => random_state(honest, random_seed()),
        ConeStrategy::StaleDigest => match input {
            Some(prev) => prev.clone(),
            None => random_state(honest, random_seed()),
        },
        ConeStrategy::ColludingCommonDigest => random_state(
            honest,
            SeedBuilder::new("d2m/adversary/collude")
                .hash(seed)
                .u64(round)
                .finish(),
        ),
    }
}

pub fn byzantine_cone_digest(
    strategy: ConeStrategy,
    round: u64,
    node: usize,
    input: Option<&ModelState>,
    honest: &ModelState,
    seed: &Hash32,
) -> Result<Hash32, TrainingError> {
    byzantine_state(strategy, round, node, input, honest, seed).digest()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A corrupted seller's update `g`.
///
/// `honest_norm` is the target length for [`SellerStrategy::RandomGradient`];
/// the other strategies ignore it.
pub fn malicious_seller_update(
    strategy: SellerStrategy,
    w: &ModelWeights,
    shard: &LabeledDataset,
    config: &TrainingConfig,
    seed: &Hash32,
    honest_norm: f64,
) -> Result<Vec<f64>, TrainingError> {
    if shard.rows() == 0 {
        return Err(TrainingError::EmptyShard);
    }
    match strategy {
        SellerStrategy::LabelFlip => {
            let classes = w.classes();
            let mut flipped = shard.clone();
            for y in &mut flipped.labels {
                *y = classes - 1 - (*y).min(classes - 1);
            }
            local_update(w, &flipped, config, seed)
        }
        SellerStrategy::RandomGradient => {
            let dir = gaussian(
                &SeedBuilder::new("d2m/adversary/random-gradient")
                    .hash(seed)
                    .finish(),
                w.len(),
            );
            let norm = l2_norm(&dir);
            if norm == 0.0 || honest_norm == 0.0 {
                return Ok(vec![0.0; w.len()]);
            }
            let scale = honest_norm / norm;
            Ok(dir.into_iter().map(|x| x * scale).collect())
        }
        SellerStrategy::ScaledGradient(factor) => {
            let g = local_update(w, shard, config, seed)?;
            Ok(g.into_iter().map(|x| x * factor).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{synth_dataset, ModelSpec, SynthSpec};

    fn spec(cone: f64, sellers: f64) -> AdversarySpec {
        AdversarySpec {
            byz_cone_fraction: cone,
            byz_seller_fraction: sellers,
            seed: Hash32::of(b"adv"),
            ..AdversarySpec::default()
        }
    }

    #[test]
    fn role_counts() {
        let r = assign_roles(50, 20, &spec(0.0, 0.0));
        assert!(r.byz_nodes.is_empty() && r.byz_sellers.is_empty());
        let r = assign_roles(50, 50, &spec(0.3, 0.2));
        assert_eq!(r.byz_nodes.len(), 15);
        assert_eq!(r.byz_sellers.len(), 10);
        assert!(r.byz_nodes.iter().all(|&i| i < 50));
        assert_eq!(assign_roles(50, 50, &spec(1.0, 1.0)).byz_nodes.len(), 50);
        for f in [0.2, 0.4, 0.5] {
            assert_eq!(adversary_count(f, 50), (f * 50.0).round() as usize);
        }
        assert_eq!(adversary_count(0.33, 10), 3);
    }

    #[test]
    fn roles_are_seeded() {
        let a = assign_roles(100, 100, &spec(0.3, 0.3));
        assert_eq!(a, assign_roles(100, 100, &spec(0.3, 0.3)));
        let mut other = spec(0.3, 0.3);
        other.seed = Hash32::of(b"other");
        assert_ne!(a, assign_roles(100, 100, &other));
    }

    #[test]
    fn fraction_validation() {
        assert!(spec(0.3, 0.2).validate().is_ok());
        assert!(spec(1.2, 0.0).validate().is_err());
        assert!(spec(0.0, -0.1).validate().is_err());
    }

    fn honest_state() -> ModelState {
        let w = ModelWeights::init(&ModelSpec::logistic(3, 2), &Hash32::of(b"w"));
        ModelState::initial(w, 4)
    }

    #[test]
    fn colluders_share_a_wrong_digest() {
        let honest = honest_state();
        let seed = Hash32::of(b"s");
        let d: Vec<Hash32> = (0..5)
            .map(|n| {
                byzantine_cone_digest(
                    ConeStrategy::ColludingCommonDigest,
                    3,
                    n,
                    None,
                    &honest,
                    &seed,
                )
                .unwrap()
            })
            .collect();
        assert!(d.windows(2).all(|p| p[0] == p[1]));
        assert_ne!(d[0], honest.digest().unwrap());
        let next = byzantine_cone_digest(
            ConeStrategy::ColludingCommonDigest,
            4,
            0,
            None,
            &honest,
            &seed,
        )
        .unwrap();
        assert_ne!(d[0], next);
    }

    #[test]
    fn random_digests_do_not_collide() {
        let honest = honest_state();
        let seed = Hash32::of(b"s");
        let mut seen = BTreeSet::new();
        for n in 0..200 {
            let d = byzantine_cone_digest(ConeStrategy::RandomDigest, 0, n, None, &honest, &seed)
                .unwrap();
            assert!(seen.insert(d));
        }
        assert!(!seen.contains(&honest.digest().unwrap()));
    }

    #[test]
    fn stale_replays_input_or_falls_back() {
        let honest = honest_state();
        let mut input = honest.clone();
        input.weights.values[0] = 9.0;
        let seed = Hash32::of(b"s");
        let stale = byzantine_state(
            ConeStrategy::StaleDigest,
            2,
            1,
            Some(&input),
            &honest,
            &seed,
        );
        assert_eq!(stale, input);
        let fallback = byzantine_state(ConeStrategy::StaleDigest, 0, 1, None, &honest, &seed);
        assert_eq!(
            fallback,
            byzantine_state(ConeStrategy::RandomDigest, 0, 1, None, &honest, &seed)
        );
    }

    fn shard() -> LabeledDataset {
        let s = SynthSpec {
            classes: 2,
            dims: 3,
            ..SynthSpec::default()
        };
        synth_dataset(&s, 200, &Hash32::of(b"d")).unwrap().train
    }

    #[test]
    fn scaled_gradient_identity_and_scaling() {
        let w = ModelWeights::zeros(&ModelSpec::logistic(3, 2));
        let d = shard();
        let cfg = TrainingConfig::default();
        let seed = Hash32::of(b"l");
        let honest = local_update(&w, &d, &cfg, &seed).unwrap();
        let same = malicious_seller_update(
            SellerStrategy::ScaledGradient(1.0),
            &w,
            &d,
            &cfg,
            &seed,
            0.0,
        )
        .unwrap();
        assert_eq!(same, honest);
        let neg = malicious_seller_update(
            SellerStrategy::ScaledGradient(-10.0),
            &w,
            &d,
            &cfg,
            &seed,
            0.0,
        )
        .unwrap();
        for (a, b) in neg.iter().zip(&honest) {
            assert_eq!(*a, -10.0 * b);
        }
    }

    #[test]
    fn label_flip_trains_on_inverted_labels() {
        let w = ModelWeights::zeros(&ModelSpec::logistic(3, 2));
        let d = shard();
        let cfg = TrainingConfig::default();
        let seed = Hash32::of(b"l");
        let mut inverted = d.clone();
        inverted.labels.iter_mut().for_each(|y| *y = 1 - *y);
        let expect = local_update(&w, &inverted, &cfg, &seed).unwrap();
        let got =
            malicious_seller_update(SellerStrategy::LabelFlip, &w, &d, &cfg, &seed, 0.0).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn random_gradient_has_target_norm() {
        let w = ModelWeights::zeros(&ModelSpec::logistic(3, 2));
        let d = shard();
        let cfg = TrainingConfig::default();
        for target in [1e-3, 0.7, 42.0] {
            let g = malicious_seller_update(
                SellerStrategy::RandomGradient,
                &w,
                &d,
                &cfg,
                &Hash32::of(b"r"),
                target,
            )
            .unwrap();
            assert!((l2_norm(&g) - target).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_shard_rejected() {
        let w = ModelWeights::zeros(&ModelSpec::logistic(3, 2));
        let empty = shard().subset(&[]);
        for s in [
            SellerStrategy::LabelFlip,
            SellerStrategy::RandomGradient,
            SellerStrategy::ScaledGradient(2.0),
        ] {
            assert!(matches!(
                malicious_seller_update(
                    s,
                    &w,
                    &empty,
                    &TrainingConfig::default(),
                    &Hash32::ZERO,
                    1.0
                ),
                Err(TrainingError::EmptyShard)
            ));
        }
    }

    #[test]
    fn strategy_strings_round_trip() {
        for s in [
            SellerStrategy::LabelFlip,
            SellerStrategy::RandomGradient,
            SellerStrategy::ScaledGradient(-10.0),
            SellerStrategy::ScaledGradient(2.5),
        ] {
            assert_eq!(s.to_string().parse::<SellerStrategy>().unwrap(), s);
        }
        assert_eq!(
            "scaled-gradient( 3 )".parse::<SellerStrategy>().unwrap(),
            SellerStrategy::ScaledGradient(3.0)
        );
        assert!("scaled-gradient(x)".parse::<SellerStrategy>().is_err());
        assert!("flip".parse::<SellerStrategy>().is_err());
        let json = serde_json::to_string(&ConeStrategy::ColludingCommonDigest).unwrap();
        assert_eq!(json, "\"colluding-common-digest\"");
    }
}
