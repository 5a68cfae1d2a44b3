//! Consensus in isolation: honest nodes agree on one digest, Byzantine nodes
//! follow a strategy, and we count how often the wrong digest wins.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::adversary::{adversary_count, ConeStrategy};
use crate::consensus::{run_mini_rounds, sortition_seed, threshold, CommitRecord, ConsensusParams};
use crate::hash::{Hash32, SeedBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub honest_accepted: bool,
    pub mini_rounds: u32,
    pub exhausted: bool,
}

pub fn honest_digest() -> Hash32 {
    Hash32::of(b"d2m/montecarlo/honest")
}

fn byzantine_digest(strategy: ConeStrategy, seed: &Hash32, trial: u64, node: usize) -> Hash32 {
    match strategy {
        ConeStrategy::RandomDigest => SeedBuilder::new("d2m/montecarlo/random")
            .hash(seed)
            .u64(trial)
            .u64(node as u64)
            .finish(),
        ConeStrategy::StaleDigest => Hash32::of(b"d2m/montecarlo/stale"),
        ConeStrategy::ColludingCommonDigest => Hash32::of(b"d2m/montecarlo/collude"),
    }
}

/// One consensus instance over `params.total_nodes` nodes of which `byz`
/// are adversarial.
pub fn consensus_trial(
    params: &ConsensusParams,
    theta: f64,
    byz: &BTreeSet<usize>,
    strategy: ConeStrategy,
    seed: &Hash32,
    trial: u64,
) -> Result<TrialOutcome, HarnessError> {
    let nodes: Vec<usize> = (0..params.total_nodes).collect();
    let beacon = SeedBuilder::new("d2m/montecarlo/beacon")
        .hash(seed)
        .u64(trial)
        .finish();
    let honest = honest_digest();
    let out = run_mini_rounds(
        params,
        theta,
        trial,
        &nodes,
        true,
        |i| sortition_seed(&beacon, 0, trial, i),
        |set| {
            set.members
                .iter()
                .map(|&node| CommitRecord {
                    mini_round: set.mini_round,
                    digest: if byz.contains(&node) {
                        byzantine_digest(strategy, seed, trial, node)
                    } else {
                        honest
                    },
                    node,
                })
                .collect()
        },
    )?;
    Ok(TrialOutcome {
        honest_accepted: out.accepted == honest,
        mini_rounds: out.mini_rounds,
        exhausted: out.exhausted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub trials: u64,
    pub wrong: u64,
    pub exhausted: u64,
    pub first_mini_round: u64,
    pub max_mini_rounds: u32,
    pub theta: f64,
    /// `trial,honest_accepted,mini_rounds` per instance.
    pub csv: String,
}

impl MonteCarloSummary {
    pub fn wrong_rate(&self) -> f64 {
        self.wrong as f64 / self.trials.max(1) as f64
    }
}

/// `trials` instances with `⌊byz_fraction · C⌋` fixed adversaries; the
/// committees differ per trial through the beacon.
pub fn consensus_monte_carlo(
    params: &ConsensusParams,
    byz_fraction: f64,
    strategy: ConeStrategy,
    trials: u64,
    seed: &Hash32,
) -> Result<MonteCarloSummary, HarnessError> {
    let theta = threshold(params)?;
    let byz: BTreeSet<usize> = (0..adversary_count(byz_fraction, params.total_nodes)).collect();
    let mut summary = MonteCarloSummary {
        trials,
        wrong: 0,
        exhausted: 0,
        first_mini_round: 0,
        max_mini_rounds: 0,
        theta,
        csv: String::from("trial,honest_accepted,mini_rounds\n"),
    };
    for trial in 0..trials {
        let o = consensus_trial(params, theta, &byz, strategy, seed, trial)?;
        summary.wrong += u64::from(!o.honest_accepted);
        summary.exhausted += u64::from(o.exhausted);
        summary.first_mini_round += u64::from(o.mini_rounds == 1);
        summary.max_mini_rounds = summary.max_mini_rounds.max(o.mini_rounds);
        writeln!(
            summary.csv,
            "{trial},{},{}",
            u8::from(o.honest_accepted),
            o.mini_rounds
        )
        .unwrap();
    }
    Ok(summary)
}
