//! Committee sortition with exponentially growing execution sets and the
//! cumulative likelihood-score acceptance rule.
//!
//! Every function here is pure. Mini-round state (which commits arrived,
//! the running [`LikelihoodTable`]) is owned by the caller; [`run_mini_rounds`]
//! packages the standard loop for callers that do not need to interleave
//! other work between mini-rounds.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::hash::{Hash32, SeedBuilder};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConsensusError {
    #[error("degenerate consensus parameters: {0}")]
    DegenerateParams(String),
    #[error("execution set of size {size} exceeds population {population}")]
    SizeExceedsPopulation { size: usize, population: usize },
    #[error("no digest reached the threshold after the full population voted")]
    NoConsensus,
    #[error("mini-round {mini_round} has {commits} commits but only {size} members")]
    TooManyCommits {
        mini_round: u32,
        commits: usize,
        size: usize,
    },
}

/// Parameters of the acceptance rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusParams {
    /// Total number of compute nodes `C`.
    pub total_nodes: usize,
    /// Fraction `q` of nodes selected per round.
    pub sample_fraction: f64,
    /// Largest tolerated Byzantine fraction `f_max`.
    pub byz_fraction_max: f64,
    /// Target bound `β` on accepting a wrong digest.
    pub confidence_beta: f64,
    /// Size `s_0` of the first execution set.
    pub base_size: usize,
}

impl ConsensusParams {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        let bad = |m: &str| Err(ConsensusError::DegenerateParams(m.to_string()));
        if self.total_nodes == 0 {
            return bad("total_nodes must be positive");
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction < 1.0) {
            return bad("sample_fraction must lie in (0, 1)");
        }
        if !(self.byz_fraction_max > 0.0 && self.byz_fraction_max < 0.5) {
            return bad("byz_fraction_max must lie in (0, 0.5)");
        }
        if !(self.confidence_beta > 0.0 && self.confidence_beta <= 0.5) {
            return bad("confidence_beta must lie in (0, 0.5]");
        }
        if self.base_size == 0 {
            return bad("base_size must be at least 1");
        }
        Ok(())
    }

    /// The common factor `2q(1-q)·C·(1-f)·f / ((1-f) - f)` shared by θ and β.
    fn spread(&self) -> Result<f64, ConsensusError> {
        let f = self.byz_fraction_max;
        let q = self.sample_fraction;
        if f <= 0.0 || f >= 0.5 {
            return Err(ConsensusError::DegenerateParams(format!(
                "byz_fraction_max = {f} gives a zero or negative margin"
            )));
        }
        if !(q > 0.0 && q < 1.0) || self.total_nodes == 0 {
            return Err(ConsensusError::DegenerateParams(
                "sample_fraction must lie in (0, 1) with at least one node".into(),
            ));
        }
        let c = self.total_nodes as f64;
        Ok(2.0 * q * (1.0 - q) * c * (1.0 - f) * f / ((1.0 - f) - f))
    }
}

/// Committee for one mini-round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionSet<N> {
    pub round: u64,
    pub mini_round: u32,
    pub members: Vec<N>,
    pub seed: Hash32,
}

impl<N: PartialEq> ExecutionSet<N> {
    pub fn contains(&self, node: &N) -> bool {
        self.members.iter().any(|m| m == node)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// One node's digest commitment in a mini-round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord<N> {
    pub mini_round: u32,
    pub digest: Hash32,
    pub node: N,
}

/// Size of execution set `i` (1-based) before capping: `s_0 + 2^(i-1) - 1`.
pub fn uncapped_execution_set_size(mini_round: u32, base_size: u64) -> u64 {
    assert!(mini_round >= 1, "mini-rounds are numbered from 1");
    let growth = 1u64
        .checked_shl(mini_round - 1)
        .filter(|_| mini_round <= 63)
        .unwrap_or(u64::MAX);
    base_size.saturating_add(growth - 1)
}

/// Size of execution set `i`, capped at the node population.
pub fn execution_set_size(mini_round: u32, base_size: usize, total_nodes: usize) -> usize {
    let raw = uncapped_execution_set_size(mini_round, base_size as u64);
    raw.min(total_nodes as u64) as usize
}

/// Total selections over `r` mini-rounds: `S_r = r(s_0 - 1) + 2^r - 1`.
pub fn total_executions(rounds: u32, base_size: u64) -> u64 {
    assert!((1..64).contains(&rounds));
    rounds as u64 * (base_size - 1) + ((1u64 << rounds) - 1)
}

/// Seed for the sortition of mini-round `i` in global round `t`.
pub fn sortition_seed(beacon: &Hash32, auction: u64, round: u64, mini_round: u32) -> Hash32 {
    SeedBuilder::new("d2m/sortition")
        .hash(beacon)
        .u64(auction)
        .u64(round)
        .u64(mini_round as u64)
        .finish()
}

/// Uniform sample of `size` distinct members of `nodes`, keyed by `seed`.
///
/// Members are returned in population order.
pub fn sortition<N: Clone>(
    seed: &Hash32,
    nodes: &[N],
    size: usize,
) -> Result<Vec<N>, ConsensusError> {
    if size > nodes.len() {
        return Err(ConsensusError::SizeExceedsPopulation {
            size,
            population: nodes.len(),
        });
    }
    let mut rng = seed.rng();
    let mut picked = index::sample(&mut rng, nodes.len(), size).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| nodes[i].clone()).collect())
}

/// Cumulative scores `L_{k,i} = Σ_l (2 c_{k,l} - C_l)·C_l` for every digest seen.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodTable {
    pub scores: BTreeMap<Hash32, i64>,
    pub sizes: Vec<usize>,
}

impl LikelihoodTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mini_rounds(&self) -> usize {
        self.sizes.len()
    }

    pub fn score(&self, digest: &Hash32) -> Option<i64> {
        self.scores.get(digest).copied()
    }

    /// Fold in one mini-round of commits from an execution set of `size` members.
    pub fn add_mini_round<'a, I>(&mut self, digests: I, size: usize) -> Result<(), ConsensusError>
    where
        I: IntoIterator<Item = &'a Hash32>,
    {
        let mut counts: BTreeMap<Hash32, i64> = BTreeMap::new();
        let mut total = 0usize;
        for d in digests {
            *counts.entry(*d).or_default() += 1;
            total += 1;
        }
        if total > size {
            return Err(ConsensusError::TooManyCommits {
                mini_round: self.sizes.len() as u32 + 1,
                commits: total,
                size,
            });
        }
        let c = size as i64;
        // A digest first seen now still owes -C_l^2 for each earlier mini-round.
        let prior: i64 = self.sizes.iter().map(|&s| -((s as i64) * (s as i64))).sum();
        for d in counts.keys() {
            self.scores.entry(*d).or_insert(prior);
        }
        for (d, score) in self.scores.iter_mut() {
            let k = counts.get(d).copied().unwrap_or(0);
            *score += (2 * k - c) * c;
        }
        self.sizes.push(size);
        Ok(())
    }
}

/// Build a table from commits grouped by mini-round.
pub fn likelihood_scores<N>(
    commits: &[Vec<CommitRecord<N>>],
    sizes: &[usize],
) -> Result<LikelihoodTable, ConsensusError> {
    assert_eq!(commits.len(), sizes.len(), "one size per mini-round");
    let mut table = LikelihoodTable::new();
    for (round, &size) in commits.iter().zip(sizes) {
        table.add_mini_round(round.iter().map(|c| &c.digest), size)?;
    }
    Ok(table)
}

/// Acceptance threshold
/// `θ = ln((1-β)/β) · 2q(1-q)·C·(1-f)·f / ((1-f) - f)`.
pub fn threshold(params: &ConsensusParams) -> Result<f64, ConsensusError> {
    let beta = params.confidence_beta;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(ConsensusError::DegenerateParams(format!(
            "confidence_beta = {beta} outside (0, 1)"
        )));
    }
    Ok(((1.0 - beta) / beta).ln() * params.spread()?)
}

/// Upper bound on the probability of accepting a wrong digest for a given θ.
pub fn acceptance_bound_beta(theta: f64, params: &ConsensusParams) -> Result<f64, ConsensusError> {
    let spread = params.spread()?;
    Ok(1.0 / (1.0 + (theta / spread).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Accept(Hash32),
    Continue,
}

fn best(table: &LikelihoodTable) -> Option<(Hash32, i64)> {
    // BTreeMap iterates in ascending digest order, so `>` keeps the smallest
    // digest among equal scores.
    let mut out: Option<(Hash32, i64)> = None;
    for (d, &s) in &table.scores {
        match out {
            Some((_, bs)) if s <= bs => {}
            _ => out = Some((*d, s)),
        }
    }
    out
}

/// Accept the highest-scoring digest if it strictly exceeds θ.
pub fn decide(table: &LikelihoodTable, theta: f64) -> Decision {
    match best(table) {
        Some((d, s)) if s as f64 > theta => Decision::Accept(d),
        _ => Decision::Continue,
    }
}

/// Exhaustion fallback: the maximal-score digest regardless of θ.
pub fn decide_exhausted(table: &LikelihoodTable) -> Option<Hash32> {
    best(table).map(|(d, _)| d)
}

/// Result of a complete run of mini-rounds for one global round.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutcome<N> {
    pub accepted: Hash32,
    pub mini_rounds: u32,
    pub execution_sets: Vec<ExecutionSet<N>>,
    pub table: LikelihoodTable,
    /// True when acceptance came from the exhaustion fallback.
    pub exhausted: bool,
}

/// Drives mini-rounds until a digest crosses θ.
///
/// `seed_for(i)` supplies the sortition seed for mini-round `i`; `execute`
/// receives each execution set and returns the commits that arrived (members
/// that time out are simply absent). When the set has grown to the whole
/// population and still nothing crosses θ, the best digest is accepted if
/// `allow_exhaustion`, else [`ConsensusError::NoConsensus`].
pub fn run_mini_rounds<N, S, E>(
    params: &ConsensusParams,
    theta: f64,
    round: u64,
    nodes: &[N],
    allow_exhaustion: bool,
    mut seed_for: S,
    mut execute: E,
) -> Result<ConsensusOutcome<N>, ConsensusError>
where
    N: Clone,
    S: FnMut(u32) -> Hash32,
    E: FnMut(&ExecutionSet<N>) -> Vec<CommitRecord<N>>,
{
    let population = nodes.len().min(params.total_nodes);
    let mut table = LikelihoodTable::new();
    let mut sets = Vec::new();
    let mut mini_round = 0u32;
    loop {
        mini_round += 1;
        let size = execution_set_size(mini_round, params.base_size, population);
        let seed = seed_for(mini_round);
        let members = sortition(&seed, nodes, size)?;
        let es = ExecutionSet {
            round,
            mini_round,
            members,
            seed,
        };
        let commits = execute(&es);
        table.add_mini_round(commits.iter().map(|c| &c.digest), size)?;
        sets.push(es);
        if let Decision::Accept(d) = decide(&table, theta) {
            return Ok(ConsensusOutcome {
                accepted: d,
                mini_rounds: mini_round,
                execution_sets: sets,
                table,
                exhausted: false,
            });
        }
        if size >= population {
            if !allow_exhaustion {
                return Err(ConsensusError::NoConsensus);
            }
            let d = decide_exhausted(&table).ok_or(ConsensusError::NoConsensus)?;
            return Ok(ConsensusOutcome {
                accepted: d,
                mini_rounds: mini_round,
                execution_sets: sets,
                table,
                exhausted: true,
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_params() -> ConsensusParams {
        ConsensusParams {
            total_nodes: 50,
            sample_fraction: 0.1,
            byz_fraction_max: 0.3,
            confidence_beta: 0.01,
            base_size: 5,
        }
    }

    fn h(tag: u8) -> Hash32 {
        Hash32([tag; 32])
    }

    #[test]
    fn execution_set_sizes() {
        assert_eq!(execution_set_size(1, 4, 100), 4);
        // recurrence 4, 5, 7, 11
        assert_eq!(execution_set_size(4, 4, 100), 11);
        assert_eq!(execution_set_size(10, 4, 50), 50);
        assert_eq!(uncapped_execution_set_size(64, 1), u64::MAX);
    }

    #[test]
    fn total_execution_examples() {
        assert_eq!(total_executions(1, 4), 4);
        assert_eq!(total_executions(4, 4), 4 + 5 + 7 + 11);
        assert_eq!(total_executions(3, 1), 1 + 2 + 4);
    }

    #[test]
    fn sortition_full_population_and_determinism() {
        let nodes: Vec<u32> = (0..10).collect();
        let seed = Hash32::of(b"s");
        assert_eq!(sortition(&seed, &nodes, 10).unwrap(), nodes);
        let a = sortition(&seed, &nodes, 4).unwrap();
        assert_eq!(a, sortition(&seed, &nodes, 4).unwrap());
        assert_eq!(a.len(), 4);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            sortition(&seed, &nodes, 11),
            Err(ConsensusError::SizeExceedsPopulation {
                size: 11,
                population: 10
            })
        );
    }

    #[test]
    fn likelihood_examples() {
        let mut t = LikelihoodTable::new();
        t.add_mini_round(&[h(1); 5], 5).unwrap();
        assert_eq!(t.score(&h(1)), Some(25));

        let mut t = LikelihoodTable::new();
        t.add_mini_round(&[h(1), h(1), h(2), h(2)], 4).unwrap();
        assert_eq!(t.score(&h(1)), Some(0));
        assert_eq!(t.score(&h(2)), Some(0));
        assert_eq!(t.score(&h(3)), None);

        let r1 = vec![h(1), h(1), h(1), h(2)];
        let r2 = vec![h(1), h(1), h(1), h(1), h(2)];
        let mut t = LikelihoodTable::new();
        t.add_mini_round(&r1, 4).unwrap();
        t.add_mini_round(&r2, 5).unwrap();
        assert_eq!(t.score(&h(1)), Some(23));
    }

    #[test]
    fn late_digest_pays_for_earlier_rounds() {
        let mut t = LikelihoodTable::new();
        t.add_mini_round(&[h(1), h(1)], 2).unwrap();
        t.add_mini_round(&[h(2), h(2), h(1)], 3).unwrap();
        // h(2): (0-2)*2 + (4-3)*3
        assert_eq!(t.score(&h(2)), Some(-4 + 3));
        assert_eq!(t.score(&h(1)), Some(4 - 3));
    }

    #[test]
    fn too_many_commits_rejected() {
        let mut t = LikelihoodTable::new();
        assert!(matches!(
            t.add_mini_round(&[h(1); 3], 2),
            Err(ConsensusError::TooManyCommits { .. })
        ));
    }

    #[test]
    fn threshold_examples() {
        let p = reference_params();
        let theta = threshold(&p).unwrap();
        let expected = 99f64.ln() * 4.725;
        assert!((theta - expected).abs() < 1e-12);
        assert!((theta - 21.71).abs() < 0.01);

        let mut degenerate = p.clone();
        degenerate.byz_fraction_max = 0.5;
        assert!(matches!(
            threshold(&degenerate),
            Err(ConsensusError::DegenerateParams(_))
        ));
        degenerate.byz_fraction_max = 0.0;
        assert!(threshold(&degenerate).is_err());

        let mut half = p.clone();
        half.confidence_beta = 0.5;
        assert_eq!(threshold(&half).unwrap(), 0.0);
    }

    #[test]
    fn beta_round_trip_and_monotone() {
        let p = reference_params();
        let theta = threshold(&p).unwrap();
        assert!((acceptance_bound_beta(theta, &p).unwrap() - 0.01).abs() < 1e-9);
        assert_eq!(acceptance_bound_beta(0.0, &p).unwrap(), 0.5);
        let mut last = 0.5;
        for k in 1..200 {
            let b = acceptance_bound_beta(k as f64 * 5.0, &p).unwrap();
            assert!(b < last);
            last = b;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn decide_examples() {
        let theta = threshold(&reference_params()).unwrap();
        let mut t = LikelihoodTable::new();
        t.scores.insert(h(0xA), 25);
        assert_eq!(decide(&t, theta), Decision::Accept(h(0xA)));

        let mut t = LikelihoodTable::new();
        t.scores.insert(h(0xA), 10);
        t.scores.insert(h(0xB), 10);
        assert_eq!(decide(&t, theta), Decision::Continue);

        let mut t = LikelihoodTable::new();
        t.scores.insert(h(0xB), 30);
        t.scores.insert(h(0xA), 30);
        assert_eq!(decide(&t, theta), Decision::Accept(h(0xA)));

        let mut t = LikelihoodTable::new();
        t.scores.insert(h(0xB), 40);
        t.scores.insert(h(0xA), 30);
        assert_eq!(decide(&t, theta), Decision::Accept(h(0xB)));
        assert_eq!(decide(&LikelihoodTable::new(), theta), Decision::Continue);
    }

    #[test]
    fn honest_unanimity_accepts_first_mini_round() {
        let p = reference_params();
        let theta = threshold(&p).unwrap();
        let nodes: Vec<usize> = (0..50).collect();
        let out = run_mini_rounds(
            &p,
            theta,
            0,
            &nodes,
            true,
            |i| Hash32::of(&[i as u8]),
            |es| {
                es.members
                    .iter()
                    .map(|&n| CommitRecord {
                        mini_round: es.mini_round,
                        digest: h(7),
                        node: n,
                    })
                    .collect()
            },
        )
        .unwrap();
        assert_eq!(out.mini_rounds, 1);
        assert_eq!(out.accepted, h(7));
        assert!(!out.exhausted);
    }

    #[test]
    fn exhaustion_accepts_best_or_errors() {
        let p = ConsensusParams {
            total_nodes: 6,
            base_size: 2,
            ..reference_params()
        };
        // Every node emits its own digest: nothing ever crosses θ.
        let nodes: Vec<u8> = (0..6).collect();
        let run = |allow| {
            run_mini_rounds(
                &p,
                1e9,
                0,
                &nodes,
                allow,
                |i| Hash32::of(&[i as u8]),
                |es| {
                    es.members
                        .iter()
                        .map(|&n| CommitRecord {
                            mini_round: es.mini_round,
                            digest: h(n),
                            node: n,
                        })
                        .collect()
                },
            )
        };
        let out = run(true).unwrap();
        assert!(out.exhausted);
        // sizes 2, 3, 5, 6(capped)
        assert_eq!(out.table.sizes, vec![2, 3, 5, 6]);
        assert_eq!(run(false), Err(ConsensusError::NoConsensus));
    }

    #[test]
    fn params_validation() {
        assert!(reference_params().validate().is_ok());
        let mut p = reference_params();
        p.base_size = 0;
        assert!(p.validate().is_err());
        let mut p = reference_params();
        p.sample_fraction = 1.0;
        assert!(p.validate().is_err());
    }
}
