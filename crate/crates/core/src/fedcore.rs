//! Corrected OSMD: adaptive seller sampling by online stochastic mirror
//! descent over a floored simplex, importance-weighted utility estimates,
//! and distance-to-mean ("corrected") Krum aggregation.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::hash::{Hash32, SeedBuilder};
use crate::training::{state_digest, ModelWeights, TrainingError};

#[derive(Debug, thiserror::Error)]
pub enum FedError {
    #[error("no candidates to aggregate")]
    EmptyCandidates,
    #[error("candidate {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("seller {0} was sampled but has zero probability")]
    ZeroProbabilitySampled(usize),
    #[error("simplex projection failed: {0}")]
    NumericalFailure(String),
    #[error("invalid sampling distribution: {0}")]
    InvalidDistribution(String),
    #[error("missing utility delta for sampled seller {0}")]
    MissingUtility(usize),
    #[error("oracle returned {found} updates for {expected} sellers")]
    OracleShape { expected: usize, found: usize },
    #[error(transparent)]
    Training(#[from] TrainingError),
}

/// How candidate models `w + γ g_i` are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    /// Candidate closest to the coordinate-wise mean.
    #[default]
    CorrectedKrum,
    /// Classical Krum scoring, assuming `byzantine` faulty candidates.
    ClassicalKrum { byzantine: usize },
    /// Plain coordinate-wise mean (no robustness).
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsmdParams {
    /// Sellers sampled per round, `K`.
    pub batch_size: usize,
    /// Mirror-descent learning rate `η`.
    pub learning_rate: f64,
    /// Model step sizes `γ_t`; the last entry repeats. Empty means 1.0.
    pub step_sizes: Vec<f64>,
    /// Floor fraction `α`: every probability stays at least `α / n`.
    pub floor_fraction: f64,
    #[serde(default)]
    pub aggregator: Aggregator,
}

impl Default for OsmdParams {
    fn default() -> Self {
        OsmdParams {
            batch_size: 10,
            learning_rate: 1.0,
            step_sizes: vec![1.0],
            floor_fraction: 0.5,
            aggregator: Aggregator::CorrectedKrum,
        }
    }
}

impl OsmdParams {
    pub fn step_size(&self, round: u64) -> f64 {
        if self.step_sizes.is_empty() {
            return 1.0;
        }
        let i = (round as usize).min(self.step_sizes.len() - 1);
        self.step_sizes[i]
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let bad = |m: &str| Err(FedError::InvalidDistribution(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a non-negative real");
        }
        if !(0.0..=1.0).contains(&self.floor_fraction) {
            return bad("floor_fraction must lie in [0, 1]");
        }
        if self.step_sizes.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return bad("step sizes must be positive");
        }
        Ok(())
    }
}

/// Sampling probabilities `p^t` over sellers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDistribution(pub Vec<f64>);

impl SamplingDistribution {
    pub fn uniform(n: usize) -> Self {
        SamplingDistribution(vec![1.0 / n as f64; n])
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

    /// Checks mass 1 (within 1e-9) and the `α/n` floor (within 1e-12).
    pub fn check(&self, alpha: f64) -> Result<(), FedError> {
        let n = self.0.len();
        if n == 0 {
            return Err(FedError::InvalidDistribution("empty".into()));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FedError::InvalidDistribution(format!("sums to {sum}")));
        }
        let floor = alpha / n as f64;
        if let Some(v) = self.0.iter().find(|&&v| !(v >= floor - 1e-12)) {
            return Err(FedError::InvalidDistribution(format!(
                "entry {v} below floor {floor}"
            )));
        }
        Ok(())
    }
}

/// Per-seller access counts `N^t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessCounts(pub Vec<u64>);

impl AccessCounts {
    pub fn zeros(n: usize) -> Self {
        AccessCounts(vec![0; n])
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalUpdate {
    pub seller: usize,
    pub delta: Vec<f64>,
}

/// `û^t`; zero for sellers not in the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityEstimate(pub Vec<f64>);

/// Draws `K` seller indices i.i.d. from `p`. Order is draw order.
pub fn sample_sellers(
    p: &SamplingDistribution,
    k: usize,
    seed: &Hash32,
) -> Result<Vec<usize>, FedError> {
    let dist =
        WeightedIndex::new(&p.0).map_err(|e| FedError::InvalidDistribution(e.to_string()))?;
    let mut rng = seed.rng();
    Ok((0..k).map(|_| dist.sample(&mut rng)).collect())
}

pub fn update_access_counts(counts: &AccessCounts, sample: &[usize]) -> AccessCounts {
    let mut out = counts.clone();
    for &i in sample {
        out.0[i] += 1;
    }
    out
}

fn multiplicities(sample: &[usize]) -> BTreeMap<usize, u64> {
    let mut m = BTreeMap::new();
    for &i in sample {
        *m.entry(i).or_insert(0) += 1;
    }
    m
}

/// `û_i = count_i / (K p_i) · ΔU_i` for sampled `i`, zero elsewhere.
pub fn utility_estimates(
    sample: &[usize],
    p: &SamplingDistribution,
    k: usize,
    delta_utilities: &BTreeMap<usize, f64>,
) -> Result<UtilityEstimate, FedError> {
    let mut u = vec![0.0; p.len()];
    for (i, count) in multiplicities(sample) {
        let pi = p.0[i];
        if pi <= 0.0 {
            return Err(FedError::ZeroProbabilitySampled(i));
        }
        let du = *delta_utilities.get(&i).ok_or(FedError::MissingUtility(i))?;
        u[i] = count as f64 / (k as f64 * pi) * du;
    }
    Ok(UtilityEstimate(u))
}

/// KL (negative-entropy Bregman) projection of a positive vector onto
/// `{q : Σq = 1, q_i ≥ floor}`. The solution has the form
/// `q_i = max(floor, c · v_i)`; entries are clipped until `c` is consistent.
fn project_floored_simplex(v: &[f64], floor: f64) -> Result<Vec<f64>, FedError> {
    let n = v.len();
    let mut clipped = vec![false; n];
    let mut clipped_count = 0usize;
    for _ in 0..=n {
        let free_mass = 1.0 - floor * clipped_count as f64;
        let free_sum: f64 = v
            .iter()
            .zip(&clipped)
            .filter(|(_, &c)| !c)
            .map(|(x, _)| *x)
            .sum();
        if clipped_count == n || free_sum <= 0.0 {
            // Everything sits on the floor (α = 1) or no mass left to share.
            return Ok(vec![1.0 / n as f64; n]);
        }
        let c = free_mass / free_sum;
        let mut changed = false;
        for i in 0..n {
            if !clipped[i] && c * v[i] < floor {
                clipped[i] = true;
                clipped_count += 1;
                changed = true;
            }
        }
        if !changed {
            let q: Vec<f64> = v
                .iter()
                .zip(&clipped)
                .map(|(x, &cl)| if cl { floor } else { c * x })
                .collect();
            return Ok(q);
        }
    }
    Err(FedError::NumericalFailure("clipping did not settle".into()))
}

/// One mirror-descent step with the negative-entropy mirror map:
/// `p̃_i ∝ p_i exp(-η û_i)`, then KL projection onto the floored simplex.
pub fn omd_update(
    p: &SamplingDistribution,
    u_hat: &UtilityEstimate,
    eta: f64,
    alpha: f64,
) -> Result<SamplingDistribution, FedError> {
    let n = p.len();
    if n == 0 || u_hat.0.len() != n {
        return Err(FedError::InvalidDistribution(format!(
            "distribution of length {n} with estimate of length {}",
            u_hat.0.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(FedError::InvalidDistribution(format!("alpha = {alpha}")));
    }
    // work in log space so large estimates do not overflow
    let logs: Vec<f64> =
        p.0.iter()
            .zip(&u_hat.0)
            .map(|(pi, ui)| {
                if *pi > 0.0 {
                    pi.ln() - eta * ui
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(FedError::NumericalFailure(
            "no finite mass after exponentiation".into(),
        ));
    }
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let floor = alpha / n as f64;
    let q = project_floored_simplex(&weights, floor)?;
    let sum: f64 = q.iter().sum();
    let min = q.iter().cloned().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > 1e-10 || min < floor - 1e-12 || q.iter().any(|x| !x.is_finite()) {
        return Err(FedError::NumericalFailure(format!(
            "projection infeasible: sum {sum}, min {min}, floor {floor}"
        )));
    }
    Ok(SamplingDistribution(q))
}

fn check_candidates(candidates: &[&[f64]]) -> Result<usize, FedError> {
    let first = candidates.first().ok_or(FedError::EmptyCandidates)?;
    let dim = first.len();
    for (index, c) in candidates.iter().enumerate() {
        if c.len() != dim {
            return Err(FedError::DimensionMismatch {
                index,
                expected: dim,
                found: c.len(),
            });
        }
    }
    Ok(dim)
}

pub fn coordinate_mean(candidates: &[&[f64]]) -> Result<Vec<f64>, FedError> {
    let dim = check_candidates(candidates)?;
    let mut mean = vec![0.0; dim];
    for c in candidates {
        for (m, v) in mean.iter_mut().zip(c.iter()) {
            *m += v;
        }
    }
    let n = candidates.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the candidate closest (squared Euclidean) to the coordinate-wise
/// mean of all candidates. Ties go to the lowest index.
pub fn corrected_krum(candidates: &[&[f64]]) -> Result<usize, FedError> {
    let mean = coordinate_mean(candidates)?;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let d = sq_dist(c, &mean);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

/// Classical Krum: score each candidate by the summed squared distance to its
/// `n - f - 2` nearest neighbours and pick the minimum.
pub fn classical_krum(candidates: &[&[f64]], byzantine: usize) -> Result<usize, FedError> {
    check_candidates(candidates)?;
    let n = candidates.len();
    let neighbours = n.saturating_sub(byzantine + 2).max(1).min(n - 1);
    if n == 1 {
        return Ok(0);
    }
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for i in 0..n {
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| sq_dist(candidates[i], candidates[j]))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let score: f64 = d[..neighbours].iter().sum();
        if score < best_score {
            best = i;
            best_score = score;
        }
    }
    Ok(best)
}

/// Supplies seller updates and the utility function to a round.
pub trait RoundOracle {
    /// Updates `g_i = O_i(w)` for each listed seller, in the same order.
    fn local_updates(
        &mut self,
        round: u64,
        sellers: &[usize],
        w: &ModelWeights,
    ) -> Result<Vec<Vec<f64>>, FedError>;

    /// `U(w)`; lower is better.
    fn utility(&mut self, w: &ModelWeights) -> Result<f64, FedError>;
}

/// Output of one Corrected OSMD round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutput {
    pub weights: ModelWeights,
    pub distribution: SamplingDistribution,
    pub counts: AccessCounts,
    /// Sampled seller per draw.
    pub sample: Vec<usize>,
    /// Index into `sample` of the candidate the aggregator chose; `None` for
    /// mean aggregation.
    pub chosen: Option<usize>,
    pub estimates: UtilityEstimate,
}

/// The triple `(w, p, N)` an executor commits to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub weights: ModelWeights,
    pub distribution: SamplingDistribution,
    pub counts: AccessCounts,
}

impl ModelState {
    /// `w⁰`, uniform `p⁰` and zero counts.
    pub fn initial(weights: ModelWeights, sellers: usize) -> Self {
        ModelState {
            weights,
            distribution: SamplingDistribution::uniform(sellers),
            counts: AccessCounts::zeros(sellers),
        }
    }

    pub fn digest(&self) -> Result<Hash32, TrainingError> {
        state_digest(&self.weights, &self.distribution.0, &self.counts.0)
    }
}

impl From<RoundOutput> for ModelState {
    fn from(out: RoundOutput) -> Self {
        ModelState {
            weights: out.weights,
            distribution: out.distribution,
            counts: out.counts,
        }
    }
}

/// Seed for the seller sample of global round `t`; shared by all executors.
pub fn round_seed(auction: u64, round: u64) -> Hash32 {
    SeedBuilder::new("d2m/osmd-round")
        .u64(auction)
        .u64(round)
        .finish()
}

/// Sample, fetch updates, count, estimate, mirror-descent step, aggregate.
pub fn corrected_osmd_round(
    w: &ModelWeights,
    p: &SamplingDistribution,
    counts: &AccessCounts,
    params: &OsmdParams,
    round: u64,
    seed: &Hash32,
    oracle: &mut dyn RoundOracle,
) -> Result<RoundOutput, FedError> {
    let k = params.batch_size;
    let sample = sample_sellers(p, k, seed)?;
    let distinct: Vec<usize> = multiplicities(&sample).keys().copied().collect();
    let updates = oracle.local_updates(round, &distinct, w)?;
    if updates.len() != distinct.len() {
        return Err(FedError::OracleShape {
            expected: distinct.len(),
            found: updates.len(),
        });
    }
    let gamma = params.step_size(round);
    let mut stepped: BTreeMap<usize, ModelWeights> = BTreeMap::new();
    for (&seller, g) in distinct.iter().zip(&updates) {
        if g.len() != w.len() {
            return Err(FedError::DimensionMismatch {
                index: seller,
                expected: w.len(),
                found: g.len(),
            });
        }
        stepped.insert(seller, w.stepped(g, gamma));
    }

    let new_counts = update_access_counts(counts, &sample);
    let base = oracle.utility(w)?;
    let mut deltas = BTreeMap::new();
    for (&seller, cand) in &stepped {
        deltas.insert(seller, oracle.utility(cand)? - base);
    }
    let estimates = utility_estimates(&sample, p, k, &deltas)?;
    let distribution = omd_update(p, &estimates, params.learning_rate, params.floor_fraction)?;

    let candidates: Vec<&[f64]> = sample
        .iter()
        .map(|i| stepped[i].values.as_slice())
        .collect();
    let (weights, chosen) = match params.aggregator {
        Aggregator::CorrectedKrum => {
            let c = corrected_krum(&candidates)?;
            (stepped[&sample[c]].clone(), Some(c))
        }
        Aggregator::ClassicalKrum { byzantine } => {
            let c = classical_krum(&candidates, byzantine)?;
            (stepped[&sample[c]].clone(), Some(c))
        }
        Aggregator::Mean => (w.with_values(coordinate_mean(&candidates)?), None),
    };
    Ok(RoundOutput {
        weights,
        distribution,
        counts: new_counts,
        sample,
        chosen,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::ModelSpec;

    #[test]
    fn point_mass_sampling() {
        let p = SamplingDistribution(vec![0.0, 1.0, 0.0]);
        assert_eq!(sample_sellers(&p, 5, &Hash32::ZERO).unwrap(), vec![1; 5]);
    }

    #[test]
    fn sampling_is_seeded() {
        let p = SamplingDistribution::uniform(7);
        let a = sample_sellers(&p, 20, &Hash32::of(b"a")).unwrap();
        assert_eq!(a, sample_sellers(&p, 20, &Hash32::of(b"a")).unwrap());
        assert_ne!(a, sample_sellers(&p, 20, &Hash32::of(b"b")).unwrap());
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let p = SamplingDistribution::uniform(4);
        let draws = 1_000_000;
        let s = sample_sellers(&p, draws, &Hash32::of(b"freq")).unwrap();
        let mut counts = [0usize; 4];
        for i in s {
            counts[i] += 1;
        }
        let sigma = (draws as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * 0.25).abs() < 3.0 * sigma);
        }
    }

    #[test]
    fn access_count_examples() {
        let n = update_access_counts(&AccessCounts::zeros(2), &[0, 0, 1]);
        assert_eq!(n.0, vec![2, 1]);
        let n = update_access_counts(&AccessCounts(vec![5, 0, 2]), &[0]);
        assert_eq!(n.0, vec![6, 0, 2]);
        assert_eq!(n.total() - 7, 1);
    }

    #[test]
    fn utility_estimate_example() {
        let p = SamplingDistribution::uniform(4);
        let mut du = BTreeMap::new();
        du.insert(2, -0.1);
        du.insert(0, 0.3);
        let u = utility_estimates(&[2, 2, 0, 0], &p, 4, &du).unwrap();
        assert!((u.0[2] - (-0.2)).abs() < 1e-15);
        assert_eq!(u.0[1], 0.0);
        assert_eq!(u.0[3], 0.0);

        let p0 = SamplingDistribution(vec![0.0, 1.0]);
        assert!(matches!(
            utility_estimates(&[0], &p0, 1, &du),
            Err(FedError::ZeroProbabilitySampled(0))
        ));
        assert!(matches!(
            utility_estimates(&[1], &SamplingDistribution::uniform(2), 1, &BTreeMap::new()),
            Err(FedError::MissingUtility(1))
        ));
    }

    #[test]
    fn omd_zero_estimate_is_identity() {
        let p = SamplingDistribution(vec![0.2, 0.3, 0.5]);
        let q = omd_update(&p, &UtilityEstimate(vec![0.0; 3]), 0.7, 0.3).unwrap();
        for (a, b) in p.0.iter().zip(&q.0) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn omd_closed_form_two_sellers() {
        let p = SamplingDistribution(vec![0.5, 0.5]);
        let u = UtilityEstimate(vec![1.0, 0.0]);
        let q = omd_update(&p, &u, 2f64.ln(), 0.0).unwrap();
        assert!((q.0[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((q.0[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn omd_floor_clipping() {
        let p = SamplingDistribution::uniform(4);
        let u = UtilityEstimate(vec![50.0, 0.0, 0.0, 0.0]);
        let q = omd_update(&p, &u, 1.0, 0.4).unwrap();
        assert!((q.0[0] - 0.1).abs() < 1e-12);
        for v in &q.0[1..] {
            assert!((v - 0.3).abs() < 1e-12);
        }
        // α = 1 forces uniform
        let q = omd_update(&p, &u, 1.0, 1.0).unwrap();
        assert!(q.0.iter().all(|v| (v - 0.25).abs() < 1e-15));
        // η = 0 freezes p
        let q = omd_update(&p, &u, 0.0, 0.4).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn omd_huge_estimates_stay_finite() {
        let p = SamplingDistribution::uniform(3);
        let u = UtilityEstimate(vec![1e300, -1e300, 0.0]);
        let q = omd_update(&p, &u, 1.0, 0.3).unwrap();
        q.check(0.3).unwrap();
    }

    #[test]
    fn krum_examples() {
        let one = [1.0, 2.0];
        assert_eq!(corrected_krum(&[&one]).unwrap(), 0);

        let c: Vec<[f64; 2]> = vec![[1.0, 1.0], [1.1, 0.9], [0.9, 1.1], [10.0, 10.0]];
        let refs: Vec<&[f64]> = c.iter().map(|v| v.as_slice()).collect();
        assert_eq!(corrected_krum(&refs).unwrap(), 0);

        let same = [3.0, 3.0];
        assert_eq!(corrected_krum(&[&same, &same, &same]).unwrap(), 0);

        assert!(matches!(
            corrected_krum(&[]),
            Err(FedError::EmptyCandidates)
        ));
        let short = [1.0];
        assert!(matches!(
            corrected_krum(&[&same, &short]),
            Err(FedError::DimensionMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn classical_krum_rejects_outlier() {
        let c: Vec<[f64; 2]> = vec![
            [10.0, 10.0],
            [1.0, 1.0],
            [1.1, 0.9],
            [0.9, 1.1],
            [1.0, 1.05],
        ];
        let refs: Vec<&[f64]> = c.iter().map(|v| v.as_slice()).collect();
        assert_ne!(classical_krum(&refs, 1).unwrap(), 0);
        assert_eq!(classical_krum(&refs[..1], 0).unwrap(), 0);
    }

    struct ZeroOracle;

    impl RoundOracle for ZeroOracle {
        fn local_updates(
            &mut self,
            _round: u64,
            sellers: &[usize],
            w: &ModelWeights,
        ) -> Result<Vec<Vec<f64>>, FedError> {
            Ok(vec![vec![0.0; w.len()]; sellers.len()])
        }

        fn utility(&mut self, w: &ModelWeights) -> Result<f64, FedError> {
            Ok(w.values.iter().map(|v| v * v).sum())
        }
    }

    #[test]
    fn zero_updates_freeze_model_and_distribution() {
        let w = ModelWeights::zeros(&ModelSpec::logistic(2, 2));
        let p = SamplingDistribution::uniform(5);
        let params = OsmdParams {
            batch_size: 4,
            ..OsmdParams::default()
        };
        let out = corrected_osmd_round(
            &w,
            &p,
            &AccessCounts::zeros(5),
            &params,
            0,
            &Hash32::ZERO,
            &mut ZeroOracle,
        )
        .unwrap();
        assert_eq!(out.weights, w);
        assert_eq!(out.counts.total(), 4);
        for (a, b) in out.distribution.0.iter().zip(&p.0) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn step_size_schedule() {
        let mut p = OsmdParams::default();
        assert_eq!(p.step_size(7), 1.0);
        p.step_sizes = vec![0.5, 0.25];
        assert_eq!(p.step_size(0), 0.5);
        assert_eq!(p.step_size(9), 0.25);
        p.step_sizes.clear();
        assert_eq!(p.step_size(3), 1.0);
    }
}
