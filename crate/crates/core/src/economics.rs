//! Revenue distribution and the incentive-compatibility calculus.
//!
//! Token transfers use exact integer arithmetic; the payoff analysis uses
//! `f64` and never touches balances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Compute nodes receive `CONE_SHARE_NUM / CONE_SHARE_DEN` of the bid.
pub const CONE_SHARE_NUM: u64 = 3;
pub const CONE_SHARE_DEN: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EconomicsError {
    #[error("no {0} with positive weight to pay")]
    EmptyContributors(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevenueReport {
    pub bid_amount: u64,
    pub cone_share: u64,
    pub seller_share: u64,
    pub node_transfers: BTreeMap<String, u64>,
    pub seller_transfers: BTreeMap<String, u64>,
}

impl RevenueReport {
    pub fn total_transferred(&self) -> u64 {
        self.node_transfers.values().sum::<u64>() + self.seller_transfers.values().sum::<u64>()
    }
}

/// `floor(pool * w_i / W)` per recipient; the floor remainder goes to the
/// lowest id with positive weight so the pool is paid out exactly.
fn split_pool(
    pool: u64,
    weights: &BTreeMap<String, u64>,
    what: &'static str,
) -> Result<BTreeMap<String, u64>, EconomicsError> {
    let total: u128 = weights.values().map(|&w| w as u128).sum();
    if total == 0 {
        return Err(EconomicsError::EmptyContributors(what));
    }
    let mut out: BTreeMap<String, u64> = weights
        .iter()
        .map(|(id, &w)| (id.clone(), (pool as u128 * w as u128 / total) as u64))
        .collect();
    let paid: u64 = out.values().sum();
    let first = weights
        .iter()
        .find(|(_, &w)| w > 0)
        .map(|(id, _)| id.clone())
        .expect("positive total implies a positive weight");
    *out.get_mut(&first).unwrap() += pool - paid;
    Ok(out)
}

/// 30% of the bid (floored) to compute nodes by participation count, the rest
/// to sellers by contribution.
pub fn distribute_revenue(
    bid_amount: u64,
    seller_contribs: &BTreeMap<String, u64>,
    node_counts: &BTreeMap<String, u64>,
) -> Result<RevenueReport, EconomicsError> {
    let cone_share = (bid_amount as u128 * CONE_SHARE_NUM as u128 / CONE_SHARE_DEN as u128) as u64;
    let seller_share = bid_amount - cone_share;
    let node_transfers = split_pool(cone_share, node_counts, "compute nodes")?;
    let seller_transfers = split_pool(seller_share, seller_contribs, "sellers")?;
    Ok(RevenueReport {
        bid_amount,
        cone_share,
        seller_share,
        node_transfers,
        seller_transfers,
    })
}

/// Probability `q_caught(r)` that a colluder is excluded from rewards when
/// consensus ends at mini-round `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum CatchModel {
    /// `1 - (1 - d)^(r - 1)`.
    Geometric {
        detection: f64,
    },
    Constant {
        value: f64,
    },
    /// Entry `r - 1` holds `q_caught(r)`; the last entry extends to larger `r`.
    Empirical {
        curve: Vec<f64>,
    },
}

impl Default for CatchModel {
    fn default() -> Self {
        CatchModel::Geometric { detection: 0.3 }
    }
}

impl CatchModel {
    pub fn probability(&self, rounds: u32) -> f64 {
        let r = rounds.max(1);
        match self {
            CatchModel::Geometric { detection } => 1.0 - (1.0 - detection).powi(r as i32 - 1),
            CatchModel::Constant { value } => *value,
            CatchModel::Empirical { curve } => {
                if curve.is_empty() {
                    0.0
                } else {
                    curve[(r as usize - 1).min(curve.len() - 1)]
                }
            }
        }
    }

    /// Builds an empirical curve from consensus traces of colluding attempts:
    /// `(mini_rounds_at_termination, wrong_digest_accepted)`. The raw
    /// per-`r` catch rates are made non-decreasing by a running maximum;
    /// rounds with no observations inherit the previous value.
    pub fn from_traces(traces: &[(u32, bool)]) -> CatchModel {
        let max_r = traces.iter().map(|t| t.0).max().unwrap_or(0) as usize;
        let mut caught = vec![0u64; max_r];
        let mut seen = vec![0u64; max_r];
        for &(r, wrong) in traces {
            let i = r.max(1) as usize - 1;
            seen[i] += 1;
            if !wrong {
                caught[i] += 1;
            }
        }
        let mut curve = Vec::with_capacity(max_r);
        let mut last = 0.0f64;
        for i in 0..max_r {
            if seen[i] > 0 {
                last = last.max(caught[i] as f64 / seen[i] as f64);
            }
            curve.push(last);
        }
        CatchModel::Empirical { curve }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffParams {
    /// Seller pool `A_n`.
    pub seller_pool: f64,
    /// Compute-node pool `A_c`.
    pub cone_pool: f64,
    /// Number of compute nodes `N`.
    pub node_count: usize,
    /// Per-node bribe `b`.
    pub bribe: f64,
    /// True data quality `q`.
    pub quality_honest: f64,
    /// Falsified quality `q'`.
    pub quality_claimed: f64,
    /// Probability `β` that collusion succeeds.
    pub success_prob: f64,
    #[serde(default)]
    pub catch_model: CatchModel,
}

impl PayoffParams {
    fn n(&self) -> f64 {
        self.node_count as f64
    }

    pub fn q_caught(&self, rounds: u32) -> f64 {
        self.catch_model.probability(rounds)
    }
}

/// Honest: `q A_n`. Malicious: `(1-β) q A_n + β (q' A_n - N b)`.
pub fn seller_payoff(p: &PayoffParams, honest: bool) -> f64 {
    let honest_pay = p.quality_honest * p.seller_pool;
    if honest {
        honest_pay
    } else {
        (1.0 - p.success_prob) * honest_pay
            + p.success_prob * (p.quality_claimed * p.seller_pool - p.n() * p.bribe)
    }
}

/// Honest: `A_c / N` for any `r`. Colluding: `(A_c / N)(1 - q_caught(r)) + β b`.
pub fn cone_payoff(p: &PayoffParams, rounds: u32, honest: bool) -> f64 {
    let share = p.cone_pool / p.n();
    if honest {
        share
    } else {
        share * (1.0 - p.q_caught(rounds)) + p.success_prob * p.bribe
    }
}

/// Seller honesty: `Δ = β (N b - (q' - q) A_n)`, holds iff `N b ≥ (q' - q) A_n`.
pub fn lemma1_check(p: &PayoffParams) -> (bool, f64) {
    let bribe_total = p.n() * p.bribe;
    let gain = (p.quality_claimed - p.quality_honest) * p.seller_pool;
    (bribe_total >= gain, p.success_prob * (bribe_total - gain))
}

/// Node honesty: `Δ = q_caught(r) A_c / N - β b`, holds iff `Δ ≥ 0`.
pub fn lemma2_check(p: &PayoffParams, rounds: u32) -> (bool, f64) {
    let delta = p.q_caught(rounds) * p.cone_pool / p.n() - p.success_prob * p.bribe;
    (delta >= 0.0, delta)
}

/// Feasible per-node bribes satisfying both lemmas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BribeWindow {
    pub lower: f64,
    /// `None` means unbounded above.
    pub upper: Option<f64>,
}

impl BribeWindow {
    pub fn is_empty(&self) -> bool {
        matches!(self.upper, Some(u) if u < self.lower)
    }

    pub fn contains(&self, b: f64) -> bool {
        b >= self.lower && self.upper.is_none_or(|u| b <= u)
    }
}

/// Holds iff `β (q' - q) A_n ≤ q_caught(r) A_c`. The window is
/// `[(q' - q) A_n / N, q_caught(r) A_c / (β N)]`, open above when `β = 0`.
pub fn theorem1_check(p: &PayoffParams, rounds: u32) -> (bool, BribeWindow) {
    let gain = (p.quality_claimed - p.quality_honest) * p.seller_pool;
    let deterrent = p.q_caught(rounds) * p.cone_pool;
    let holds = p.success_prob * gain <= deterrent;
    let lower = gain / p.n();
    let upper = if p.success_prob > 0.0 {
        Some(deterrent / (p.success_prob * p.n()))
    } else {
        None
    };
    (holds, BribeWindow { lower, upper })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffReport {
    pub rounds: u32,
    pub q_caught: f64,
    pub u_s_honest: f64,
    pub u_s_malicious: f64,
    pub u_c_honest: f64,
    pub u_c_collude: f64,
    pub lemma1_holds: bool,
    pub lemma1_delta: f64,
    pub lemma2_holds: bool,
    pub lemma2_delta: f64,
    pub theorem1_holds: bool,
    pub bribe_window: BribeWindow,
}

pub fn analyze(p: &PayoffParams, rounds: u32) -> PayoffReport {
    let (lemma1_holds, lemma1_delta) = lemma1_check(p);
    let (lemma2_holds, lemma2_delta) = lemma2_check(p, rounds);
    let (theorem1_holds, bribe_window) = theorem1_check(p, rounds);
    PayoffReport {
        rounds,
        q_caught: p.q_caught(rounds),
        u_s_honest: seller_payoff(p, true),
        u_s_malicious: seller_payoff(p, false),
        u_c_honest: cone_payoff(p, rounds, true),
        u_c_collude: cone_payoff(p, rounds, false),
        lemma1_holds,
        lemma1_delta,
        lemma2_holds,
        lemma2_delta,
        theorem1_holds,
        bribe_window,
    }
}
