//! Quick self-checks of the library invariants, each against an
//! independent recomputation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::auction::run_auction_to_completion;
use super::scenario::Scenario;
use crate::consensus::{
    acceptance_bound_beta, execution_set_size, threshold, total_executions, ConsensusParams,
};
use crate::economics::{
    distribute_revenue, lemma1_check, seller_payoff, theorem1_check, PayoffParams,
};
use crate::fedcore::{corrected_krum, omd_update, SamplingDistribution, UtilityEstimate};
use crate::hash::Hash32;
use crate::ledger::Ledger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, run: impl FnOnce() -> Result<String, String>) -> CheckResult {
    match run() {
        Ok(detail) => CheckResult {
            name: name.into(),
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name: name.into(),
            passed: false,
            detail,
        },
    }
}

fn execution_sizes() -> Result<String, String> {
    for s0 in 1..=8u64 {
        let mut size = s0;
        let mut total = 0;
        for i in 1..=20u32 {
            if i > 1 {
                size += 1 << (i - 2);
            }
            total += size;
            if execution_set_size(i, s0 as usize, usize::MAX) as u64 != size {
                return Err(format!("size mismatch at s0={s0}, i={i}"));
            }
            if total_executions(i, s0) != total {
                return Err(format!("total mismatch at s0={s0}, r={i}"));
            }
        }
    }
    Ok("s0 1..8, r 1..20".into())
}

fn theta_beta(seed: &Hash32) -> Result<String, String> {
    let mut rng = seed.rng();
    for _ in 0..200 {
        let p = ConsensusParams {
            total_nodes: rng.random_range(4..500),
            sample_fraction: rng.random_range(0.01..0.99),
            byz_fraction_max: rng.random_range(0.01..0.49),
            confidence_beta: rng.random_range(1e-4..0.49),
            base_size: 1,
        };
        let t = threshold(&p).map_err(|e| e.to_string())?;
        let b = acceptance_bound_beta(t, &p).map_err(|e| e.to_string())?;
        if (b - p.confidence_beta).abs() > 1e-9 {
            return Err(format!("{p:?}: β {} → θ {t} → {b}", p.confidence_beta));
        }
    }
    Ok("200 parameter sets".into())
}

fn omd_feasible(seed: &Hash32) -> Result<String, String> {
    let mut rng = seed.rng();
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let alpha = rng.random_range(0.0..=1.0);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let floor = alpha / n as f64;
        let p: Vec<f64> = raw
            .iter()
            .map(|x| floor + (1.0 - alpha) * x / sum)
            .collect();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
        let eta = rng.random_range(0.0..5.0);
        let q = omd_update(&SamplingDistribution(p), &UtilityEstimate(u), eta, alpha)
            .map_err(|e| e.to_string())?;
        let total: f64 = q.0.iter().sum();
        if (total - 1.0).abs() > 1e-9 || q.0.iter().any(|&x| x < floor - 1e-12) {
            return Err(format!("infeasible output {:?}", q.0));
        }
    }
    Ok("1000 fuzzed updates".into())
}

fn krum_robust(seed: &Hash32) -> Result<String, String> {
    let mut rng = seed.rng();
    for _ in 0..200 {
        let n: usize = rng.random_range(3..15);
        let bad = rng.random_range(0..n.div_ceil(2));
        let mut cands: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        for c in cands.iter_mut().take(bad) {
            c.iter_mut().for_each(|x| *x += 1000.0);
        }
        let refs: Vec<&[f64]> = cands.iter().map(Vec::as_slice).collect();
        let i = corrected_krum(&refs).map_err(|e| e.to_string())?;
        if i < bad {
            return Err(format!("picked outlier {i} of {n} with {bad} outliers"));
        }
    }
    Ok("200 trials".into())
}

fn payments(seed: &Hash32) -> Result<String, String> {
    let mut rng = seed.rng();
    for _ in 0..1000 {
        let bid: u64 = rng.random_range(0..1_000_000);
        let sellers: BTreeMap<String, u64> = (0..rng.random_range(1..10))
            .map(|i| (format!("s{i}"), rng.random_range(0..20)))
            .collect();
        let nodes: BTreeMap<String, u64> = (0..rng.random_range(1..10))
            .map(|i| (format!("c{i}"), rng.random_range(1..20)))
            .collect();
        if sellers.values().all(|&v| v == 0) {
            continue;
        }
        let r = distribute_revenue(bid, &sellers, &nodes).map_err(|e| e.to_string())?;
        if r.total_transferred() != bid || r.cone_share != bid * 3 / 10 {
            return Err(format!("bid {bid}: {r:?}"));
        }
    }
    Ok("1000 settlements".into())
}

fn game_theory(seed: &Hash32) -> Result<String, String> {
    let mut rng = seed.rng();
    for _ in 0..1000 {
        let p = PayoffParams {
            seller_pool: rng.random_range(0.0..1000.0),
            cone_pool: rng.random_range(0.0..1000.0),
            node_count: rng.random_range(1..100),
            bribe: rng.random_range(0.0..50.0),
            quality_honest: rng.random_range(0.0..1.0),
            quality_claimed: rng.random_range(0.0..1.0),
            success_prob: rng.random_range(0.001..0.5),
            catch_model: Default::default(),
        };
        let r = rng.random_range(1..10);
        let (l1, _) = lemma1_check(&p);
        let direct = seller_payoff(&p, true) - seller_payoff(&p, false);
        if direct.abs() > 1e-9 && l1 != (direct > 0.0) {
            return Err(format!("lemma 1 disagrees for {p:?}"));
        }
        let (t1, window) = theorem1_check(&p, r);
        if t1 == window.is_empty() {
            return Err(format!("theorem 1 window mismatch for {p:?}"));
        }
    }
    Ok("1000 parameter sets".into())
}

fn pipeline() -> Result<String, String> {
    let s = Scenario {
        sellers: 5,
        cone_nodes: 10,
        rows: 500,
        t_max: 3,
        bids: vec![100, 150],
        ..Scenario::default()
    };
    let (out, ledger) = run_auction_to_completion(&s).map_err(|e| e.to_string())?;
    let rev = out.revenue().ok_or("no revenue distributed")?;
    if (rev.bid_amount, rev.cone_share, rev.seller_share) != (150, 45, 105) {
        return Err(format!("unexpected split {rev:?}"));
    }
    if !out.conserved {
        return Err("token supply not conserved".into());
    }
    let replay = Ledger::replay(ledger.config().clone(), &ledger.export_tx_log())
        .map_err(|e| e.to_string())?;
    if replay.snapshot_json() != ledger.snapshot_json() {
        return Err("replayed ledger differs".into());
    }
    Ok(format!("{} transactions replayed", ledger.tx_log().len()))
}

pub fn run_verify_suite(seed: u64) -> Vec<CheckResult> {
    let h = |tag: &str| Hash32::of(format!("d2m/verify/{tag}/{seed}").as_bytes());
    vec![
        check("execution-set-sizes", execution_sizes),
        check("threshold-round-trip", || theta_beta(&h("theta"))),
        check("omd-feasibility", || omd_feasible(&h("omd"))),
        check("corrected-krum", || krum_robust(&h("krum"))),
        check("payment-exactness", || payments(&h("pay"))),
        check("game-theory", || game_theory(&h("game"))),
        check("auction-pipeline", pipeline),
    ]
}
