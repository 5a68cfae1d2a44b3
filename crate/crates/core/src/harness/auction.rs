use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::run::{prepare, run_d2m_core, Chain, CoreOutput};
use super::scenario::Scenario;
use super::HarnessError;
use crate::consensus::{CommitRecord, ExecutionSet};
use crate::economics::{analyze, PayoffParams, PayoffReport, RevenueReport};
use crate::hash::Hash32;
use crate::ledger::{
    tags, AccountId, CloseOutcome, DataRequest, Ledger, LedgerConfig, MiniRoundKey, SettleOutcome,
};

pub fn buyer_id(i: usize) -> AccountId {
    AccountId(format!("buyer-{i}"))
}

pub fn seller_id(i: usize) -> AccountId {
    AccountId(format!("seller-{i}"))
}

pub fn cone_id(i: usize) -> AccountId {
    AccountId(format!("cone-{i}"))
}

/// Posts every mini-round to the ledger: the execution set, one commit per
/// member, then one block.
struct LedgerChain<'a> {
    ledger: &'a mut Ledger,
    auction: u64,
}

impl Chain for LedgerChain<'_> {
    fn beacon(&mut self, _round: u64, _mini_round: u32) -> Hash32 {
        self.ledger.beacon()
    }

    fn on_mini_round(
        &mut self,
        set: &ExecutionSet<usize>,
        commits: &[CommitRecord<usize>],
    ) -> Result<(), HarnessError> {
        let key = MiniRoundKey {
            auction: self.auction,
            round: set.round,
            mini_round: set.mini_round,
        };
        let members = set.members.iter().map(|&m| cone_id(m)).collect();
        self.ledger.publish_execution_set(key, members)?;
        for c in commits {
            self.ledger.commit_digest(&cone_id(c.node), key, c.digest)?;
        }
        self.ledger.advance_block();
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub close: CloseOutcome,
    pub settlement: Option<SettleOutcome>,
    pub core: Option<CoreOutput>,
    pub payoff: Option<PayoffReport>,
    pub conserved: bool,
    pub final_height: u64,
}

impl AuctionOutcome {
    pub fn revenue(&self) -> Option<&RevenueReport> {
        match &self.settlement {
            Some(SettleOutcome::Distributed(r)) => Some(r),
            _ => None,
        }
    }
}

/// Registration, bidding, close, off-chain training, settlement and the
/// payoff analysis against the realised pools. Returns the final ledger too.
pub fn run_auction_to_completion(s: &Scenario) -> Result<(AuctionOutcome, Ledger), HarnessError> {
    let prepared = prepare(s)?;
    let mut ledger = Ledger::new(LedgerConfig {
        auction_window: s.auction_window,
        commit_timeout: s.timeout_blocks,
        tx_fee: 0,
        seed: s.seed,
    });

    for (i, _) in s.bids.iter().enumerate() {
        let b = ledger.register_user(buyer_id(i).as_str(), true)?;
        ledger.mint(&b, s.buyer_balance)?;
    }
    let dataset_tags = tags(s.dataset_tags().iter().cloned());
    for (i, shard) in prepared.shards.iter().enumerate() {
        let id = ledger.register_user(seller_id(i).as_str(), false)?;
        ledger.register_dataset(&id, dataset_tags.clone(), shard.rows() as u64)?;
    }
    for i in 0..s.cone_nodes {
        ledger.register_cone_node(cone_id(i).as_str())?;
    }

    let request_tags = tags(s.request_tags.iter().cloned());
    for (i, &amount) in s.bids.iter().enumerate() {
        let request = DataRequest {
            tags: request_tags.clone(),
            amount,
            model_spec: prepared.model_spec.clone(),
            metric_id: s.metric().metric_id,
            // on-chain thresholds live in (0, 1]; τ = 0 still runs zero rounds
            threshold: s.threshold.max(f64::MIN_POSITIVE),
        };
        ledger.start_auction(request, &buyer_id(i))?;
    }
    let end = ledger
        .auction_by_tags(&request_tags)
        .expect("auction just opened")
        .auction_end;
    while ledger.height() < end {
        ledger.advance_block();
    }
    let close = ledger.close_auction(&request_tags)?;
    if close.refunded {
        let outcome = AuctionOutcome {
            close,
            settlement: None,
            core: None,
            payoff: None,
            conserved: ledger.is_conserved(),
            final_height: ledger.height(),
        };
        return Ok((outcome, ledger));
    }

    let core = run_d2m_core(
        s,
        &prepared,
        &mut LedgerChain {
            ledger: &mut ledger,
            auction: close.auction,
        },
    )?;
    let contribs: BTreeMap<AccountId, u64> = core
        .state
        .counts
        .0
        .iter()
        .enumerate()
        .map(|(i, &n)| (seller_id(i), n))
        .collect();
    let counts: BTreeMap<AccountId, u64> = core
        .participation
        .iter()
        .enumerate()
        .map(|(i, &n)| (cone_id(i), n))
        .collect();
    let settlement = ledger.on_compute_complete(close.auction, contribs, counts)?;

    let payoff = match &settlement {
        SettleOutcome::Distributed(r) => {
            let params = PayoffParams {
                seller_pool: r.seller_share as f64,
                cone_pool: r.cone_share as f64,
                node_count: s.cone_nodes,
                bribe: s.bribe,
                quality_honest: core.final_test_accuracy,
                quality_claimed: s.claimed_quality,
                success_prob: s.confidence_beta,
                catch_model: s.catch_model(),
            };
            Some(analyze(&params, core.max_mini_rounds().max(1)))
        }
        SettleOutcome::Refunded { .. } => None,
    };
    let outcome = AuctionOutcome {
        close,
        settlement: Some(settlement),
        core: Some(core),
        payoff,
        conserved: ledger.is_conserved(),
        final_height: ledger.height(),
    };
    Ok((outcome, ledger))
}
