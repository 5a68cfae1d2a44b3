//! Scenario-driven orchestration of the full marketplace loop.

mod auction;
mod grid;
mod montecarlo;
mod run;
mod scenario;
mod verify;

pub use auction::{buyer_id, cone_id, run_auction_to_completion, seller_id, AuctionOutcome};
pub use grid::{
    ablation_grid, parse_csv, records_csv, run_experiment_grid, run_parallel, CsvRow, GridEntry,
    GridReport, GridSpec, CSV_HEADER,
};
pub use montecarlo::{
    consensus_monte_carlo, consensus_trial, honest_digest, MonteCarloSummary, TrialOutcome,
};
pub use run::{
    prepare, run_d2m_core, run_scenario, Chain, CoreOutput, Prepared, RoundRecord, SimChain,
};
pub use scenario::{Ablation, AggregatorKind, DatasetKind, Scenario};
pub use verify::{run_verify_suite, CheckResult};

use crate::adversary::AdversaryError;
use crate::consensus::ConsensusError;
use crate::fedcore::FedError;
use crate::ledger::LedgerError;
use crate::training::TrainingError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("revealed state for round {round} does not match the accepted digest")]
    PreimageMismatch { round: u64 },
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
