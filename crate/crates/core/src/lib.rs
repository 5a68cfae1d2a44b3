//! Deterministic simulator for a decentralized data marketplace.
//!
//! A buyer's bid is auctioned on a simulated ledger, the winning request is
//! trained off-chain by committees of compute nodes that agree on result
//! digests through growing execution sets, sellers are sampled and
//! aggregated robustly, and the escrowed payment is split between compute
//! nodes and sellers. The [`economics`] module checks the incentive
//! conditions that make honest play dominant.

pub mod adversary;
pub mod consensus;
pub mod economics;
pub mod fedcore;
pub mod harness;
pub mod hash;
pub mod ledger;
pub mod training;

pub use hash::Hash32;
