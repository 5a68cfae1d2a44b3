//! Simulated chain hosting balances, escrow, the dataset registry and the
//! auction contract.
//!
//! Every mutation goes through [`Ledger::apply`]. A transaction either
//! succeeds completely (and is appended to the log) or fails without touching
//! state, so replaying the exported log reproduces the ledger bit for bit.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::consensus::CommitRecord;
use crate::economics::{self, EconomicsError, RevenueReport};
use crate::hash::{Hash32, SeedBuilder};
use crate::training::{MetricId, ModelSpec};

pub type TagSet = BTreeSet<String>;

pub fn tags<I, S>(items: I) -> TagSet
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    items.into_iter().map(Into::into).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccountId(pub String);

impl AccountId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AccountId {
    fn from(s: &str) -> Self {
        AccountId(s.to_string())
    }
}

impl From<String> for AccountId {
    fn from(s: String) -> Self {
        AccountId(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Buyer,
    Seller,
    ConeNode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub id: AccountId,
    pub balance: u64,
    pub role: Role,
}

/// A buyer's bid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRequest {
    pub tags: TagSet,
    pub amount: u64,
    pub model_spec: ModelSpec,
    pub metric_id: MetricId,
    pub threshold: f64,
}

impl DataRequest {
    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.amount == 0 {
            return Err(LedgerError::InvalidRequest(
                "amount must be positive".into(),
            ));
        }
        if self.tags.is_empty() {
            return Err(LedgerError::InvalidRequest("tags must be non-empty".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(LedgerError::InvalidRequest(format!(
                "threshold {} outside (0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionState {
    pub id: u64,
    pub tags: TagSet,
    pub created_at: u64,
    pub auction_end: u64,
    pub highest_bid: u64,
    pub highest_bidder: Option<AccountId>,
    pub highest_request: Option<DataRequest>,
    pub escrowed: u64,
}

/// A closed auction whose escrow waits for the off-chain computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settlement {
    pub auction: u64,
    pub winner: AccountId,
    pub request: DataRequest,
    pub escrowed: u64,
    pub sellers: BTreeSet<AccountId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: u64,
    pub seller: AccountId,
    pub tags: TagSet,
    pub size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MiniRoundKey {
    pub auction: u64,
    pub round: u64,
    pub mini_round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitWindow {
    pub key: MiniRoundKey,
    pub members: Vec<AccountId>,
    pub opened_at: u64,
    pub commits: Vec<CommitRecord<AccountId>>,
    pub closed: bool,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub randomness: Hash32,
    pub applied_txs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerConfig {
    /// Auction window `T` in blocks.
    pub auction_window: u64,
    /// Blocks after which a commit window closes with whatever arrived.
    pub commit_timeout: u64,
    /// Fee charged on every bid transaction.
    pub tx_fee: u64,
    pub seed: u64,
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig {
            auction_window: 10,
            commit_timeout: 10,
            tx_fee: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tx", rename_all = "kebab-case")]
pub enum Tx {
    Mint {
        account: AccountId,
        amount: u64,
    },
    RegisterUser {
        id: AccountId,
        is_buyer: bool,
    },
    RegisterConeNode {
        id: AccountId,
    },
    RegisterDataset {
        seller: AccountId,
        tags: TagSet,
        size: u64,
    },
    StartAuction {
        caller: AccountId,
        request: DataRequest,
    },
    PlaceBid {
        caller: AccountId,
        request: DataRequest,
    },
    CloseAuction {
        tags: TagSet,
    },
    PublishExecutionSet {
        key: MiniRoundKey,
        members: Vec<AccountId>,
    },
    CommitDigest {
        node: AccountId,
        key: MiniRoundKey,
        digest: Hash32,
    },
    ComputeComplete {
        auction: u64,
        seller_contribs: BTreeMap<AccountId, u64>,
        node_counts: BTreeMap<AccountId, u64>,
    },
    AdvanceBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxRecord {
    pub height: u64,
    #[serde(flatten)]
    pub tx: Tx,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BidOutcome {
    pub auction: u64,
    /// The call opened a new auction.
    pub opened: bool,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloseOutcome {
    pub auction: u64,
    pub winner: AccountId,
    pub request: DataRequest,
    pub escrowed: u64,
    pub sellers: BTreeSet<AccountId>,
    /// No seller matched and the escrow went back to the winner.
    pub refunded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SettleOutcome {
    Distributed(RevenueReport),
    /// Nothing to pay for; the winner got the escrow back.
    Refunded {
        winner: AccountId,
        amount: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Receipt {
    Minted,
    Registered(AccountId),
    DatasetRegistered(u64),
    Bid(BidOutcome),
    Closed(CloseOutcome),
    Published,
    Committed { window_closed: bool },
    Settled(SettleOutcome),
    Advanced(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    AuctionStarted {
        auction: u64,
        tags: TagSet,
        auction_end: u64,
    },
    BidAccepted {
        auction: u64,
        bidder: AccountId,
        amount: u64,
    },
    Refund {
        account: AccountId,
        amount: u64,
    },
    AuctionEnded {
        auction: u64,
    },
    AuctionClosed {
        auction: u64,
        winner: AccountId,
        amount: u64,
        sellers: usize,
    },
    ExecutionSetPublished {
        key: MiniRoundKey,
        members: Vec<AccountId>,
    },
    CommitWindowClosed {
        key: MiniRoundKey,
        commits: usize,
        timed_out: bool,
    },
    RevenueDistributed {
        auction: u64,
        report: RevenueReport,
    },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LedgerError {
    #[error("account {0} already registered")]
    DuplicateId(AccountId),
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("{0} is not a registered seller")]
    UnknownSeller(AccountId),
    #[error("{0} is not a buyer")]
    NotBuyer(AccountId),
    #[error("no active auction for tags {0:?}")]
    NoActiveAuction(TagSet),
    #[error("an auction for tags {0:?} is already active")]
    AuctionAlreadyActive(TagSet),
    #[error("no auction for tags {0:?}")]
    NoSuchAuction(TagSet),
    #[error("auction closes at height {end}, current height {height}")]
    AuctionStillOpen { end: u64, height: u64 },
    #[error("{account} has {available} tokens, needs {needed}")]
    InsufficientBalance {
        account: AccountId,
        available: u64,
        needed: u64,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("dataset tags must be non-empty")]
    EmptyTags,
    #[error("{0} is not a compute node")]
    NotConeNode(AccountId),
    #[error("no execution set published for {0:?}")]
    UnknownWindow(MiniRoundKey),
    #[error("execution set for {0:?} already published")]
    WindowExists(MiniRoundKey),
    #[error("commit window {0:?} is closed")]
    WindowClosed(MiniRoundKey),
    #[error("{node} is not in the execution set for {key:?}")]
    NotInExecutionSet { node: AccountId, key: MiniRoundKey },
    #[error("{node} already committed for {key:?}")]
    DoubleCommit { node: AccountId, key: MiniRoundKey },
    #[error("no pending settlement for auction {0}")]
    UnknownSettlement(u64),
    #[error("token supply overflow")]
    Overflow,
    #[error("replay diverged: {0}")]
    ReplayMismatch(String),
    #[error("malformed transaction log line {line}: {message}")]
    BadLog { line: usize, message: String },
}

/// Serializable view of the full ledger state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub config: LedgerConfig,
    pub height: u64,
    pub beacon: Hash32,
    pub total_supply: u64,
    pub fees_collected: u64,
    pub accounts: Vec<Account>,
    pub datasets: Vec<DatasetRecord>,
    pub auctions: Vec<AuctionState>,
    pub settlements: Vec<Settlement>,
    pub windows: Vec<CommitWindow>,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    config: LedgerConfig,
    height: u64,
    beacon: Hash32,
    accounts: BTreeMap<AccountId, Account>,
    datasets: BTreeMap<u64, DatasetRecord>,
    next_dataset: u64,
    auctions: BTreeMap<u64, AuctionState>,
    next_auction: u64,
    settlements: BTreeMap<u64, Settlement>,
    windows: BTreeMap<MiniRoundKey, CommitWindow>,
    total_supply: u64,
    fees_collected: u64,
    blocks: Vec<Block>,
    txs_in_block: usize,
    log: Vec<TxRecord>,
    events: Vec<Event>,
}

/// Beacon randomness of block `height`.
pub fn beacon(seed: u64, height: u64) -> Hash32 {
    SeedBuilder::new("d2m/beacon")
        .u64(seed)
        .u64(height)
        .finish()
}

impl Ledger {
    pub fn new(config: LedgerConfig) -> Self {
        let b = beacon(config.seed, 0);
        Ledger {
            config,
            height: 0,
            beacon: b,
            accounts: BTreeMap::new(),
            datasets: BTreeMap::new(),
            next_dataset: 1,
            auctions: BTreeMap::new(),
            next_auction: 1,
            settlements: BTreeMap::new(),
            windows: BTreeMap::new(),
            total_supply: 0,
            fees_collected: 0,
            blocks: Vec::new(),
            txs_in_block: 0,
            log: Vec::new(),
            events: Vec::new(),
        }
    }

    // ---- queries -------------------------------------------------------

    pub fn config(&self) -> &LedgerConfig {
        &self.config
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn beacon(&self) -> Hash32 {
        self.beacon
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn account(&self, id: &AccountId) -> Option<&Account> {
        self.accounts.get(id)
    }

    pub fn balance(&self, id: &AccountId) -> u64 {
        self.accounts.get(id).map_or(0, |a| a.balance)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &Account> {
        self.accounts.values()
    }

    pub fn dataset(&self, id: u64) -> Option<&DatasetRecord> {
        self.datasets.get(&id)
    }

    pub fn datasets(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.datasets.values()
    }

    pub fn datasets_of(&self, seller: &AccountId) -> Vec<&DatasetRecord> {
        self.datasets
            .values()
            .filter(|d| &d.seller == seller)
            .collect()
    }

    pub fn auction_by_tags(&self, tags: &TagSet) -> Option<&AuctionState> {
        self.auctions.values().find(|a| &a.tags == tags)
    }

    pub fn auctions(&self) -> impl Iterator<Item = &AuctionState> {
        self.auctions.values()
    }

    pub fn settlement(&self, auction: u64) -> Option<&Settlement> {
        self.settlements.get(&auction)
    }

    pub fn window(&self, key: &MiniRoundKey) -> Option<&CommitWindow> {
        self.windows.get(key)
    }

    pub fn total_supply(&self) -> u64 {
        self.total_supply
    }

    pub fn fees_collected(&self) -> u64 {
        self.fees_collected
    }

    pub fn escrowed_total(&self) -> u64 {
        self.auctions.values().map(|a| a.escrowed).sum::<u64>()
            + self.settlements.values().map(|s| s.escrowed).sum::<u64>()
    }

    /// Balances plus escrow plus fees equals minted supply.
    pub fn is_conserved(&self) -> bool {
        let balances: u128 = self.accounts.values().map(|a| a.balance as u128).sum();
        balances + self.escrowed_total() as u128 + self.fees_collected as u128
            == self.total_supply as u128
    }

    /// Sellers owning a dataset whose tags contain every query tag.
    pub fn identify_matching_datasets(&self, tags: &TagSet) -> BTreeSet<AccountId> {
        self.datasets
            .values()
            .filter(|d| tags.is_subset(&d.tags))
            .map(|d| d.seller.clone())
            .collect()
    }

    pub fn tx_log(&self) -> &[TxRecord] {
        &self.log
    }

    /// Newline-delimited JSON, one applied transaction per line.
    pub fn export_tx_log(&self) -> String {
        let mut out = String::new();
        for rec in &self.log {
            out.push_str(&serde_json::to_string(rec).expect("tx records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            config: self.config.clone(),
            height: self.height,
            beacon: self.beacon,
            total_supply: self.total_supply,
            fees_collected: self.fees_collected,
            accounts: self.accounts.values().cloned().collect(),
            datasets: self.datasets.values().cloned().collect(),
            auctions: self.auctions.values().cloned().collect(),
            settlements: self.settlements.values().cloned().collect(),
            windows: self.windows.values().cloned().collect(),
        }
    }

    pub fn snapshot_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("snapshot serializes")
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    /// Rebuilds a ledger by re-applying an exported transaction log.
    pub fn replay(config: LedgerConfig, ndjson: &str) -> Result<Ledger, LedgerError> {
        let mut ledger = Ledger::new(config);
        for (i, line) in ndjson.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TxRecord = serde_json::from_str(line).map_err(|e| LedgerError::BadLog {
                line: i + 1,
                message: e.to_string(),
            })?;
            if rec.height != ledger.height {
                return Err(LedgerError::ReplayMismatch(format!(
                    "line {} recorded at height {}, replay at {}",
                    i + 1,
                    rec.height,
                    ledger.height
                )));
            }
            ledger.apply(rec.tx)?;
        }
        Ok(ledger)
    }

    // ---- transaction application --------------------------------------

    /// Applies one transaction atomically.
    pub fn apply(&mut self, tx: Tx) -> Result<Receipt, LedgerError> {
        let height = self.height;
        let receipt = match &tx {
            Tx::Mint { account, amount } => self.do_mint(account, *amount)?,
            Tx::RegisterUser { id, is_buyer } => {
                let role = if *is_buyer { Role::Buyer } else { Role::Seller };
                self.do_register(id, role)?
            }
            Tx::RegisterConeNode { id } => self.do_register(id, Role::ConeNode)?,
            Tx::RegisterDataset { seller, tags, size } => {
                self.do_register_dataset(seller, tags, *size)?
            }
            Tx::StartAuction { caller, request } => self.do_start_auction(caller, request)?,
            Tx::PlaceBid { caller, request } => self.do_place_bid(caller, request)?,
            Tx::CloseAuction { tags } => self.do_close_auction(tags)?,
            Tx::PublishExecutionSet { key, members } => self.do_publish(*key, members)?,
            Tx::CommitDigest { node, key, digest } => self.do_commit(node, *key, *digest)?,
            Tx::ComputeComplete {
                auction,
                seller_contribs,
                node_counts,
            } => self.do_compute_complete(*auction, seller_contribs, node_counts)?,
            Tx::AdvanceBlock => Receipt::Advanced(self.do_advance()),
        };
        self.log.push(TxRecord { height, tx });
        if !matches!(receipt, Receipt::Advanced(_)) {
            self.txs_in_block += 1;
        }
        Ok(receipt)
    }

    pub fn mint(&mut self, account: &AccountId, amount: u64) -> Result<(), LedgerError> {
        self.apply(Tx::Mint {
            account: account.clone(),
            amount,
        })
        .map(|_| ())
    }

    pub fn register_user(&mut self, id: &str, is_buyer: bool) -> Result<AccountId, LedgerError> {
        match self.apply(Tx::RegisterUser {
            id: id.into(),
            is_buyer,
        })? {
            Receipt::Registered(id) => Ok(id),
            r => unreachable!("unexpected receipt {r:?}"),
        }
    }

    pub fn register_cone_node(&mut self, id: &str) -> Result<AccountId, LedgerError> {
        match self.apply(Tx::RegisterConeNode { id: id.into() })? {
            Receipt::Registered(id) => Ok(id),
            r => unreachable!("unexpected receipt {r:?}"),
        }
    }

    pub fn register_dataset(
        &mut self,
        seller: &AccountId,
        tags: TagSet,
        size: u64,
    ) -> Result<u64, LedgerError> {
        match self.apply(Tx::RegisterDataset {
            seller: seller.clone(),
            tags,
            size,
        })? {
            Receipt::DatasetRegistered(id) => Ok(id),
            r => unreachable!("unexpected receipt {r:?}"),
        }
    }

    pub fn start_auction(
        &mut self,
        request: DataRequest,
        caller: &AccountId,
    ) -> Result<BidOutcome, LedgerError> {
        match self.apply(Tx::StartAuction {
            caller: caller.clone(),
            request,
        })? {
            Receipt::Bid(b) => Ok(b),
            r => unreachable!("unexpected receipt {r:?}"),
        }
    }

    pub fn place_bid(
        &mut self,
        request: DataRequest,
        caller: &AccountId,
    ) -> Result<BidOutcome, LedgerError> {
        match self.apply(Tx::PlaceBid {
            caller: caller.clone(),
            request,
        })? {
            Receipt::Bid(b) => Ok(b),
            r => unreachable!("unexpected receipt {r:?}"),
        }
    }

    pub fn close_auction(&mut self, tags: &TagSet) -> Result<CloseOutcome, LedgerError> {
        match self.apply(Tx::CloseAuction { tags: tags.clone() })? {
            Receipt::Closed(c) => Ok(c),
            r => unreachable!("unexpected receipt {r:?}"),
        }
    }

    pub fn publish_execution_set(
        &mut self,
        key: MiniRoundKey,
        members: Vec<AccountId>,
    ) -> Result<(), LedgerError> {
        self.apply(Tx::PublishExecutionSet { key, members })
            .map(|_| ())
    }

    /// Returns whether this commit closed the window.
    pub fn commit_digest(
        &mut self,
        node: &AccountId,
        key: MiniRoundKey,
        digest: Hash32,
    ) -> Result<bool, LedgerError> {
        match self.apply(Tx::CommitDigest {
            node: node.clone(),
            key,
            digest,
        })? {
            Receipt::Committed { window_closed } => Ok(window_closed),
            r => unreachable!("unexpected receipt {r:?}"),
        }
    }

    pub fn on_compute_complete(
        &mut self,
        auction: u64,
        seller_contribs: BTreeMap<AccountId, u64>,
        node_counts: BTreeMap<AccountId, u64>,
    ) -> Result<SettleOutcome, LedgerError> {
        match self.apply(Tx::ComputeComplete {
            auction,
            seller_contribs,
            node_counts,
        })? {
            Receipt::Settled(s) => Ok(s),
            r => unreachable!("unexpected receipt {r:?}"),
        }
    }

    pub fn advance_block(&mut self) -> u64 {
        match self.apply(Tx::AdvanceBlock) {
            Ok(Receipt::Advanced(h)) => h,
            other => unreachable!("advance_block cannot fail: {other:?}"),
        }
    }

    // ---- handlers: validate first, then mutate ---------------------------

    fn credit(&mut self, id: &AccountId, amount: u64) {
        let acct = self.accounts.get_mut(id).expect("credited account exists");
        acct.balance += amount;
    }

    fn debit(&mut self, id: &AccountId, amount: u64) {
        let acct = self.accounts.get_mut(id).expect("debited account exists");
        acct.balance -= amount;
    }

    fn do_mint(&mut self, account: &AccountId, amount: u64) -> Result<Receipt, LedgerError> {
        if !self.accounts.contains_key(account) {
            return Err(LedgerError::UnknownAccount(account.clone()));
        }
        self.total_supply = self
            .total_supply
            .checked_add(amount)
            .ok_or(LedgerError::Overflow)?;
        self.credit(account, amount);
        Ok(Receipt::Minted)
    }

    fn do_register(&mut self, id: &AccountId, role: Role) -> Result<Receipt, LedgerError> {
        if self.accounts.contains_key(id) {
            return Err(LedgerError::DuplicateId(id.clone()));
        }
        self.accounts.insert(
            id.clone(),
            Account {
                id: id.clone(),
                balance: 0,
                role,
            },
        );
        Ok(Receipt::Registered(id.clone()))
    }

    fn do_register_dataset(
        &mut self,
        seller: &AccountId,
        tags: &TagSet,
        size: u64,
    ) -> Result<Receipt, LedgerError> {
        match self.accounts.get(seller) {
            Some(a) if a.role == Role::Seller => {}
            _ => return Err(LedgerError::UnknownSeller(seller.clone())),
        }
        if tags.is_empty() {
            return Err(LedgerError::EmptyTags);
        }
        let id = self.next_dataset;
        self.next_dataset += 1;
        self.datasets.insert(
            id,
            DatasetRecord {
                id,
                seller: seller.clone(),
                tags: tags.clone(),
                size,
            },
        );
        Ok(Receipt::DatasetRegistered(id))
    }

    fn require_buyer(&self, caller: &AccountId) -> Result<&Account, LedgerError> {
        let acct = self
            .accounts
            .get(caller)
            .ok_or_else(|| LedgerError::UnknownAccount(caller.clone()))?;
        if acct.role != Role::Buyer {
            return Err(LedgerError::NotBuyer(caller.clone()));
        }
        Ok(acct)
    }

    /// Checks funds against an auction's current best bid; returns whether
    /// the bid would be accepted.
    fn check_bid(
        &self,
        caller: &AccountId,
        request: &DataRequest,
        highest_bid: u64,
        highest_bidder: Option<&AccountId>,
    ) -> Result<bool, LedgerError> {
        let balance = self.require_buyer(caller)?.balance;
        let fee = self.config.tx_fee;
        let accepted = request.amount > highest_bid;
        let (available, needed) = if accepted {
            let own_escrow = if highest_bidder == Some(caller) {
                highest_bid
            } else {
                0
            };
            (balance + own_escrow, request.amount.saturating_add(fee))
        } else {
            (balance, fee)
        };
        if available < needed {
            return Err(LedgerError::InsufficientBalance {
                account: caller.clone(),
                available,
                needed,
            });
        }
        Ok(accepted)
    }

    fn charge_fee(&mut self, caller: &AccountId) {
        let fee = self.config.tx_fee;
        if fee > 0 {
            self.debit(caller, fee);
            self.fees_collected += fee;
        }
    }

    fn execute_bid(&mut self, auction_id: u64, caller: &AccountId, request: &DataRequest) {
        let (prev_bidder, prev_amount) = {
            let a = &self.auctions[&auction_id];
            (a.highest_bidder.clone(), a.escrowed)
        };
        if let Some(prev) = prev_bidder {
            self.credit(&prev, prev_amount);
            self.events.push(Event::Refund {
                account: prev,
                amount: prev_amount,
            });
        }
        self.debit(caller, request.amount);
        let a = self.auctions.get_mut(&auction_id).unwrap();
        a.highest_bid = request.amount;
        a.highest_bidder = Some(caller.clone());
        a.highest_request = Some(request.clone());
        a.escrowed = request.amount;
        self.events.push(Event::BidAccepted {
            auction: auction_id,
            bidder: caller.clone(),
            amount: request.amount,
        });
    }

    fn do_start_auction(
        &mut self,
        caller: &AccountId,
        request: &DataRequest,
    ) -> Result<Receipt, LedgerError> {
        self.require_buyer(caller)?;
        request.validate()?;
        if self.auction_by_tags(&request.tags).is_some() {
            // an auction already exists for these tags: this is a plain bid
            return self.do_place_bid(caller, request);
        }
        let accepted = self.check_bid(caller, request, 0, None)?;
        let id = self.next_auction;
        self.next_auction += 1;
        let auction_end = self.height + self.config.auction_window.max(1);
        self.auctions.insert(
            id,
            AuctionState {
                id,
                tags: request.tags.clone(),
                created_at: self.height,
                auction_end,
                highest_bid: 0,
                highest_bidder: None,
                highest_request: None,
                escrowed: 0,
            },
        );
        self.events.push(Event::AuctionStarted {
            auction: id,
            tags: request.tags.clone(),
            auction_end,
        });
        self.charge_fee(caller);
        if accepted {
            self.execute_bid(id, caller, request);
        }
        Ok(Receipt::Bid(BidOutcome {
            auction: id,
            opened: true,
            accepted,
        }))
    }

    fn do_place_bid(
        &mut self,
        caller: &AccountId,
        request: &DataRequest,
    ) -> Result<Receipt, LedgerError> {
        self.require_buyer(caller)?;
        request.validate()?;
        let (id, highest, bidder) = match self.auction_by_tags(&request.tags) {
            Some(a) if self.height < a.auction_end => {
                (a.id, a.highest_bid, a.highest_bidder.clone())
            }
            _ => return Err(LedgerError::NoActiveAuction(request.tags.clone())),
        };
        let accepted = self.check_bid(caller, request, highest, bidder.as_ref())?;
        self.charge_fee(caller);
        if accepted {
            self.execute_bid(id, caller, request);
        }
        Ok(Receipt::Bid(BidOutcome {
            auction: id,
            opened: false,
            accepted,
        }))
    }

    fn do_close_auction(&mut self, tags: &TagSet) -> Result<Receipt, LedgerError> {
        let a = self
            .auction_by_tags(tags)
            .ok_or_else(|| LedgerError::NoSuchAuction(tags.clone()))?;
        if self.height < a.auction_end {
            return Err(LedgerError::AuctionStillOpen {
                end: a.auction_end,
                height: self.height,
            });
        }
        let id = a.id;
        let a = self.auctions.remove(&id).unwrap();
        let winner = a.highest_bidder.expect("every auction opens with a bid");
        let request = a.highest_request.expect("winner has a request");
        let sellers = self.identify_matching_datasets(tags);
        let refunded = sellers.is_empty();
        if refunded {
            self.credit(&winner, a.escrowed);
            self.events.push(Event::Refund {
                account: winner.clone(),
                amount: a.escrowed,
            });
        } else {
            self.settlements.insert(
                id,
                Settlement {
                    auction: id,
                    winner: winner.clone(),
                    request: request.clone(),
                    escrowed: a.escrowed,
                    sellers: sellers.clone(),
                },
            );
        }
        self.events.push(Event::AuctionClosed {
            auction: id,
            winner: winner.clone(),
            amount: a.escrowed,
            sellers: sellers.len(),
        });
        Ok(Receipt::Closed(CloseOutcome {
            auction: id,
            winner,
            request,
            escrowed: a.escrowed,
            sellers,
            refunded,
        }))
    }

    fn do_publish(
        &mut self,
        key: MiniRoundKey,
        members: &[AccountId],
    ) -> Result<Receipt, LedgerError> {
        if self.windows.contains_key(&key) {
            return Err(LedgerError::WindowExists(key));
        }
        for m in members {
            match self.accounts.get(m) {
                Some(a) if a.role == Role::ConeNode => {}
                _ => return Err(LedgerError::NotConeNode(m.clone())),
            }
        }
        self.windows.insert(
            key,
            CommitWindow {
                key,
                members: members.to_vec(),
                opened_at: self.height,
                commits: Vec::new(),
                closed: false,
                timed_out: false,
            },
        );
        self.events.push(Event::ExecutionSetPublished {
            key,
            members: members.to_vec(),
        });
        Ok(Receipt::Published)
    }

    fn do_commit(
        &mut self,
        node: &AccountId,
        key: MiniRoundKey,
        digest: Hash32,
    ) -> Result<Receipt, LedgerError> {
        let w = self
            .windows
            .get(&key)
            .ok_or(LedgerError::UnknownWindow(key))?;
        if w.closed {
            return Err(LedgerError::WindowClosed(key));
        }
        if !w.members.contains(node) {
            return Err(LedgerError::NotInExecutionSet {
                node: node.clone(),
                key,
            });
        }
        if w.commits.iter().any(|c| &c.node == node) {
            return Err(LedgerError::DoubleCommit {
                node: node.clone(),
                key,
            });
        }
        let w = self.windows.get_mut(&key).unwrap();
        w.commits.push(CommitRecord {
            mini_round: key.mini_round,
            digest,
            node: node.clone(),
        });
        let done = w.commits.len() == w.members.len();
        if done {
            w.closed = true;
            let commits = w.commits.len();
            self.events.push(Event::CommitWindowClosed {
                key,
                commits,
                timed_out: false,
            });
        }
        Ok(Receipt::Committed {
            window_closed: done,
        })
    }

    fn do_compute_complete(
        &mut self,
        auction: u64,
        seller_contribs: &BTreeMap<AccountId, u64>,
        node_counts: &BTreeMap<AccountId, u64>,
    ) -> Result<Receipt, LedgerError> {
        let s = self
            .settlements
            .get(&auction)
            .ok_or(LedgerError::UnknownSettlement(auction))?;
        for id in seller_contribs.keys().chain(node_counts.keys()) {
            if !self.accounts.contains_key(id) {
                return Err(LedgerError::UnknownAccount(id.clone()));
            }
        }
        let to_strings = |m: &BTreeMap<AccountId, u64>| -> BTreeMap<String, u64> {
            m.iter().map(|(k, v)| (k.0.clone(), *v)).collect()
        };
        let outcome = match economics::distribute_revenue(
            s.escrowed,
            &to_strings(seller_contribs),
            &to_strings(node_counts),
        ) {
            Ok(report) => SettleOutcome::Distributed(report),
            Err(EconomicsError::EmptyContributors(_)) => SettleOutcome::Refunded {
                winner: s.winner.clone(),
                amount: s.escrowed,
            },
        };
        self.settlements.remove(&auction);
        match &outcome {
            SettleOutcome::Distributed(report) => {
                for (id, amt) in report.node_transfers.iter().chain(&report.seller_transfers) {
                    self.credit(&AccountId(id.clone()), *amt);
                }
                self.events.push(Event::RevenueDistributed {
                    auction,
                    report: report.clone(),
                });
            }
            SettleOutcome::Refunded { winner, amount } => {
                self.credit(winner, *amount);
                self.events.push(Event::Refund {
                    account: winner.clone(),
                    amount: *amount,
                });
            }
        }
        Ok(Receipt::Settled(outcome))
    }

    fn do_advance(&mut self) -> u64 {
        self.blocks.push(Block {
            height: self.height,
            randomness: self.beacon,
            applied_txs: self.txs_in_block,
        });
        self.txs_in_block = 0;
        self.height += 1;
        self.beacon = beacon(self.config.seed, self.height);
        let h = self.height;
        for a in self.auctions.values() {
            if a.auction_end == h {
                self.events.push(Event::AuctionEnded { auction: a.id });
            }
        }
        let timeout = self.config.commit_timeout;
        for w in self.windows.values_mut() {
            if !w.closed && h >= w.opened_at + timeout {
                w.closed = true;
                w.timed_out = true;
                self.events.push(Event::CommitWindowClosed {
                    key: w.key,
                    commits: w.commits.len(),
                    timed_out: true,
                });
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::ModelSpec;

    fn request(tag_list: &[&str], amount: u64) -> DataRequest {
        DataRequest {
            tags: tags(tag_list.iter().copied()),
            amount,
            model_spec: ModelSpec::logistic(2, 2),
            metric_id: MetricId::Accuracy,
            threshold: 0.9,
        }
    }

    fn funded_buyer(l: &mut Ledger, id: &str, amount: u64) -> AccountId {
        let b = l.register_user(id, true).unwrap();
        l.mint(&b, amount).unwrap();
        b
    }

    #[test]
    fn registration() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b = l.register_user("b1", true).unwrap();
        let acct = l.account(&b).unwrap();
        assert_eq!((acct.balance, acct.role), (0, Role::Buyer));
        l.register_user("s1", false).unwrap();
        assert_eq!(
            l.register_user("s1", false),
            Err(LedgerError::DuplicateId("s1".into()))
        );
        for i in 0..200 {
            l.register_user(&format!("seller-{i}"), false).unwrap();
        }
        assert_eq!(l.accounts().filter(|a| a.role == Role::Seller).count(), 201);
    }

    #[test]
    fn dataset_registry() {
        let mut l = Ledger::new(LedgerConfig::default());
        let s = l.register_user("s1", false).unwrap();
        let d1 = l
            .register_dataset(&s, tags(["mnist", "digits"]), 600)
            .unwrap();
        let d2 = l.register_dataset(&s, tags(["fashion"]), 100).unwrap();
        assert_eq!(l.dataset(d1).unwrap().size, 600);
        assert_eq!(l.datasets_of(&s).len(), 2);
        assert_ne!(d1, d2);
        assert_eq!(
            l.register_dataset(&"ghost".into(), tags(["x"]), 1),
            Err(LedgerError::UnknownSeller("ghost".into()))
        );
        let b = l.register_user("b", true).unwrap();
        assert!(matches!(
            l.register_dataset(&b, tags(["x"]), 1),
            Err(LedgerError::UnknownSeller(_))
        ));
        assert_eq!(
            l.register_dataset(&s, tags::<[&str; 0], _>([]), 1),
            Err(LedgerError::EmptyTags)
        );
    }

    #[test]
    fn start_auction_opens_and_bids() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b1 = funded_buyer(&mut l, "b1", 1000);
        let out = l.start_auction(request(&["x"], 100), &b1).unwrap();
        assert!(out.opened && out.accepted);
        let a = l.auction_by_tags(&tags(["x"])).unwrap();
        assert_eq!(a.highest_bid, 100);
        assert_eq!(a.highest_bidder, Some(b1.clone()));
        assert_eq!(a.auction_end, 10);
        assert_eq!(l.balance(&b1), 900);
        assert!(l.is_conserved());

        let s = l.register_user("s", false).unwrap();
        assert_eq!(
            l.start_auction(request(&["y"], 5), &s),
            Err(LedgerError::NotBuyer(s))
        );
    }

    #[test]
    fn second_start_routes_to_bid() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b1 = funded_buyer(&mut l, "b1", 1000);
        let b2 = funded_buyer(&mut l, "b2", 1000);
        let first = l.start_auction(request(&["x"], 100), &b1).unwrap();
        let second = l.start_auction(request(&["x"], 150), &b2).unwrap();
        assert!(!second.opened && second.accepted);
        assert_eq!(second.auction, first.auction);
        assert_eq!(l.auctions().count(), 1);
    }

    #[test]
    fn outbid_refunds_and_ties_rejected() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b1 = funded_buyer(&mut l, "b1", 1000);
        let b2 = funded_buyer(&mut l, "b2", 1000);
        l.start_auction(request(&["x"], 100), &b1).unwrap();
        let tie = l.place_bid(request(&["x"], 100), &b2).unwrap();
        assert!(!tie.accepted);
        assert_eq!(l.balance(&b2), 1000);
        let up = l.place_bid(request(&["x"], 150), &b2).unwrap();
        assert!(up.accepted);
        assert_eq!(l.balance(&b1), 1000);
        assert_eq!(l.balance(&b2), 850);
        let a = l.auction_by_tags(&tags(["x"])).unwrap();
        assert_eq!(a.escrowed, a.highest_bid);
        assert!(l.is_conserved());
    }

    #[test]
    fn raising_own_bid_uses_own_escrow() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b1 = funded_buyer(&mut l, "b1", 150);
        l.start_auction(request(&["x"], 100), &b1).unwrap();
        assert!(l.place_bid(request(&["x"], 150), &b1).unwrap().accepted);
        assert_eq!(l.balance(&b1), 0);
        assert!(l.is_conserved());
    }

    #[test]
    fn insufficient_balance_is_atomic() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b1 = funded_buyer(&mut l, "b1", 50);
        let before = l.snapshot();
        assert!(matches!(
            l.start_auction(request(&["x"], 100), &b1),
            Err(LedgerError::InsufficientBalance { .. })
        ));
        assert_eq!(l.snapshot(), before);
        assert_eq!(l.tx_log().len(), 2);
    }

    #[test]
    fn bid_after_end_rejected() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b1 = funded_buyer(&mut l, "b1", 1000);
        l.start_auction(request(&["x"], 100), &b1).unwrap();
        for _ in 0..10 {
            l.advance_block();
        }
        assert!(l
            .take_events()
            .iter()
            .any(|e| matches!(e, Event::AuctionEnded { .. })));
        assert_eq!(
            l.place_bid(request(&["x"], 200), &b1),
            Err(LedgerError::NoActiveAuction(tags(["x"])))
        );
        assert!(matches!(
            l.place_bid(request(&["zzz"], 200), &b1),
            Err(LedgerError::NoActiveAuction(_))
        ));
    }

    #[test]
    fn close_auction_flow() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b1 = funded_buyer(&mut l, "b1", 1000);
        let b2 = funded_buyer(&mut l, "b2", 1000);
        let s = l.register_user("s1", false).unwrap();
        l.register_dataset(&s, tags(["x", "y"]), 10).unwrap();
        l.start_auction(request(&["x"], 100), &b1).unwrap();
        l.place_bid(request(&["x"], 150), &b2).unwrap();
        assert_eq!(
            l.close_auction(&tags(["x"])),
            Err(LedgerError::AuctionStillOpen { end: 10, height: 0 })
        );
        assert!(matches!(
            l.close_auction(&tags(["q"])),
            Err(LedgerError::NoSuchAuction(_))
        ));
        for _ in 0..10 {
            l.advance_block();
        }
        let c = l.close_auction(&tags(["x"])).unwrap();
        assert_eq!(c.winner, b2);
        assert_eq!(c.request.amount, 150);
        assert_eq!(c.sellers, [s].into_iter().collect());
        assert!(!c.refunded);
        assert!(l.auction_by_tags(&tags(["x"])).is_none());
        assert_eq!(l.settlement(c.auction).unwrap().escrowed, 150);
        assert!(l.is_conserved());
    }

    #[test]
    fn close_without_sellers_refunds() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b1 = funded_buyer(&mut l, "b1", 1000);
        l.start_auction(request(&["x"], 100), &b1).unwrap();
        for _ in 0..10 {
            l.advance_block();
        }
        let c = l.close_auction(&tags(["x"])).unwrap();
        assert!(c.refunded && c.sellers.is_empty());
        assert_eq!(l.balance(&b1), 1000);
        assert_eq!(l.escrowed_total(), 0);
        assert!(l.is_conserved());
    }

    #[test]
    fn matching_examples() {
        let mut l = Ledger::new(LedgerConfig::default());
        let s1 = l.register_user("s1", false).unwrap();
        let s2 = l.register_user("s2", false).unwrap();
        l.register_dataset(&s1, tags(["a", "b"]), 1).unwrap();
        l.register_dataset(&s2, tags(["b"]), 1).unwrap();
        assert_eq!(
            l.identify_matching_datasets(&tags(["a"])),
            [s1.clone()].into()
        );
        assert_eq!(
            l.identify_matching_datasets(&TagSet::new()),
            [s1.clone(), s2].into()
        );
        assert!(l.identify_matching_datasets(&tags(["a", "c"])).is_empty());
    }

    fn committee(l: &mut Ledger, n: usize) -> Vec<AccountId> {
        (0..n)
            .map(|i| l.register_cone_node(&format!("c{i}")).unwrap())
            .collect()
    }

    const KEY: MiniRoundKey = MiniRoundKey {
        auction: 1,
        round: 0,
        mini_round: 1,
    };

    #[test]
    fn commit_window_completes_on_last_member() {
        let mut l = Ledger::new(LedgerConfig::default());
        let nodes = committee(&mut l, 5);
        l.publish_execution_set(KEY, nodes[..4].to_vec()).unwrap();
        l.take_events();
        for (i, n) in nodes[..4].iter().enumerate() {
            let closed = l.commit_digest(n, KEY, Hash32::of(b"d")).unwrap();
            assert_eq!(closed, i == 3);
        }
        let events = l.take_events();
        assert_eq!(
            events,
            vec![Event::CommitWindowClosed {
                key: KEY,
                commits: 4,
                timed_out: false
            }]
        );
        assert_eq!(
            l.commit_digest(&nodes[0], KEY, Hash32::ZERO),
            Err(LedgerError::WindowClosed(KEY))
        );
    }

    #[test]
    fn commit_window_times_out() {
        let mut l = Ledger::new(LedgerConfig::default());
        let nodes = committee(&mut l, 4);
        l.publish_execution_set(KEY, nodes.clone()).unwrap();
        for n in &nodes[..3] {
            l.commit_digest(n, KEY, Hash32::of(b"d")).unwrap();
        }
        l.take_events();
        for _ in 0..9 {
            l.advance_block();
        }
        assert!(l.take_events().is_empty());
        l.advance_block();
        assert_eq!(
            l.take_events(),
            vec![Event::CommitWindowClosed {
                key: KEY,
                commits: 3,
                timed_out: true
            }]
        );
        assert!(l.window(&KEY).unwrap().timed_out);
    }

    #[test]
    fn commit_errors() {
        let mut l = Ledger::new(LedgerConfig::default());
        let nodes = committee(&mut l, 3);
        assert_eq!(
            l.commit_digest(&nodes[0], KEY, Hash32::ZERO),
            Err(LedgerError::UnknownWindow(KEY))
        );
        l.publish_execution_set(KEY, nodes[..2].to_vec()).unwrap();
        assert!(matches!(
            l.commit_digest(&nodes[2], KEY, Hash32::ZERO),
            Err(LedgerError::NotInExecutionSet { .. })
        ));
        l.commit_digest(&nodes[0], KEY, Hash32::ZERO).unwrap();
        assert!(matches!(
            l.commit_digest(&nodes[0], KEY, Hash32::ZERO),
            Err(LedgerError::DoubleCommit { .. })
        ));
        assert_eq!(
            l.publish_execution_set(KEY, nodes.clone()),
            Err(LedgerError::WindowExists(KEY))
        );
        let b = l.register_user("b", true).unwrap();
        let other = MiniRoundKey {
            mini_round: 2,
            ..KEY
        };
        assert_eq!(
            l.publish_execution_set(other, vec![b.clone()]),
            Err(LedgerError::NotConeNode(b))
        );
    }

    #[test]
    fn advance_and_beacon() {
        let mut a = Ledger::new(LedgerConfig {
            seed: 7,
            ..LedgerConfig::default()
        });
        for _ in 0..5 {
            a.advance_block();
        }
        assert_eq!(a.height(), 5);
        assert_eq!(a.advance_block(), 6);
        assert_eq!(a.beacon(), beacon(7, 6));
        assert_ne!(beacon(7, 6), beacon(8, 6));
        assert_eq!(a.blocks().len(), 6);
    }

    #[test]
    fn compute_complete_distributes() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b = funded_buyer(&mut l, "b", 1000);
        let s1 = l.register_user("s1", false).unwrap();
        let s2 = l.register_user("s2", false).unwrap();
        l.register_dataset(&s1, tags(["x"]), 1).unwrap();
        l.register_dataset(&s2, tags(["x"]), 1).unwrap();
        let nodes = committee(&mut l, 3);
        l.start_auction(request(&["x"], 1000), &b).unwrap();
        for _ in 0..10 {
            l.advance_block();
        }
        let c = l.close_auction(&tags(["x"])).unwrap();
        let contribs: BTreeMap<_, _> = [(s1.clone(), 7), (s2.clone(), 3)].into();
        let counts: BTreeMap<_, _> = [
            (nodes[0].clone(), 2),
            (nodes[1].clone(), 1),
            (nodes[2].clone(), 1),
        ]
        .into();
        let out = l.on_compute_complete(c.auction, contribs, counts).unwrap();
        assert!(matches!(out, SettleOutcome::Distributed(_)));
        assert_eq!(l.balance(&s1), 490);
        assert_eq!(l.balance(&s2), 210);
        assert_eq!(l.balance(&nodes[0]), 150);
        assert_eq!(l.escrowed_total(), 0);
        assert!(l.is_conserved());
        assert_eq!(
            l.on_compute_complete(c.auction, BTreeMap::new(), BTreeMap::new()),
            Err(LedgerError::UnknownSettlement(c.auction))
        );
    }

    #[test]
    fn compute_complete_without_contributions_refunds() {
        let mut l = Ledger::new(LedgerConfig::default());
        let b = funded_buyer(&mut l, "b", 500);
        let s1 = l.register_user("s1", false).unwrap();
        l.register_dataset(&s1, tags(["x"]), 1).unwrap();
        l.start_auction(request(&["x"], 200), &b).unwrap();
        for _ in 0..10 {
            l.advance_block();
        }
        let c = l.close_auction(&tags(["x"])).unwrap();
        let out = l
            .on_compute_complete(c.auction, [(s1, 0)].into(), BTreeMap::new())
            .unwrap();
        assert_eq!(
            out,
            SettleOutcome::Refunded {
                winner: b.clone(),
                amount: 200
            }
        );
        assert_eq!(l.balance(&b), 500);
    }

    #[test]
    fn fees_are_collected_and_conserved() {
        let mut l = Ledger::new(LedgerConfig {
            tx_fee: 2,
            ..LedgerConfig::default()
        });
        let b1 = funded_buyer(&mut l, "b1", 100);
        let b2 = funded_buyer(&mut l, "b2", 100);
        l.start_auction(request(&["x"], 50), &b1).unwrap();
        l.place_bid(request(&["x"], 10), &b2).unwrap();
        assert_eq!(l.fees_collected(), 4);
        assert_eq!(l.balance(&b1), 48);
        assert_eq!(l.balance(&b2), 98);
        assert!(l.is_conserved());
    }

    #[test]
    fn replay_reproduces_state() {
        let mut l = Ledger::new(LedgerConfig {
            seed: 3,
            ..LedgerConfig::default()
        });
        let b1 = funded_buyer(&mut l, "b1", 1000);
        let b2 = funded_buyer(&mut l, "b2", 1000);
        let s = l.register_user("s", false).unwrap();
        l.register_dataset(&s, tags(["x"]), 5).unwrap();
        l.start_auction(request(&["x"], 100), &b1).unwrap();
        l.advance_block();
        l.place_bid(request(&["x"], 300), &b2).unwrap();
        let _ = l.place_bid(request(&["x"], 5000), &b1);
        for _ in 0..10 {
            l.advance_block();
        }
        l.close_auction(&tags(["x"])).unwrap();
        let log = l.export_tx_log();
        let r = Ledger::replay(l.config().clone(), &log).unwrap();
        assert_eq!(r.snapshot_json(), l.snapshot_json());
        assert_eq!(r.export_tx_log(), log);

        let broken = log.replacen("\"height\":0", "\"height\":4", 1);
        assert!(matches!(
            Ledger::replay(l.config().clone(), &broken),
            Err(LedgerError::ReplayMismatch(_))
        ));
        assert!(matches!(
            Ledger::replay(l.config().clone(), "{not json"),
            Err(LedgerError::BadLog { line: 1, .. })
        ));
    }
}
