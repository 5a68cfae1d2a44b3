use std::cell::RefCell;
use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::scenario::{Ablation, DatasetKind, Scenario};
use super::HarnessError;
use crate::adversary::{
    assign_roles, byzantine_state, l2_norm, malicious_seller_update, Roles, SellerStrategy,
};
use crate::consensus::{
    run_mini_rounds, sortition, sortition_seed, threshold, CommitRecord, ExecutionSet,
};
use crate::fedcore::{corrected_osmd_round, round_seed, FedError, ModelState, RoundOracle};
use crate::hash::{Hash32, SeedBuilder};
use crate::training::{
    dirichlet_partition, evaluate_metric, load_idx, local_update, synth_dataset, utility,
    DatasetSplits, LabeledDataset, ModelSpec, ModelWeights, TrainingConfig,
};

/// Data and role assignment shared by every run of a scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub splits: DatasetSplits,
    pub shards: Vec<LabeledDataset>,
    pub roles: Roles,
    pub model_spec: ModelSpec,
}

fn load_idx_splits(s: &Scenario) -> Result<DatasetSplits, HarnessError> {
    let dir = s.idx_dir.as_ref().expect("validated");
    let train = load_idx(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx(
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    )?;
    let mut order: Vec<usize> = (0..train.rows()).collect();
    order.shuffle(&mut s.derived_seed("idx-split").rng());
    let v = s.validation_rows.min(order.len() / 2);
    let end = s
        .idx_train_rows
        .map_or(order.len(), |n| (v + n).min(order.len()));
    let mut validation = train.subset(&order[..v]);
    let mut train_part = train.subset(&order[v..end]);
    let classes = train.class_count.max(test.class_count);
    validation.class_count = classes;
    train_part.class_count = classes;
    let mut test = test;
    test.class_count = classes;
    Ok(DatasetSplits {
        train: train_part,
        validation,
        test,
    })
}

pub fn prepare(s: &Scenario) -> Result<Prepared, HarnessError> {
    s.validate()?;
    let splits = match s.dataset {
        DatasetKind::Synthetic => synth_dataset(&s.synth_spec(), s.rows, &s.derived_seed("data"))?,
        DatasetKind::Idx => load_idx_splits(s)?,
    };
    let plan = dirichlet_partition(
        &splits.train,
        s.sellers,
        s.dirichlet_concentration,
        &s.derived_seed("partition"),
    )?;
    let shards = plan
        .shards
        .iter()
        .map(|rows| splits.train.subset(rows))
        .collect();
    let roles = assign_roles(s.cone_nodes, s.sellers, &s.adversary_spec());
    let model_spec = s.model_spec(splits.train.dims, splits.train.class_count);
    model_spec.validate()?;
    Ok(Prepared {
        splits,
        shards,
        roles,
        model_spec,
    })
}

/// Answers local-update and utility queries from the seller shards.
struct SellerOracle<'a> {
    prepared: &'a Prepared,
    config: TrainingConfig,
    strategy: SellerStrategy,
    seed: Hash32,
}

impl SellerOracle<'_> {
    fn local_seed(&self, round: u64, seller: usize) -> Hash32 {
        SeedBuilder::new("d2m/local")
            .hash(&self.seed)
            .u64(round)
            .u64(seller as u64)
            .finish()
    }

    fn honest(&self, round: u64, seller: usize, w: &ModelWeights) -> Result<Vec<f64>, FedError> {
        let shard = &self.prepared.shards[seller];
        if shard.rows() == 0 {
            return Ok(vec![0.0; w.len()]);
        }
        Ok(local_update(
            w,
            shard,
            &self.config,
            &self.local_seed(round, seller),
        )?)
    }
}

impl RoundOracle for SellerOracle<'_> {
    fn local_updates(
        &mut self,
        round: u64,
        sellers: &[usize],
        w: &ModelWeights,
    ) -> Result<Vec<Vec<f64>>, FedError> {
        let byz = &self.prepared.roles.byz_sellers;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; sellers.len()];
        let mut norms = Vec::new();
        for (slot, &s) in out.iter_mut().zip(sellers) {
            if !byz.contains(&s) {
                let g = self.honest(round, s, w)?;
                norms.push(l2_norm(&g));
                *slot = Some(g);
            }
        }
        let mean_norm = (!norms.is_empty()).then(|| norms.iter().sum::<f64>() / norms.len() as f64);
        for (slot, &s) in out.iter_mut().zip(sellers) {
            if slot.is_some() {
                continue;
            }
            let shard = &self.prepared.shards[s];
            if shard.rows() == 0 {
                *slot = Some(vec![0.0; w.len()]);
                continue;
            }
            let target = match mean_norm {
                Some(n) => n,
                None if self.strategy == SellerStrategy::RandomGradient => {
                    l2_norm(&self.honest(round, s, w)?)
                }
                None => 0.0,
            };
            *slot = Some(malicious_seller_update(
                self.strategy,
                w,
                shard,
                &self.config,
                &self.local_seed(round, s),
                target,
            )?);
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    fn utility(&mut self, w: &ModelWeights) -> Result<f64, FedError> {
        Ok(utility(w, &self.prepared.splits.validation)?)
    }
}

/// Where mini-round randomness comes from and where commits are posted.
pub trait Chain {
    fn beacon(&mut self, round: u64, mini_round: u32) -> Hash32;

    fn on_mini_round(
        &mut self,
        set: &ExecutionSet<usize>,
        commits: &[CommitRecord<usize>],
    ) -> Result<(), HarnessError>;
}

/// Stand-alone chain: seeded beacon, commits discarded.
pub struct SimChain {
    seed: Hash32,
}

impl SimChain {
    pub fn new(scenario: &Scenario) -> Self {
        SimChain {
            seed: scenario.derived_seed("beacon"),
        }
    }
}

impl Chain for SimChain {
    fn beacon(&mut self, round: u64, mini_round: u32) -> Hash32 {
        SeedBuilder::new("d2m/sim-beacon")
            .hash(&self.seed)
            .u64(round)
            .u64(mini_round as u64)
            .finish()
    }

    fn on_mini_round(
        &mut self,
        _: &ExecutionSet<usize>,
        _: &[CommitRecord<usize>],
    ) -> Result<(), HarnessError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub mini_rounds: u32,
    pub accepted_digest: Hash32,
    pub honest_accepted: bool,
    pub exhausted: bool,
    /// Buyer metric on the validation split.
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
    pub distribution: Vec<f64>,
    /// Real elapsed time; the only field that varies between replays.
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreOutput {
    /// `(Ŵ, p, N̂)` after the last round.
    pub state: ModelState,
    /// `N̂C`: mini-round participations per compute node.
    pub participation: Vec<u64>,
    pub records: Vec<RoundRecord>,
    pub initial_test_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_validation_accuracy: f64,
    pub reached_threshold: bool,
}

impl CoreOutput {
    pub fn rounds(&self) -> usize {
        self.records.len()
    }

    /// Largest number of mini-rounds any global round needed.
    pub fn max_mini_rounds(&self) -> u32 {
        self.records
            .iter()
            .map(|r| r.mini_rounds)
            .max()
            .unwrap_or(0)
    }
}

pub fn run_scenario(s: &Scenario) -> Result<CoreOutput, HarnessError> {
    let prepared = prepare(s)?;
    run_d2m_core(s, &prepared, &mut SimChain::new(s))
}

/// What one executor reveals for global round `t`.
struct Executions<'a> {
    scenario: &'a Scenario,
    prepared: &'a Prepared,
    round: u64,
    input: &'a ModelState,
    honest: ModelState,
    honest_digest: Hash32,
    revealed: BTreeMap<Hash32, ModelState>,
}

impl Executions<'_> {
    fn commit(&mut self, node: usize) -> Result<Hash32, HarnessError> {
        if !self.prepared.roles.byz_nodes.contains(&node) {
            return Ok(self.honest_digest);
        }
        let spec = self.scenario.adversary_spec();
        let previous = (self.round > 0).then_some(self.input);
        let state = byzantine_state(
            spec.cone_strategy,
            self.round,
            node,
            previous,
            &self.honest,
            &spec.seed,
        );
        let d = state.digest()?;
        self.revealed.entry(d).or_insert(state);
        Ok(d)
    }

    /// Reveals the preimage of `digest` and checks it hashes back.
    fn adopt(&mut self, digest: &Hash32) -> Result<ModelState, HarnessError> {
        let state = if *digest == self.honest_digest {
            self.honest.clone()
        } else {
            self.revealed
                .remove(digest)
                .ok_or(HarnessError::PreimageMismatch { round: self.round })?
        };
        if state.digest()? != *digest {
            return Err(HarnessError::PreimageMismatch { round: self.round });
        }
        Ok(state)
    }
}

/// The global training loop: honest execution, Byzantine substitution,
/// agreement over digests and adoption of the accepted state.
pub fn run_d2m_core(
    s: &Scenario,
    prepared: &Prepared,
    chain: &mut dyn Chain,
) -> Result<CoreOutput, HarnessError> {
    let params = s.consensus_params();
    let osmd = s.osmd_params();
    let metric = s.metric();
    let theta = match s.ablation {
        Ablation::NoYoda => 0.0,
        _ => threshold(&params)?,
    };
    let splits = &prepared.splits;
    let nodes: Vec<usize> = (0..s.cone_nodes).collect();
    let auction = s.auction_id();

    let w0 = ModelWeights::init(&prepared.model_spec, &s.derived_seed("init"));
    let mut state = ModelState::initial(w0, s.sellers);
    let mut participation = vec![0u64; s.cone_nodes];
    let mut records = Vec::new();
    let mut oracle = SellerOracle {
        prepared,
        config: s.training_config(),
        strategy: s.seller_strategy,
        seed: s.derived_seed("local"),
    };

    let initial_test_accuracy = evaluate_metric(&state.weights, &splits.test, &metric)?;
    let mut val_acc = evaluate_metric(&state.weights, &splits.validation, &metric)?;
    let mut t = 0u64;
    while val_acc < metric.threshold && t < s.t_max {
        let started = Instant::now();
        let honest: ModelState = corrected_osmd_round(
            &state.weights,
            &state.distribution,
            &state.counts,
            &osmd,
            t,
            &round_seed(auction, t),
            &mut oracle,
        )?
        .into();
        let honest_digest = honest.digest()?;
        let mut ex = Executions {
            scenario: s,
            prepared,
            round: t,
            input: &state,
            honest,
            honest_digest,
            revealed: BTreeMap::new(),
        };

        let (accepted, mini_rounds, exhausted) = match s.ablation {
            Ablation::NoYoda => {
                let beacon = chain.beacon(t, 1);
                let seed = sortition_seed(&beacon, auction, t, 1);
                let members = sortition(&seed, &nodes, 1)?;
                let node = members[0];
                let digest = ex.commit(node)?;
                let set = ExecutionSet {
                    round: t,
                    mini_round: 1,
                    members,
                    seed,
                };
                let commits = [CommitRecord {
                    mini_round: 1,
                    digest,
                    node,
                }];
                chain.on_mini_round(&set, &commits)?;
                participation[node] += 1;
                (digest, 1, false)
            }
            Ablation::Full | Ablation::NoKrum => {
                let chain_cell = RefCell::new(&mut *chain);
                let failure: RefCell<Option<HarnessError>> = RefCell::new(None);
                let outcome = run_mini_rounds(
                    &params,
                    theta,
                    t,
                    &nodes,
                    s.allow_exhaustion,
                    |i| {
                        let beacon = chain_cell.borrow_mut().beacon(t, i);
                        sortition_seed(&beacon, auction, t, i)
                    },
                    |set| {
                        let mut commits = Vec::with_capacity(set.len());
                        for &node in &set.members {
                            match ex.commit(node) {
                                Ok(digest) => commits.push(CommitRecord {
                                    mini_round: set.mini_round,
                                    digest,
                                    node,
                                }),
                                Err(e) => {
                                    failure.borrow_mut().get_or_insert(e);
                                }
                            }
                        }
                        if let Err(e) = chain_cell.borrow_mut().on_mini_round(set, &commits) {
                            failure.borrow_mut().get_or_insert(e);
                        }
                        commits
                    },
                );
                if let Some(e) = failure.into_inner() {
                    return Err(e);
                }
                let outcome = outcome?;
                for set in &outcome.execution_sets {
                    for &m in &set.members {
                        participation[m] += 1;
                    }
                }
                (outcome.accepted, outcome.mini_rounds, outcome.exhausted)
            }
        };

        let honest_accepted = accepted == ex.honest_digest;
        state = ex.adopt(&accepted)?;
        val_acc = evaluate_metric(&state.weights, &splits.validation, &metric)?;
        let test_acc = evaluate_metric(&state.weights, &splits.test, &metric)?;
        records.push(RoundRecord {
            round: t,
            mini_rounds,
            accepted_digest: accepted,
            honest_accepted,
            exhausted,
            validation_accuracy: val_acc,
            test_accuracy: test_acc,
            distribution: state.distribution.0.clone(),
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        t += 1;
    }

    let final_test_accuracy = records
        .last()
        .map_or(initial_test_accuracy, |r| r.test_accuracy);
    Ok(CoreOutput {
        state,
        participation,
        records,
        initial_test_accuracy,
        final_test_accuracy,
        final_validation_accuracy: val_acc,
        reached_threshold: val_acc >= metric.threshold,
    })
}
