//! Validator-set changes driven by votes carried in blocks.
//!
//! Votes accumulate across blocks. A change is applied once strictly more
//! than `⌊n/2⌋` distinct validators (n measured when the vote is counted)
//! agree on the same `(target, action)`, and takes effect from the next height.
//! Applying a change discards every pending vote on that target.

use std::collections::{BTreeMap, BTreeSet};

use crate::chain::{Chain, EthereumBlock, Height, VoteAction};
use crate::crypto::Address;
use crate::proposer::ValidatorSet;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VoteTally {
    pending: BTreeMap<(Address, VoteAction), BTreeSet<Address>>,
}

impl VoteTally {
    pub fn voters(&self, target: Address, action: VoteAction) -> usize {
        self.pending.get(&(target, action)).map_or(0, BTreeSet::len)
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    fn discard_target(&mut self, target: Address) {
        self.pending.retain(|(t, _), _| *t != target);
    }

    fn discard_voter(&mut self, voter: Address) {
        for voters in self.pending.values_mut() {
            voters.remove(&voter);
        }
        self.pending.retain(|_, v| !v.is_empty());
    }
}

/// Folds one block's vote into `(set, tally)`. The returned set is the one
/// in force for the height after `block`.
pub fn apply_block_vote(
    set: &ValidatorSet,
    tally: &VoteTally,
    block: &EthereumBlock,
) -> (ValidatorSet, VoteTally) {
    let unchanged = || (set.clone(), tally.clone());
    let Some(vote) = block.vote else {
        return unchanged();
    };
    let voter = block.proposer;
    if !set.contains(&voter) {
        return unchanged();
    }
    let member = set.contains(&vote.target);
    match vote.action {
        VoteAction::Add if member => return unchanged(),
        VoteAction::Remove if !member => return unchanged(),
        _ => {}
    }

    let mut tally = tally.clone();
    let opposite = match vote.action {
        VoteAction::Add => VoteAction::Remove,
        VoteAction::Remove => VoteAction::Add,
    };
    if let Some(v) = tally.pending.get_mut(&(vote.target, opposite)) {
        v.remove(&voter);
        if v.is_empty() {
            tally.pending.remove(&(vote.target, opposite));
        }
    }
    let voters = tally.pending.entry((vote.target, vote.action)).or_default();
    voters.insert(voter);

    if voters.len() <= set.len() / 2 {
        return (set.clone(), tally);
    }
    let next = match vote.action {
        VoteAction::Add => set.with(vote.target),
        VoteAction::Remove => match set.without(&vote.target) {
            Some(s) => s,
            // Removing the last validator is ignored.
            None => return (set.clone(), tally),
        },
    };
    tally.discard_target(vote.target);
    if vote.action == VoteAction::Remove {
        tally.discard_voter(vote.target);
    }
    (next, tally)
}

/// Validator set for height `upto`, recomputed from the genesis set by
/// folding blocks `1 .. upto`.
pub fn fold_validators(genesis: &ValidatorSet, chain: &Chain, upto: Height) -> ValidatorSet {
    let mut set = genesis.clone();
    let mut tally = VoteTally::default();
    for fb in chain.blocks().iter().skip(1).take(upto.saturating_sub(1) as usize) {
        (set, tally) = apply_block_vote(&set, &tally, &fb.block);
    }
    set
}
