//! Prepared-Certificate and Round-Change-Certificate rules.
//!
//! Round-change certificates are found without enumerating subsets: valid
//! Round-Change messages are bucketed by round and keyed by sender, and a
//! round is eligible once its bucket holds a quorum.

use std::collections::BTreeMap;

use crate::chain::{compute_block_hash, Height, Round};
use crate::crypto::Address;
use crate::messages::{MessageKind, PreparedCertificate, RoundChangeMessage, SignedPayload};
use crate::proposer::ValidatorSet;

/// Validity of a (possibly empty) Prepared-Certificate carried by a
/// Round-Change for round `round_limit`.
pub fn valid_pc(
    pc: Option<&PreparedCertificate>,
    round_limit: Round,
    height: Height,
    validators: &ValidatorSet,
    proposer: impl Fn(Round) -> Address,
) -> bool {
    let Some(pc) = pc else {
        return true;
    };
    let mut messages: Vec<&SignedPayload> = Vec::with_capacity(pc.messages.len());
    for m in &pc.messages {
        if !messages.contains(&m) {
            messages.push(m);
        }
    }
    if messages.len() < validators.quorum() {
        return false;
    }
    let proposals = messages
        .iter()
        .filter(|m| m.kind() == MessageKind::Proposal)
        .count();
    let prepares = messages
        .iter()
        .filter(|m| m.kind() == MessageKind::Prepare)
        .count();
    if proposals != 1 || prepares != messages.len() - 1 {
        return false;
    }
    let first = messages[0];
    let (round, digest) = (first.round, first.digest());
    if round >= round_limit {
        return false;
    }
    let round_proposer = proposer(round);
    let mut senders: Vec<Address> = Vec::with_capacity(messages.len());
    for m in &messages {
        if m.height != height || m.round != round || m.digest() != digest {
            return false;
        }
        let Ok(sender) = m.sender() else {
            return false;
        };
        if senders.contains(&sender) {
            return false;
        }
        senders.push(sender);
        let ok = match m.kind() {
            MessageKind::Proposal => sender == round_proposer,
            _ => sender != round_proposer && validators.contains(&sender),
        };
        if !ok {
            return false;
        }
    }
    true
}

/// Round of a certificate already known to be valid and non-empty.
pub fn pc_round(pc: &PreparedCertificate) -> Round {
    pc.messages[0].round
}

/// A Round-Change message counts towards a certificate iff it is for this
/// height, from a validator, carries a valid Prepared-Certificate, and (when
/// that certificate is non-empty) the piggybacked block hashes to the
/// certificate's digest.
pub fn valid_round_change(
    rc: &RoundChangeMessage,
    sender: Address,
    height: Height,
    validators: &ValidatorSet,
    proposer: impl Fn(Round) -> Address,
) -> bool {
    let s = &rc.signed;
    if s.kind() != MessageKind::RoundChange || s.height != height || !validators.contains(&sender) {
        return false;
    }
    let pc = s.prepared_certificate();
    if !valid_pc(pc, s.round, height, validators, proposer) {
        return false;
    }
    match pc {
        None => true,
        Some(pc) => match &rc.prepared_block {
            None => false,
            Some(pb) => {
                let expected = compute_block_hash(pb);
                pc.messages.iter().all(|m| m.digest() == Some(expected))
            }
        },
    }
}

/// Valid Round-Change messages grouped by round, one per sender (first seen wins).
pub fn round_change_buckets<'a>(
    valid: impl IntoIterator<Item = (&'a RoundChangeMessage, Address)>,
) -> BTreeMap<Round, BTreeMap<Address, &'a RoundChangeMessage>> {
    let mut buckets: BTreeMap<Round, BTreeMap<Address, &RoundChangeMessage>> = BTreeMap::new();
    for (rc, sender) in valid {
        buckets
            .entry(rc.signed.round)
            .or_default()
            .entry(sender)
            .or_insert(rc);
    }
    buckets
}

/// Round condition for a certificate to be usable by an instance in
/// `current_round` with or without an accepted block.
pub fn round_is_eligible(round: Round, current_round: Round, accepted_empty: bool) -> bool {
    round > current_round || (round == current_round && accepted_empty)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundChangeCandidate {
    pub round: Round,
    /// Exactly a quorum of members, ascending by sender.
    pub members: Vec<(RoundChangeMessage, Address)>,
}

/// Highest eligible round with a quorum of valid Round-Changes from distinct validators.
pub fn collect_round_change_certificate<'a>(
    valid: impl IntoIterator<Item = (&'a RoundChangeMessage, Address)>,
    quorum: usize,
    current_round: Round,
    accepted_empty: bool,
) -> Option<RoundChangeCandidate> {
    let buckets = round_change_buckets(valid);
    buckets
        .into_iter()
        .rev()
        .find(|(round, bucket)| {
            bucket.len() >= quorum && round_is_eligible(*round, current_round, accepted_empty)
        })
        .map(|(round, bucket)| RoundChangeCandidate {
            round,
            members: bucket
                .into_iter()
                .take(quorum)
                .map(|(a, rc)| (rc.clone(), a))
                .collect(),
        })
}
