//! Blocks, finalisation proofs, validity rules and the per-node chain store.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::crypto::{digest_of, recover_address, Address, Digest, Signature};
use crate::proposer::ValidatorSet;
use crate::voting::{self, VoteTally};

pub type Height = u64;
pub type Round = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("validator count must be at least 1")]
    EmptyValidatorSet,
    #[error("block height {got} does not extend chain of next height {expected}")]
    HeightMismatch { expected: Height, got: Height },
    #[error("block at height {0} is not a valid child of the chain tip")]
    InvalidBlock(Height),
    #[error("finalisation proof for height {0} does not verify")]
    InvalidProof(Height),
}

/// `⌈2n/3⌉`.
pub fn quorum(n: usize) -> Result<usize, ChainError> {
    if n == 0 {
        return Err(ChainError::EmptyValidatorSet);
    }
    Ok((2 * n).div_ceil(3))
}

/// `⌊(n−1)/3⌋`, the number of Byzantine validators tolerated.
pub fn max_byzantine(n: usize) -> Result<usize, ChainError> {
    if n == 0 {
        return Err(ChainError::EmptyValidatorSet);
    }
    Ok((n - 1) / 3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VoteAction {
    Add,
    Remove,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vote {
    pub action: VoteAction,
    pub target: Address,
}

/// Reduced Ethereum block: the header fields the protocol inspects plus an
/// opaque transaction payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EthereumBlock {
    pub parent_hash: Digest,
    pub height: Height,
    pub proposer: Address,
    /// Canonically encoded list of transactions.
    pub payload: Vec<u8>,
    pub vote: Option<Vote>,
}

impl EthereumBlock {
    /// Height-0 block. Its payload lists the genesis validators so the genesis
    /// hash commits to them.
    pub fn genesis(validators: &ValidatorSet) -> Self {
        let txs: Vec<Vec<u8>> = validators.iter().map(|a| a.0.to_vec()).collect();
        EthereumBlock {
            parent_hash: Digest::ZERO,
            height: 0,
            proposer: Address::ZERO,
            payload: encode_transactions(&txs),
            vote: None,
        }
    }

    pub fn hash(&self) -> Digest {
        digest_of(self)
    }

    pub fn transactions(&self) -> Option<Vec<Vec<u8>>> {
        decode_transactions(&self.payload)
    }
}

pub fn encode_transactions(txs: &[Vec<u8>]) -> Vec<u8> {
    let mut w = Writer::default();
    w.seq(txs.iter());
    w.into_bytes()
}

pub fn decode_transactions(payload: &[u8]) -> Option<Vec<Vec<u8>>> {
    let mut r = Reader::new(payload);
    let txs = r.seq::<Vec<u8>>().ok()?;
    r.finish().ok()?;
    Some(txs)
}

/// The value agreed upon: an Ethereum block together with the round it was created in.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProposedBlock {
    pub block: EthereumBlock,
    pub round: Round,
}

impl ProposedBlock {
    pub fn new(block: EthereumBlock, round: Round) -> Self {
        Self { block, round }
    }
}

/// Hash of the `(block, round)` tuple; the digest carried by consensus messages
/// and signed by commit seals.
pub fn compute_block_hash(pb: &ProposedBlock) -> Digest {
    digest_of(pb)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FinalisationProof {
    pub round: Round,
    pub commit_seals: Vec<Signature>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalisedBlock {
    pub block: EthereumBlock,
    pub proof: FinalisationProof,
}

impl FinalisedBlock {
    pub fn height(&self) -> Height {
        self.block.height
    }

    /// Digest of the proposed block the seals are expected to sign.
    pub fn sealed_digest(&self) -> Digest {
        compute_block_hash(&ProposedBlock::new(self.block.clone(), self.proof.round))
    }
}

/// True iff `block` is a well-formed child of `parent`.
pub fn is_valid_block(block: &EthereumBlock, parent: &EthereumBlock) -> bool {
    block.parent_hash == parent.hash()
        && block.height == parent.height + 1
        && block.transactions().is_some()
        && block.vote.is_none_or(|v| v.target != Address::ZERO)
}

/// Seal check: at least a quorum of seals, each recovering over
/// `hash(block, proof.round)` to a distinct member of `validators`.
pub fn is_valid_finalised_block(fb: &FinalisedBlock, validators: &ValidatorSet) -> bool {
    if fb.proof.commit_seals.len() < validators.quorum() {
        return false;
    }
    let digest = fb.sealed_digest();
    let mut signers = Vec::with_capacity(fb.proof.commit_seals.len());
    for seal in &fb.proof.commit_seals {
        match recover_address(&digest, seal) {
            Ok(a) if validators.contains(&a) && !signers.contains(&a) => signers.push(a),
            _ => return false,
        }
    }
    true
}

/// Append-only chain of finalised blocks with the validator set for every height cached.
#[derive(Debug, Clone)]
pub struct Chain {
    blocks: Vec<FinalisedBlock>,
    /// `validator_sets[h]` is the set that validates height `h`; index 0 holds the genesis set.
    validator_sets: Vec<ValidatorSet>,
    tally: VoteTally,
}

impl Chain {
    pub fn new(genesis_validators: ValidatorSet) -> Self {
        let genesis = FinalisedBlock {
            block: EthereumBlock::genesis(&genesis_validators),
            proof: FinalisationProof::default(),
        };
        Chain {
            blocks: vec![genesis],
            validator_sets: vec![genesis_validators.clone(), genesis_validators],
            tally: VoteTally::default(),
        }
    }

    /// Height of the next block to be appended (the chain length including genesis).
    pub fn next_height(&self) -> Height {
        self.blocks.len() as Height
    }

    /// Height of the last finalised block.
    pub fn height(&self) -> Height {
        self.next_height() - 1
    }

    pub fn block(&self, height: Height) -> Option<&FinalisedBlock> {
        self.blocks.get(height as usize)
    }

    pub fn tip(&self) -> &FinalisedBlock {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn blocks(&self) -> &[FinalisedBlock] {
        &self.blocks
    }

    pub fn genesis_validators(&self) -> &ValidatorSet {
        &self.validator_sets[0]
    }

    /// Validators for `height`, defined for `1 ..= next_height()`.
    pub fn validators_at(&self, height: Height) -> Option<&ValidatorSet> {
        if height == 0 {
            return None;
        }
        self.validator_sets.get(height as usize)
    }

    /// Validators for the next height, i.e. derived from this whole prefix.
    pub fn next_validators(&self) -> &ValidatorSet {
        self.validator_sets.last().expect("non-empty")
    }

    pub fn tally(&self) -> &VoteTally {
        &self.tally
    }

    /// The first `len` blocks (genesis included) as a standalone chain.
    pub fn prefix(&self, len: usize) -> Chain {
        assert!(len >= 1 && len <= self.blocks.len());
        let mut c = Chain::new(self.genesis_validators().clone());
        for fb in &self.blocks[1..len] {
            c.push_unchecked(fb.clone());
        }
        c
    }

    /// Validates and appends the next finalised block.
    pub fn append(&mut self, fb: FinalisedBlock) -> Result<(), ChainError> {
        let expected = self.next_height();
        if fb.height() != expected {
            return Err(ChainError::HeightMismatch {
                expected,
                got: fb.height(),
            });
        }
        if !is_valid_block(&fb.block, &self.tip().block) {
            return Err(ChainError::InvalidBlock(expected));
        }
        if !is_valid_finalised_block(&fb, self.next_validators()) {
            return Err(ChainError::InvalidProof(expected));
        }
        self.push_unchecked(fb);
        Ok(())
    }

    fn push_unchecked(&mut self, fb: FinalisedBlock) {
        let (set, tally) = voting::apply_block_vote(self.next_validators(), &self.tally, &fb.block);
        self.tally = tally;
        self.validator_sets.push(set);
        self.blocks.push(fb);
    }

    /// Proposers of the latest `count` non-genesis blocks.
    pub fn latest_proposers(&self, count: usize) -> Vec<Address> {
        self.blocks[1..]
            .iter()
            .rev()
            .take(count)
            .map(|fb| fb.block.proposer)
            .collect()
    }

    pub fn dump_records(&self) -> Vec<ChainDumpRecord> {
        self.blocks.iter().map(ChainDumpRecord::from).collect()
    }
}

/// One line of the JSONL chain dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDumpRecord {
    pub digest: Digest,
    pub height: Height,
    pub proposer: Address,
    pub round: Round,
    pub seal_count: usize,
    pub vote: Option<Vote>,
}

impl From<&FinalisedBlock> for ChainDumpRecord {
    fn from(fb: &FinalisedBlock) -> Self {
        ChainDumpRecord {
            digest: fb.block.hash(),
            height: fb.height(),
            proposer: fb.block.proposer,
            round: fb.proof.round,
            seal_count: fb.proof.commit_seals.len(),
            vote: fb.block.vote,
        }
    }
}

/// FIFO transaction source. Transactions leave the pool only once a block
/// containing them is finalised.
#[derive(Debug, Clone, Default)]
pub struct TxPool {
    queue: VecDeque<Vec<u8>>,
    capacity: usize,
}

impl TxPool {
    pub fn new(capacity: usize) -> Self {
        Self {
            queue: VecDeque::new(),
            capacity,
        }
    }

    pub fn submit(&mut self, tx: Vec<u8>) {
        self.queue.push_back(tx);
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Oldest transactions first, up to the block capacity.
    pub fn select(&self) -> Vec<Vec<u8>> {
        self.queue.iter().take(self.capacity).cloned().collect()
    }

    pub fn remove_included(&mut self, txs: &[Vec<u8>]) {
        self.queue.retain(|t| !txs.contains(t));
    }
}

/// Scripted vote a proposer attaches when it creates a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteInstruction {
    pub height_hint: Height,
    pub proposer: Address,
    pub action: VoteAction,
    pub target: Address,
}

/// First instruction for `proposer` that is due at `height` and not already in effect.
pub fn choose_vote(
    plan: &[VoteInstruction],
    proposer: Address,
    height: Height,
    current: &ValidatorSet,
) -> Option<Vote> {
    plan.iter()
        .filter(|i| i.proposer == proposer && i.height_hint <= height)
        .find(|i| match i.action {
            VoteAction::Add => !current.contains(&i.target),
            VoteAction::Remove => current.contains(&i.target),
        })
        .map(|i| Vote {
            action: i.action,
            target: i.target,
        })
}

/// Builds a fresh block for height `height` on top of `chain`.
pub fn create_new_proposed_block(
    height: Height,
    proposer: Address,
    chain: &Chain,
    pool: &TxPool,
    votes: &[VoteInstruction],
) -> EthereumBlock {
    let parent = &chain
        .block(height - 1)
        .expect("chain must reach height - 1")
        .block;
    let current = chain
        .validators_at(height)
        .unwrap_or_else(|| chain.next_validators());
    EthereumBlock {
        parent_hash: parent.hash(),
        height,
        proposer,
        payload: encode_transactions(&pool.select()),
        vote: choose_vote(votes, proposer, height, current),
    }
}

impl Encode for VoteAction {
    fn encode_to(&self, w: &mut Writer) {
        w.u8(match self {
            VoteAction::Add => 0,
            VoteAction::Remove => 1,
        });
    }
}

impl Decode for VoteAction {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(VoteAction::Add),
            1 => Ok(VoteAction::Remove),
            tag => Err(DecodeError::UnknownTag {
                what: "vote action",
                tag,
            }),
        }
    }
}

impl Encode for Vote {
    fn encode_to(&self, w: &mut Writer) {
        self.action.encode_to(w);
        self.target.encode_to(w);
    }
}

impl Decode for Vote {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Vote {
            action: VoteAction::decode_from(r)?,
            target: Address::decode_from(r)?,
        })
    }
}

impl Encode for EthereumBlock {
    fn encode_to(&self, w: &mut Writer) {
        self.parent_hash.encode_to(w);
        w.u64(self.height);
        self.proposer.encode_to(w);
        w.bytes(&self.payload);
        w.option(self.vote.as_ref());
    }
}

impl Decode for EthereumBlock {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(EthereumBlock {
            parent_hash: Digest::decode_from(r)?,
            height: r.u64()?,
            proposer: Address::decode_from(r)?,
            payload: r.bytes()?,
            vote: r.option()?,
        })
    }
}

impl Encode for ProposedBlock {
    fn encode_to(&self, w: &mut Writer) {
        self.block.encode_to(w);
        w.u64(self.round);
    }
}

impl Decode for ProposedBlock {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ProposedBlock {
            block: EthereumBlock::decode_from(r)?,
            round: r.u64()?,
        })
    }
}

impl Encode for FinalisationProof {
    fn encode_to(&self, w: &mut Writer) {
        w.u64(self.round);
        w.seq(self.commit_seals.iter());
    }
}

impl Decode for FinalisationProof {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(FinalisationProof {
            round: r.u64()?,
            commit_seals: r.seq()?,
        })
    }
}

impl Encode for FinalisedBlock {
    fn encode_to(&self, w: &mut Writer) {
        self.block.encode_to(w);
        self.proof.encode_to(w);
    }
}

impl Decode for FinalisedBlock {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(FinalisedBlock {
            block: EthereumBlock::decode_from(r)?,
            proof: FinalisationProof::decode_from(r)?,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn quorum_values() {
        assert_eq!(quorum(4), Ok(3));
        assert_eq!(quorum(6), Ok(4));
        assert_eq!(quorum(1), Ok(1));
        assert_eq!(quorum(0), Err(ChainError::EmptyValidatorSet));
    }

    #[test]
    fn max_byzantine_values() {
        assert_eq!(max_byzantine(4), Ok(1));
        assert_eq!(max_byzantine(7), Ok(2));
        assert_eq!(max_byzantine(1), Ok(0));
        assert!(max_byzantine(0).is_err());
    }

    #[test]
    fn block_hash_binds_round() {
        let k = keys(4);
        let chain = Chain::new(set_of(&k));
        let eb = create_new_proposed_block(1, k[0].address, &chain, &TxPool::new(0), &[]);
        let h0 = compute_block_hash(&ProposedBlock::new(eb.clone(), 0));
        let h1 = compute_block_hash(&ProposedBlock::new(eb.clone(), 1));
        assert_ne!(h0, h1);
        assert_eq!(h0, compute_block_hash(&ProposedBlock::new(eb, 0)));
    }

    #[test]
    fn block_validity() {
        let k = keys(4);
        let chain = Chain::new(set_of(&k));
        let genesis = chain.tip().block.clone();
        let child = create_new_proposed_block(1, k[0].address, &chain, &TxPool::new(0), &[]);
        assert!(is_valid_block(&child, &genesis));

        let mut wrong_parent = child.clone();
        wrong_parent.parent_hash = Digest([9; 32]);
        assert!(!is_valid_block(&wrong_parent, &genesis));

        let mut skip = child.clone();
        skip.height = 2;
        assert!(!is_valid_block(&skip, &genesis));

        let mut garbage = child;
        garbage.payload = vec![1, 2, 3];
        assert!(!is_valid_block(&garbage, &genesis));
    }

    #[test]
    fn finalised_block_validity() {
        let k = keys(4);
        let set = set_of(&k);
        let chain = Chain::new(set.clone());
        let eb = create_new_proposed_block(1, k[0].address, &chain, &TxPool::new(0), &[]);

        let good = finalise(eb.clone(), 0, &[&k[0], &k[1], &k[2]]);
        assert!(is_valid_finalised_block(&good, &set));

        let dup = finalise(eb.clone(), 0, &[&k[0], &k[1], &k[1]]);
        assert!(!is_valid_finalised_block(&dup, &set));

        let short = finalise(eb.clone(), 0, &[&k[0], &k[1]]);
        assert!(!is_valid_finalised_block(&short, &set));

        // Seals over round 1 but the proof claims round 0.
        let mut wrong_round = finalise(eb.clone(), 1, &[&k[0], &k[1], &k[2]]);
        wrong_round.proof.round = 0;
        assert!(!is_valid_finalised_block(&wrong_round, &set));

        let outsider = crate::crypto::key_gen(99);
        let foreign = finalise(eb, 0, &[&k[0], &k[1], &outsider]);
        assert!(!is_valid_finalised_block(&foreign, &set));
    }

    #[test]
    fn append_rules() {
        let k = keys(4);
        let mut chain = Chain::new(set_of(&k));
        extend(&mut chain, &k, k[0].address, None);
        assert_eq!(chain.next_height(), 2);
        let before = chain.blocks()[1].clone();

        // Height skip.
        let mut eb = create_new_proposed_block(2, k[1].address, &chain, &TxPool::new(0), &[]);
        eb.height = 3;
        let skip = finalise(eb, 0, &[&k[0], &k[1], &k[2]]);
        assert_eq!(
            chain.append(skip),
            Err(ChainError::HeightMismatch { expected: 2, got: 3 })
        );

        // Valid seals but wrong parent inside the block.
        let mut eb = create_new_proposed_block(2, k[1].address, &chain, &TxPool::new(0), &[]);
        eb.parent_hash = Digest([1; 32]);
        let bad_parent = finalise(eb, 0, &[&k[0], &k[1], &k[2]]);
        assert_eq!(chain.append(bad_parent), Err(ChainError::InvalidBlock(2)));

        assert_eq!(chain.next_height(), 2);
        assert_eq!(chain.blocks()[1], before);
    }

    #[test]
    fn new_block_payload_and_vote() {
        let k = keys(4);
        let chain = Chain::new(set_of(&k));
        let empty = create_new_proposed_block(1, k[0].address, &chain, &TxPool::new(2), &[]);
        assert_eq!(empty.transactions().unwrap(), Vec::<Vec<u8>>::new());
        assert!(is_valid_block(&empty, &chain.tip().block));

        let mut pool = TxPool::new(2);
        pool.submit(b"t1".to_vec());
        pool.submit(b"t2".to_vec());
        pool.submit(b"t3".to_vec());
        let target = crate::crypto::key_gen(50).address;
        let plan = [VoteInstruction {
            height_hint: 1,
            proposer: k[0].address,
            action: VoteAction::Add,
            target,
        }];
        let eb = create_new_proposed_block(1, k[0].address, &chain, &pool, &plan);
        assert_eq!(eb.transactions().unwrap(), vec![b"t1".to_vec(), b"t2".to_vec()]);
        assert_eq!(
            eb.vote,
            Some(Vote {
                action: VoteAction::Add,
                target
            })
        );
        pool.remove_included(&eb.transactions().unwrap());
        assert_eq!(pool.select(), vec![b"t3".to_vec()]);
    }

    #[test]
    fn prefix_is_independent_copy() {
        let k = keys(4);
        let mut chain = Chain::new(set_of(&k));
        for i in 0..3 {
            extend(&mut chain, &k, k[i].address, None);
        }
        let p = chain.prefix(2);
        assert_eq!(p.next_height(), 2);
        assert_eq!(p.blocks(), &chain.blocks()[..2]);
    }

    #[test]
    fn finalised_block_encoding_round_trips() {
        let k = keys(4);
        let chain = Chain::new(set_of(&k));
        let eb = create_new_proposed_block(1, k[0].address, &chain, &TxPool::new(0), &[]);
        let fb = finalise(eb, 2, &[&k[0], &k[1], &k[2]]);
        assert_eq!(FinalisedBlock::decode(&fb.encode()).unwrap(), fb);
    }
}
