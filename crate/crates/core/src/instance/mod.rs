//! One validator's state machine for a single height.
//!
//! Pure transition functions: feed it messages and timer expiries, get back
//! output actions. Own multicasts are not looped back here; the node delivers
//! them to the instance like any other message.

pub mod certificates;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::chain::{
    compute_block_hash, is_valid_block, EthereumBlock, FinalisationProof, FinalisedBlock, Height,
    ProposedBlock, Round,
};
use crate::crypto::{recover_address, Address, Digest, Keypair};
use crate::messages::{
    make_commit, make_prepare, make_proposal, make_round_change, ConsensusMessage, MessageKind,
    NetMessage, PreparedCertificate, ProposalMessage, RoundChangeCertificate, RoundChangeMessage,
    SignedPayload,
};
use crate::proposer::{ProposerContext, ValidatorSet};

use certificates::{collect_round_change_certificate, pc_round, valid_pc, valid_round_change};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TimerError {
    #[error("timeout for round {round} overflows the tick counter (base {base})")]
    Overflow { round: Round, base: u64 },
}

/// `base · 2^round`.
pub fn round_timer_timeout(round: Round, base: u64) -> Result<u64, TimerError> {
    u32::try_from(round)
        .ok()
        .and_then(|r| 1u64.checked_shl(r).filter(|_| r < 64))
        .and_then(|m| base.checked_mul(m))
        .ok_or(TimerError::Overflow { round, base })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InstanceConfig {
    pub base_timeout: u64,
    pub fast_forward: bool,
}

/// What an instance needs to know about the chain below it.
#[derive(Debug, Clone)]
pub struct InstanceContext {
    pub proposers: ProposerContext,
    pub parent: EthereumBlock,
    /// Block this validator would propose if it had nothing prepared.
    pub fresh_block: EthereumBlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputAction {
    Multicast(ConsensusMessage),
    Broadcast(FinalisedBlock),
    StartTimer { round: Round, duration: u64 },
    Decided(FinalisedBlock),
}

impl OutputAction {
    pub fn kind(&self) -> &'static str {
        match self {
            OutputAction::Multicast(m) => match m.kind() {
                MessageKind::Proposal => "MULTICAST_PROPOSAL",
                MessageKind::Prepare => "MULTICAST_PREPARE",
                MessageKind::Commit => "MULTICAST_COMMIT",
                MessageKind::RoundChange => "MULTICAST_ROUND_CHANGE",
            },
            OutputAction::Broadcast(_) => "BROADCAST_FINALISED_BLOCK",
            OutputAction::StartTimer { .. } => "START_TIMER",
            OutputAction::Decided(_) => "DECIDED",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    ctx: InstanceContext,
    key: Keypair,
    config: InstanceConfig,
    current_round: Round,
    accepted: Option<ProposedBlock>,
    latest_pc: Option<PreparedCertificate>,
    latest_prepared_block: Option<ProposedBlock>,
    commit_sent: bool,
    finalised_block_sent: bool,
    active_timers: BTreeSet<Round>,
    round_change_fired: Option<Round>,
    seen: HashSet<Digest>,
    proposals: Vec<(ProposalMessage, Address)>,
    prepares: Vec<(SignedPayload, Address)>,
    commits: Vec<(SignedPayload, Address)>,
    round_changes: Vec<(RoundChangeMessage, Address, bool)>,
}

impl Instance {
    /// Starts round 0, proposing immediately if this validator is its proposer.
    pub fn start(ctx: InstanceContext, key: Keypair, config: InstanceConfig) -> (Self, Vec<OutputAction>) {
        let mut inst = Instance {
            ctx,
            key,
            config,
            current_round: 0,
            accepted: None,
            latest_pc: None,
            latest_prepared_block: None,
            commit_sent: false,
            finalised_block_sent: false,
            active_timers: BTreeSet::new(),
            round_change_fired: None,
            seen: HashSet::new(),
            proposals: Vec::new(),
            prepares: Vec::new(),
            commits: Vec::new(),
            round_changes: Vec::new(),
        };
        let mut out = Vec::new();
        inst.start_new_round(0, &mut out);
        if inst.is_proposer(0) {
            let pb = ProposedBlock::new(inst.ctx.fresh_block.clone(), 0);
            let msg = make_proposal(inst.height(), 0, pb.clone(), None, &inst.key)
                .expect("round 0 proposal has no certificate");
            inst.accepted = Some(pb);
            out.push(OutputAction::Multicast(ConsensusMessage::Proposal(msg)));
        }
        (inst, out)
    }

    pub fn height(&self) -> Height {
        self.ctx.proposers.height
    }

    pub fn address(&self) -> Address {
        self.key.address
    }

    pub fn current_round(&self) -> Round {
        self.current_round
    }

    pub fn accepted(&self) -> Option<&ProposedBlock> {
        self.accepted.as_ref()
    }

    pub fn latest_pc(&self) -> Option<&PreparedCertificate> {
        self.latest_pc.as_ref()
    }

    pub fn latest_prepared_block(&self) -> Option<&ProposedBlock> {
        self.latest_prepared_block.as_ref()
    }

    pub fn commit_sent(&self) -> bool {
        self.commit_sent
    }

    pub fn validators(&self) -> &ValidatorSet {
        &self.ctx.proposers.validators
    }

    pub fn proposer(&self, round: Round) -> Address {
        self.ctx.proposers.proposer(round)
    }

    fn is_proposer(&self, round: Round) -> bool {
        self.proposer(round) == self.key.address
    }

    /// Records a consensus message and runs every rule it enables.
    pub fn handle_message(&mut self, msg: ConsensusMessage) -> Vec<OutputAction> {
        if msg.height() != self.height() {
            return Vec::new();
        }
        let Ok(sender) = msg.sender() else {
            return Vec::new();
        };
        if !self.seen.insert(NetMessage::Consensus(msg.clone()).id()) {
            return Vec::new();
        }
        match msg {
            ConsensusMessage::Proposal(p) => self.proposals.push((p, sender)),
            ConsensusMessage::Prepare(s) => self.prepares.push((s, sender)),
            ConsensusMessage::Commit(s) => self.commits.push((s, sender)),
            ConsensusMessage::RoundChange(rc) => {
                let ctx = &self.ctx.proposers;
                let valid =
                    valid_round_change(&rc, sender, ctx.height, &ctx.validators, |r| ctx.proposer(r));
                self.round_changes.push((rc, sender, valid));
            }
        }
        self.evaluate()
    }

    /// Round timer expiry; stale or unknown timers are ignored.
    pub fn handle_timer(&mut self, round: Round) -> Vec<OutputAction> {
        if round != self.current_round || !self.active_timers.contains(&round) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let next = round + 1;
        self.start_new_round(next, &mut out);
        let rc = make_round_change(
            self.height(),
            next,
            self.latest_pc.clone(),
            self.latest_prepared_block.clone(),
            &self.key,
        );
        out.push(OutputAction::Multicast(ConsensusMessage::RoundChange(rc)));
        out.extend(self.evaluate());
        out
    }

    fn start_new_round(&mut self, round: Round, out: &mut Vec<OutputAction>) {
        if round == 0 || round > self.current_round {
            self.active_timers.insert(round);
            let duration = round_timer_timeout(round, self.config.base_timeout).unwrap_or(u64::MAX);
            out.push(OutputAction::StartTimer { round, duration });
        }
        self.current_round = round;
        self.accepted = None;
        self.commit_sent = false;
        self.finalised_block_sent = false;
    }

    fn evaluate(&mut self) -> Vec<OutputAction> {
        let mut out = Vec::new();
        loop {
            let fired = self.try_round_zero_proposal(&mut out)
                || self.try_prepare_quorum(&mut out)
                || self.try_commit_quorum(&mut out)
                || self.try_round_change_quorum(&mut out)
                || self.try_higher_round_proposal(&mut out)
                || (self.config.fast_forward && self.try_fast_forward(&mut out));
            if !fired {
                return out;
            }
        }
    }

    fn try_round_zero_proposal(&mut self, out: &mut Vec<OutputAction>) -> bool {
        if self.accepted.is_some() || self.current_round != 0 || self.is_proposer(0) {
            return false;
        }
        let proposer = self.proposer(0);
        let found = self.proposals.iter().find(|(p, sender)| {
            p.signed.round == 0
                && p.proposed_block.round == 0
                && *sender == proposer
                && p.round_change_certificate.is_none()
                && p.signed.digest() == Some(compute_block_hash(&p.proposed_block))
                && is_valid_block(&p.proposed_block.block, &self.ctx.parent)
        });
        let Some((p, _)) = found else {
            return false;
        };
        let pb = p.proposed_block.clone();
        let digest = compute_block_hash(&pb);
        self.accepted = Some(pb);
        out.push(OutputAction::Multicast(ConsensusMessage::Prepare(make_prepare(
            self.height(),
            0,
            digest,
            &self.key,
        ))));
        true
    }

    /// Valid prepares for the accepted block in the current round, one per sender.
    fn valid_prepares(&self, digest: Digest) -> BTreeMap<Address, &SignedPayload> {
        let proposer = self.proposer(self.current_round);
        let mut by_sender = BTreeMap::new();
        for (s, sender) in &self.prepares {
            if s.round == self.current_round
                && s.digest() == Some(digest)
                && *sender != proposer
                && self.validators().contains(sender)
            {
                by_sender.entry(*sender).or_insert(s);
            }
        }
        by_sender
    }

    fn try_prepare_quorum(&mut self, out: &mut Vec<OutputAction>) -> bool {
        let Some(pb) = &self.accepted else {
            return false;
        };
        if self.commit_sent {
            return false;
        }
        let digest = compute_block_hash(pb);
        let prepares = self.valid_prepares(digest);
        if prepares.len() + 1 < self.validators().quorum() {
            return false;
        }
        let round = self.current_round;
        let proposer = self.proposer(round);
        let proposal = self.proposals.iter().find(|(p, sender)| {
            *sender == proposer && p.signed.round == round && p.signed.digest() == Some(digest)
        });
        if let Some((p, _)) = proposal {
            let mut messages = vec![p.signed.clone()];
            messages.extend(prepares.values().map(|s| (*s).clone()));
            self.latest_pc = Some(PreparedCertificate { messages });
            self.latest_prepared_block = Some(pb.clone());
        }
        let seal = self.key.sign(&digest);
        out.push(OutputAction::Multicast(ConsensusMessage::Commit(make_commit(
            self.height(),
            round,
            digest,
            seal,
            &self.key,
        ))));
        self.commit_sent = true;
        true
    }

    fn try_commit_quorum(&mut self, out: &mut Vec<OutputAction>) -> bool {
        let Some(pb) = &self.accepted else {
            return false;
        };
        if self.finalised_block_sent {
            return false;
        }
        let digest = compute_block_hash(pb);
        let mut seals = BTreeMap::new();
        for (s, sender) in &self.commits {
            if s.round != self.current_round
                || s.digest() != Some(digest)
                || !self.validators().contains(sender)
            {
                continue;
            }
            let Some(seal) = s.commit_seal() else {
                continue;
            };
            if recover_address(&digest, seal).ok() == Some(*sender) {
                seals.entry(*sender).or_insert_with(|| seal.clone());
            }
        }
        if seals.len() < self.validators().quorum() {
            return false;
        }
        let fb = FinalisedBlock {
            block: pb.block.clone(),
            proof: FinalisationProof {
                round: self.current_round,
                commit_seals: seals.into_values().collect(),
            },
        };
        self.finalised_block_sent = true;
        out.push(OutputAction::Broadcast(fb.clone()));
        out.push(OutputAction::Decided(fb));
        true
    }

    fn try_round_change_quorum(&mut self, out: &mut Vec<OutputAction>) -> bool {
        let valid = self
            .round_changes
            .iter()
            .filter(|(_, _, ok)| *ok)
            .map(|(rc, a, _)| (rc, *a));
        let Some(candidate) = collect_round_change_certificate(
            valid,
            self.validators().quorum(),
            self.current_round,
            self.accepted.is_none(),
        ) else {
            return false;
        };
        let round = candidate.round;
        // A certificate for the current round is acted on once.
        if round == self.current_round && self.round_change_fired == Some(round) {
            return false;
        }
        self.round_change_fired = Some(round);
        self.start_new_round(round, out);
        if !self.is_proposer(round) {
            return true;
        }
        let prepared = candidate
            .members
            .iter()
            .filter_map(|(rc, _)| {
                let pc = rc.signed.prepared_certificate()?;
                Some((pc_round(pc), rc.prepared_block.as_ref()?))
            })
            // Members are ascending by sender; keep the first of the highest round.
            .fold(None::<(Round, &ProposedBlock)>, |best, (r, pb)| match best {
                Some((br, _)) if br >= r => best,
                _ => Some((r, pb)),
            });
        let block = match prepared {
            Some((_, pb)) => pb.block.clone(),
            None => self.ctx.fresh_block.clone(),
        };
        let pb = ProposedBlock::new(block, round);
        let rcc = RoundChangeCertificate {
            messages: candidate.members.iter().map(|(rc, _)| rc.signed.clone()).collect(),
        };
        let msg = make_proposal(self.height(), round, pb.clone(), Some(rcc), &self.key)
            .expect("certificate round is positive");
        self.accepted = Some(pb);
        out.push(OutputAction::Multicast(ConsensusMessage::Proposal(msg)));
        true
    }

    /// Acceptance test for a Proposal at round > 0, independent of the round condition.
    pub fn accepts_higher_round_proposal(&self, p: &ProposalMessage, sender: Address) -> bool {
        let round = p.signed.round;
        let validators = self.validators();
        let height = self.height();
        let pb = &p.proposed_block;
        if round == 0
            || sender != self.proposer(round)
            || self.is_proposer(round)
            || p.signed.digest() != Some(compute_block_hash(pb))
            || pb.round != round
        {
            return false;
        }
        let Some(rcc) = &p.round_change_certificate else {
            return false;
        };
        let mut members: Vec<&SignedPayload> = Vec::new();
        for m in &rcc.messages {
            if !members.contains(&m) {
                members.push(m);
            }
        }
        if members.len() < validators.quorum() {
            return false;
        }
        let mut senders = Vec::with_capacity(members.len());
        for m in &members {
            if m.kind() != MessageKind::RoundChange || m.height != height || m.round != round {
                return false;
            }
            match m.sender() {
                Ok(a) if validators.contains(&a) && !senders.contains(&a) => senders.push(a),
                _ => return false,
            }
        }
        let ctx = &self.ctx.proposers;
        let prepared: Vec<(Digest, Round)> = members
            .iter()
            .filter_map(|m| m.prepared_certificate())
            .filter(|pc| valid_pc(Some(pc), round, height, validators, |r| ctx.proposer(r)))
            .filter_map(|pc| Some((pc.messages[0].digest()?, pc_round(pc))))
            .collect();
        match prepared.iter().map(|(_, r)| *r).max() {
            None => is_valid_block(&pb.block, &self.ctx.parent),
            Some(max_round) => {
                let rehashed = compute_block_hash(&ProposedBlock::new(pb.block.clone(), max_round));
                prepared
                    .iter()
                    .any(|(d, r)| *r == max_round && *d == rehashed)
            }
        }
    }

    fn try_higher_round_proposal(&mut self, out: &mut Vec<OutputAction>) -> bool {
        let current = self.current_round;
        let accepted_empty = self.accepted.is_none();
        let found = self.proposals.iter().find(|(p, sender)| {
            let r = p.signed.round;
            (r > current || (r == current && accepted_empty))
                && self.accepts_higher_round_proposal(p, *sender)
        });
        let Some((p, _)) = found else {
            return false;
        };
        let round = p.signed.round;
        let pb = p.proposed_block.clone();
        let digest = compute_block_hash(&pb);
        self.start_new_round(round, out);
        self.accepted = Some(pb);
        out.push(OutputAction::Multicast(ConsensusMessage::Prepare(make_prepare(
            self.height(),
            round,
            digest,
            &self.key,
        ))));
        true
    }

    fn try_fast_forward(&mut self, out: &mut Vec<OutputAction>) -> bool {
        let current = self.current_round;
        let mut lowest: BTreeMap<Address, Round> = BTreeMap::new();
        for (rc, sender, _) in &self.round_changes {
            let r = rc.signed.round;
            if r > current && self.validators().contains(sender) {
                let e = lowest.entry(*sender).or_insert(r);
                *e = (*e).min(r);
            }
        }
        if lowest.len() <= self.validators().max_byzantine() {
            return false;
        }
        let target = *lowest.values().min().expect("non-empty");
        self.start_new_round(target, out);
        let rc = make_round_change(
            self.height(),
            target,
            self.latest_pc.clone(),
            self.latest_prepared_block.clone(),
            &self.key,
        );
        out.push(OutputAction::Multicast(ConsensusMessage::RoundChange(rc)));
        true
    }
}
