//! Byzantine behaviour as a rewrite of an otherwise honest node's effects.
//!
//! A Byzantine node runs the honest state machine; whatever it tries to send
//! goes through its strategy first. Rewrites only ever sign with the node's
//! own key.

use serde::{Deserialize, Serialize};

use crate::chain::{
    create_new_proposed_block, encode_transactions, Height, ProposedBlock, Round, TxPool,
};
use crate::crypto::{hash_digest, Address, Digest, Keypair};
use crate::messages::{
    make_commit, make_prepare, make_proposal, make_round_change, ConsensusMessage, ProposalMessage,
};
use crate::node::{Effect, Node};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// Sends nothing at all.
    Silent,
    /// As proposer, sends one block to the lower half of the validator set
    /// (by address) and a conflicting block to the upper half.
    EquivocateProposer,
    /// Prepares (and commits) for a second, made-up digest alongside every
    /// honest prepare; as proposer also prepares its own block.
    ConflictingPrepare,
    /// Commits carry seals over the wrong digest.
    InvalidSeals,
    /// Never sends commits.
    WithholdCommit,
    /// Silent except for the listed messages.
    Scripted(Vec<ScriptedAction>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedAction {
    pub at: u64,
    /// Node indices; every validator of the height when absent.
    #[serde(default)]
    pub to: Option<Vec<usize>>,
    pub message: ScriptedMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScriptedMessage {
    /// Fresh block on top of the node's chain; skipped if the chain is not at `height - 1`.
    Proposal { height: Height, round: Round },
    Prepare { height: Height, round: Round, digest: Digest },
    Commit { height: Height, round: Round, digest: Digest },
    RoundChange { height: Height, round: Round },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Silent => "SILENT",
            Strategy::EquivocateProposer => "EQUIVOCATE_PROPOSER",
            Strategy::ConflictingPrepare => "CONFLICTING_PREPARE",
            Strategy::InvalidSeals => "INVALID_SEALS",
            Strategy::WithholdCommit => "WITHHOLD_COMMIT",
            Strategy::Scripted(_) => "SCRIPTED",
        }
    }
}

/// Digest nobody honest ever prepares.
pub fn conflicting_digest(d: &Digest) -> Digest {
    let mut bytes = d.0.to_vec();
    bytes.extend_from_slice(b"conflict");
    hash_digest(&bytes)
}

fn is_network(e: &Effect) -> bool {
    matches!(e, Effect::Multicast { .. } | Effect::Broadcast(_) | Effect::Send { .. })
}

pub fn apply(strategy: &Strategy, node: &Node, effects: Vec<Effect>) -> Vec<Effect> {
    let key = node.key();
    match strategy {
        Strategy::Silent | Strategy::Scripted(_) => effects.into_iter().filter(|e| !is_network(e)).collect(),
        Strategy::WithholdCommit => effects
            .into_iter()
            .filter(|e| !matches!(e, Effect::Multicast { msg: ConsensusMessage::Commit(_), .. }))
            .collect(),
        Strategy::InvalidSeals => effects
            .into_iter()
            .map(|e| match e {
                Effect::Multicast { to, msg: ConsensusMessage::Commit(c) } => {
                    let d = c.digest().expect("commit carries a digest");
                    let seal = key.sign(&conflicting_digest(&d));
                    let msg = ConsensusMessage::Commit(make_commit(c.height, c.round, d, seal, key));
                    Effect::Multicast { to, msg }
                }
                other => other,
            })
            .collect(),
        Strategy::ConflictingPrepare => effects
            .into_iter()
            .flat_map(|e| conflicting_prepare(key, e))
            .collect(),
        Strategy::EquivocateProposer => effects
            .into_iter()
            .flat_map(|e| equivocate(node, e))
            .collect(),
    }
}

fn conflicting_prepare(key: &Keypair, e: Effect) -> Vec<Effect> {
    let Effect::Multicast { to, msg } = &e else {
        return vec![e];
    };
    let s = msg.signed();
    let Some(d) = s.digest() else {
        return vec![e];
    };
    let x = conflicting_digest(&d);
    let extra: Vec<ConsensusMessage> = match msg {
        ConsensusMessage::Proposal(_) => vec![
            ConsensusMessage::Prepare(make_prepare(s.height, s.round, d, key)),
            ConsensusMessage::Prepare(make_prepare(s.height, s.round, x, key)),
        ],
        ConsensusMessage::Prepare(_) => {
            vec![ConsensusMessage::Prepare(make_prepare(s.height, s.round, x, key))]
        }
        ConsensusMessage::Commit(_) => vec![ConsensusMessage::Commit(make_commit(
            s.height,
            s.round,
            x,
            key.sign(&x),
            key,
        ))],
        ConsensusMessage::RoundChange(_) => Vec::new(),
    };
    let to = to.clone();
    std::iter::once(e)
        .chain(extra.into_iter().map(|msg| Effect::Multicast { to: to.clone(), msg }))
        .collect()
}

/// Same block with one extra transaction, so it hashes differently.
pub fn twin_block(pb: &ProposedBlock) -> ProposedBlock {
    let mut txs = pb.block.transactions().unwrap_or_default();
    txs.push(format!("equivocation-{}", pb.round).into_bytes());
    let mut twin = pb.clone();
    twin.block.payload = encode_transactions(&txs);
    twin
}

fn equivocate(node: &Node, e: Effect) -> Vec<Effect> {
    let Effect::Multicast { to, msg: ConsensusMessage::Proposal(p) } = &e else {
        return vec![e];
    };
    let Some(inst) = node.instance() else {
        return vec![e];
    };
    let all = inst.validators().as_slice();
    let lower: Vec<Address> = all[..all.len().div_ceil(2)].to_vec();
    let twin = twin_proposal(node.key(), p);
    let (a, b): (Vec<Address>, Vec<Address>) = to.iter().partition(|v| lower.contains(v));
    let mut out = Vec::new();
    if !a.is_empty() {
        out.push(Effect::Multicast { to: a, msg: ConsensusMessage::Proposal(p.clone()) });
    }
    if !b.is_empty() {
        out.push(Effect::Multicast { to: b, msg: ConsensusMessage::Proposal(twin) });
    }
    out
}

fn twin_proposal(key: &Keypair, p: &ProposalMessage) -> ProposalMessage {
    let s = &p.signed;
    make_proposal(
        s.height,
        s.round,
        twin_block(&p.proposed_block),
        p.round_change_certificate.clone(),
        key,
    )
    .expect("same round as an existing proposal")
}

/// Builds a scripted message from the node's current view; `None` if it cannot.
pub fn scripted_message(node: &Node, m: &ScriptedMessage) -> Option<ConsensusMessage> {
    let key = node.key();
    Some(match *m {
        ScriptedMessage::Proposal { height, round } => {
            if node.next_height() != height {
                return None;
            }
            let eb = create_new_proposed_block(height, key.address, node.chain(), &TxPool::new(0), &[]);
            let p = make_proposal(height, round, ProposedBlock::new(eb, round), None, key).ok()?;
            ConsensusMessage::Proposal(p)
        }
        ScriptedMessage::Prepare { height, round, digest } => {
            ConsensusMessage::Prepare(make_prepare(height, round, digest, key))
        }
        ScriptedMessage::Commit { height, round, digest } => {
            ConsensusMessage::Commit(make_commit(height, round, digest, key.sign(&digest), key))
        }
        ScriptedMessage::RoundChange { height, round } => {
            ConsensusMessage::RoundChange(make_round_change(height, round, None, None, key))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::test_support::{keys, set_of};
    use crate::node::NodeConfig;
    use crate::proposer::{ProposerContext, ProposerMode};

    fn proposer_node() -> (Node, Vec<Effect>) {
        let k = keys(4);
        let addrs: Vec<Address> = k.iter().map(|k| k.address).collect();
        let chain = crate::chain::Chain::new(set_of(&k));
        let p = ProposerContext::from_chain(&chain, ProposerMode::ROUND_ROBIN).proposer(0);
        let key = k.iter().find(|k| k.address == p).unwrap().clone();
        let mut node = Node::new(key, set_of(&k), addrs, NodeConfig::default());
        let out = node.start();
        (node, out)
    }

    fn proposals(out: &[Effect]) -> Vec<(Vec<Address>, Digest)> {
        out.iter()
            .filter_map(|e| match e {
                Effect::Multicast { to, msg: ConsensusMessage::Proposal(p) } => {
                    Some((to.clone(), p.signed.digest().unwrap()))
                }
                _ => None,
            })
            .collect()
    }

    #[test]
    fn silent_sends_nothing() {
        let (node, out) = proposer_node();
        let out = apply(&Strategy::Silent, &node, out);
        assert!(out.iter().all(|e| !is_network(e)));
        assert!(out.iter().any(|e| matches!(e, Effect::StartTimer { .. })));
    }

    #[test]
    fn equivocation_splits_validators_in_halves() {
        let (node, out) = proposer_node();
        let out = apply(&Strategy::EquivocateProposer, &node, out);
        let ps = proposals(&out);
        assert_eq!(ps.len(), 2);
        assert_ne!(ps[0].1, ps[1].1);
        let all = node.instance().unwrap().validators().as_slice().to_vec();
        let me = node.address();
        // Halves by sorted address, minus the sender itself.
        for (to, _) in &ps {
            let lower = all[..2].contains(&to[0]);
            assert!(to.iter().all(|a| all[..2].contains(a) == lower && *a != me));
        }
        let total: usize = ps.iter().map(|(to, _)| to.len()).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn conflicting_prepare_adds_messages() {
        let (node, out) = proposer_node();
        let out = apply(&Strategy::ConflictingPrepare, &node, out);
        let prepares = out
            .iter()
            .filter(|e| matches!(e, Effect::Multicast { msg: ConsensusMessage::Prepare(_), .. }))
            .count();
        assert_eq!(prepares, 2);
    }
}
