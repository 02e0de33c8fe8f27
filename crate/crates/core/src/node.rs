//! Chain-height management around the per-height instances.
//!
//! A node appends finalised blocks in height order, runs an instance while it
//! is a validator for the next height, and asks peers for missing blocks when
//! it sees consensus traffic from a height it has not reached.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::chain::{
    create_new_proposed_block, Chain, FinalisedBlock, Height, Round, TxPool, VoteInstruction,
};
use crate::crypto::{Address, Digest, Keypair};
use crate::instance::{Instance, InstanceConfig, InstanceContext, OutputAction};
use crate::messages::{ConsensusMessage, GetBlocks, NetMessage};
use crate::proposer::{ProposerContext, ProposerMode, ValidatorSet};

/// How far ahead of the chain blocks and consensus messages are kept.
pub const FUTURE_WINDOW: Height = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeConfig {
    pub base_timeout: u64,
    pub fast_forward: bool,
    pub proposer_mode: ProposerMode,
    pub tx_capacity: usize,
    pub votes: Vec<VoteInstruction>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            base_timeout: 1000,
            fast_forward: false,
            proposer_mode: ProposerMode::ROUND_ROBIN,
            tx_capacity: 16,
            votes: Vec::new(),
        }
    }
}

/// Things worth recording that are not network traffic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Observation {
    RoundStarted { height: Height, round: Round },
    Decided { height: Height, round: Round, block: Digest },
    Appended { height: Height, round: Round, block: Digest },
    GetBlocksSent { to: Address, lo: Height, hi: Height },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    /// To the listed validators; the node itself already has it.
    Multicast { to: Vec<Address>, msg: ConsensusMessage },
    /// To every peer.
    Broadcast(FinalisedBlock),
    Send { to: Address, msg: NetMessage },
    StartTimer { height: Height, round: Round, duration: u64 },
    Observed(Observation),
}

enum Local {
    Consensus(ConsensusMessage),
    Finalised(FinalisedBlock),
}

#[derive(Debug, Clone)]
pub struct Node {
    key: Keypair,
    chain: Chain,
    peers: Vec<Address>,
    config: NodeConfig,
    pool: TxPool,
    expected_height: BTreeMap<Address, Height>,
    instance: Option<Instance>,
    future_blocks: BTreeMap<Height, Vec<FinalisedBlock>>,
    future_messages: BTreeMap<Height, Vec<ConsensusMessage>>,
}

impl Node {
    pub fn new(key: Keypair, genesis: ValidatorSet, peers: Vec<Address>, config: NodeConfig) -> Self {
        let peers = peers.into_iter().filter(|p| *p != key.address).collect();
        Node {
            pool: TxPool::new(config.tx_capacity),
            key,
            chain: Chain::new(genesis),
            peers,
            config,
            expected_height: BTreeMap::new(),
            instance: None,
            future_blocks: BTreeMap::new(),
            future_messages: BTreeMap::new(),
        }
    }

    pub fn address(&self) -> Address {
        self.key.address
    }

    pub fn peers(&self) -> &[Address] {
        &self.peers
    }

    pub fn key(&self) -> &Keypair {
        &self.key
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn next_height(&self) -> Height {
        self.chain.next_height()
    }

    pub fn instance(&self) -> Option<&Instance> {
        self.instance.as_ref()
    }

    pub fn expected_height(&self, peer: &Address) -> Height {
        self.expected_height.get(peer).copied().unwrap_or(0)
    }

    pub fn is_validator(&self) -> bool {
        self.chain.next_validators().contains(&self.key.address)
    }

    pub fn submit_transaction(&mut self, tx: Vec<u8>) {
        self.pool.submit(tx);
    }

    /// Starts the first instance if this node is a genesis validator.
    pub fn start(&mut self) -> Vec<Effect> {
        let mut out = Vec::new();
        let mut local = VecDeque::new();
        self.start_instance(&mut out, &mut local);
        self.drain(&mut out, &mut local);
        out
    }

    pub fn handle(&mut self, from: Address, msg: NetMessage) -> Vec<Effect> {
        let mut out = Vec::new();
        let mut local = VecDeque::new();
        match msg {
            NetMessage::Consensus(m) => self.on_consensus(from, m, &mut out, &mut local),
            NetMessage::FinalisedBlock(fb) => self.on_finalised_block(fb, &mut out, &mut local),
            NetMessage::GetBlocks(g) => self.on_get_blocks(from, g, &mut out),
        }
        self.drain(&mut out, &mut local);
        out
    }

    pub fn handle_timer(&mut self, height: Height, round: Round) -> Vec<Effect> {
        let mut out = Vec::new();
        let mut local = VecDeque::new();
        if let Some(inst) = self.instance.as_mut().filter(|i| i.height() == height) {
            let actions = inst.handle_timer(round);
            self.emit(actions, &mut out, &mut local);
        }
        self.drain(&mut out, &mut local);
        out
    }

    fn drain(&mut self, out: &mut Vec<Effect>, local: &mut VecDeque<Local>) {
        while let Some(item) = local.pop_front() {
            match item {
                Local::Consensus(m) => {
                    if let Some(inst) = self.instance.as_mut().filter(|i| i.height() == m.height()) {
                        let actions = inst.handle_message(m);
                        self.emit(actions, out, local);
                    }
                }
                Local::Finalised(fb) => self.on_finalised_block(fb, out, local),
            }
        }
    }

    fn emit(&mut self, actions: Vec<OutputAction>, out: &mut Vec<Effect>, local: &mut VecDeque<Local>) {
        let Some(inst) = &self.instance else {
            return;
        };
        let height = inst.height();
        let me = self.key.address;
        for a in actions {
            match a {
                OutputAction::Multicast(msg) => {
                    let to = inst.validators().iter().copied().filter(|v| *v != me).collect();
                    local.push_back(Local::Consensus(msg.clone()));
                    out.push(Effect::Multicast { to, msg });
                }
                OutputAction::Broadcast(fb) => {
                    local.push_back(Local::Finalised(fb.clone()));
                    out.push(Effect::Broadcast(fb));
                }
                OutputAction::StartTimer { round, duration } => {
                    out.push(Effect::Observed(Observation::RoundStarted { height, round }));
                    out.push(Effect::StartTimer { height, round, duration });
                }
                OutputAction::Decided(fb) => {
                    out.push(Effect::Observed(Observation::Decided {
                        height: fb.height(),
                        round: fb.proof.round,
                        block: fb.block.hash(),
                    }));
                }
            }
        }
    }

    fn on_consensus(
        &mut self,
        from: Address,
        msg: ConsensusMessage,
        out: &mut Vec<Effect>,
        local: &mut VecDeque<Local>,
    ) {
        let h = msg.height();
        let next = self.next_height();
        if h > next {
            if self.expected_height(&from) < h {
                self.expected_height.insert(from, h);
                out.push(Effect::Observed(Observation::GetBlocksSent { to: from, lo: next, hi: h }));
                out.push(Effect::Send {
                    to: from,
                    msg: NetMessage::GetBlocks(GetBlocks { lo: next, hi: h }),
                });
            }
            if h - next <= FUTURE_WINDOW {
                self.future_messages.entry(h).or_default().push(msg);
            }
        } else if h == next {
            local.push_back(Local::Consensus(msg));
        }
    }

    fn on_get_blocks(&self, from: Address, g: GetBlocks, out: &mut Vec<Effect>) {
        if g.lo > g.hi {
            return;
        }
        let top = g.hi.min(self.next_height() - 1);
        for h in g.lo.max(1)..=top {
            let fb = self.chain.block(h).expect("height below next").clone();
            out.push(Effect::Send {
                to: from,
                msg: NetMessage::FinalisedBlock(fb),
            });
        }
    }

    fn on_finalised_block(&mut self, fb: FinalisedBlock, out: &mut Vec<Effect>, local: &mut VecDeque<Local>) {
        let h = fb.height();
        let next = self.next_height();
        if h > next {
            if h - next <= FUTURE_WINDOW {
                let slot = self.future_blocks.entry(h).or_default();
                if !slot.contains(&fb) {
                    slot.push(fb);
                }
            }
            return;
        }
        if h < next || !self.try_append(fb, out) {
            return;
        }
        // Apply whatever became contiguous.
        loop {
            let next = self.next_height();
            self.future_blocks.retain(|&k, _| k >= next);
            let Some(candidates) = self.future_blocks.remove(&next) else {
                break;
            };
            if !candidates.into_iter().any(|c| self.try_append(c, out)) {
                break;
            }
        }
        self.start_instance(out, local);
    }

    fn try_append(&mut self, fb: FinalisedBlock, out: &mut Vec<Effect>) -> bool {
        let (height, round, block) = (fb.height(), fb.proof.round, fb.block.hash());
        let txs = fb.block.transactions().unwrap_or_default();
        if self.chain.append(fb).is_err() {
            return false;
        }
        self.pool.remove_included(&txs);
        self.instance = None;
        out.push(Effect::Observed(Observation::Appended { height, round, block }));
        true
    }

    fn start_instance(&mut self, out: &mut Vec<Effect>, local: &mut VecDeque<Local>) {
        let next = self.next_height();
        self.future_messages.retain(|&k, _| k >= next);
        if !self.is_validator() || self.instance.is_some() {
            return;
        }
        let ctx = InstanceContext {
            proposers: ProposerContext::from_chain(&self.chain, self.config.proposer_mode),
            parent: self.chain.tip().block.clone(),
            fresh_block: create_new_proposed_block(
                next,
                self.key.address,
                &self.chain,
                &self.pool,
                &self.config.votes,
            ),
        };
        let config = InstanceConfig {
            base_timeout: self.config.base_timeout,
            fast_forward: self.config.fast_forward,
        };
        let (inst, actions) = Instance::start(ctx, self.key.clone(), config);
        self.instance = Some(inst);
        self.emit(actions, out, local);
        for m in self.future_messages.remove(&next).unwrap_or_default() {
            local.push_back(Local::Consensus(m));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::test_support::{finalise, keys, set_of};
    use crate::messages::make_prepare;

    fn setup(n: usize) -> (Vec<Keypair>, Vec<Node>) {
        let k = keys(n);
        let addrs: Vec<Address> = k.iter().map(|k| k.address).collect();
        let nodes = k
            .iter()
            .map(|key| Node::new(key.clone(), set_of(&k), addrs.clone(), NodeConfig::default()))
            .collect();
        (k, nodes)
    }

    fn block_on(chain: &Chain, k: &[Keypair]) -> FinalisedBlock {
        let h = chain.next_height();
        let proposer = ProposerContext::from_chain(chain, ProposerMode::ROUND_ROBIN).proposer(0);
        let eb = create_new_proposed_block(h, proposer, chain, &TxPool::new(0), &[]);
        let signers: Vec<&Keypair> = k.iter().take(3).collect();
        finalise(eb, 0, &signers)
    }

    fn appended(out: &[Effect]) -> Vec<Height> {
        out.iter()
            .filter_map(|e| match e {
                Effect::Observed(Observation::Appended { height, .. }) => Some(*height),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn validator_starts_instance_at_height_one() {
        let (_, mut nodes) = setup(4);
        let out = nodes[0].start();
        assert!(nodes[0].instance().is_some());
        assert!(out.iter().any(|e| matches!(e, Effect::StartTimer { height: 1, round: 0, .. })));
    }

    #[test]
    fn next_block_is_appended_and_new_instance_started() {
        let (k, mut nodes) = setup(4);
        nodes[0].start();
        let fb = block_on(nodes[0].chain(), &k);
        let out = nodes[0].handle(k[1].address, NetMessage::FinalisedBlock(fb));
        assert_eq!(appended(&out), vec![1]);
        assert_eq!(nodes[0].next_height(), 2);
        assert_eq!(nodes[0].instance().unwrap().height(), 2);
    }

    #[test]
    fn future_block_is_buffered_then_applied() {
        let (k, mut nodes) = setup(4);
        let mut reference = Chain::new(set_of(&k));
        let b1 = block_on(&reference, &k);
        reference.append(b1.clone()).unwrap();
        let b2 = block_on(&reference, &k);
        reference.append(b2.clone()).unwrap();
        let b3 = block_on(&reference, &k);

        nodes[0].start();
        let out = nodes[0].handle(k[1].address, NetMessage::FinalisedBlock(b3));
        assert!(appended(&out).is_empty());
        assert_eq!(nodes[0].next_height(), 1);
        nodes[0].handle(k[1].address, NetMessage::FinalisedBlock(b2));
        let out = nodes[0].handle(k[1].address, NetMessage::FinalisedBlock(b1));
        assert_eq!(appended(&out), vec![1, 2, 3]);
        assert_eq!(nodes[0].instance().unwrap().height(), 4);
    }

    #[test]
    fn invalid_proof_is_dropped() {
        let (k, mut nodes) = setup(4);
        let mut fb = block_on(nodes[0].chain(), &k);
        fb.proof.commit_seals.pop();
        let out = nodes[0].handle(k[1].address, NetMessage::FinalisedBlock(fb));
        assert!(appended(&out).is_empty());
        assert_eq!(nodes[0].next_height(), 1);
    }

    #[test]
    fn higher_height_message_triggers_one_get_blocks() {
        let (k, mut nodes) = setup(4);
        nodes[0].start();
        let prep = ConsensusMessage::Prepare(make_prepare(4, 0, Digest::ZERO, &k[2]));
        let out = nodes[0].handle(k[2].address, NetMessage::Consensus(prep.clone()));
        let sends: Vec<&Effect> = out.iter().filter(|e| matches!(e, Effect::Send { .. })).collect();
        assert_eq!(
            sends,
            vec![&Effect::Send {
                to: k[2].address,
                msg: NetMessage::GetBlocks(GetBlocks { lo: 1, hi: 4 }),
            }]
        );
        let out = nodes[0].handle(k[2].address, NetMessage::Consensus(prep));
        assert!(!out.iter().any(|e| matches!(e, Effect::Send { .. })));
        assert_eq!(nodes[0].expected_height(&k[2].address), 4);

        // Same height: normal dispatch, no sync.
        let cur = ConsensusMessage::Prepare(make_prepare(1, 0, Digest::ZERO, &k[3]));
        let out = nodes[0].handle(k[3].address, NetMessage::Consensus(cur));
        assert!(!out.iter().any(|e| matches!(e, Effect::Send { .. })));
    }

    #[test]
    fn get_blocks_is_clamped_to_own_height() {
        let (k, mut nodes) = setup(4);
        for _ in 0..9 {
            let fb = block_on(nodes[0].chain(), &k);
            nodes[0].handle(k[1].address, NetMessage::FinalisedBlock(fb));
        }
        assert_eq!(nodes[0].next_height(), 10);
        let heights = |out: Vec<Effect>| -> Vec<Height> {
            out.iter()
                .filter_map(|e| match e {
                    Effect::Send { msg: NetMessage::FinalisedBlock(fb), .. } => Some(fb.height()),
                    _ => None,
                })
                .collect()
        };
        let out = nodes[0].handle(k[1].address, NetMessage::GetBlocks(GetBlocks { lo: 3, hi: 7 }));
        assert_eq!(heights(out), vec![3, 4, 5, 6, 7]);
        let out = nodes[0].handle(k[1].address, NetMessage::GetBlocks(GetBlocks { lo: 3, hi: 99 }));
        assert_eq!(heights(out), (3..=9).collect::<Vec<_>>());
        let out = nodes[0].handle(k[1].address, NetMessage::GetBlocks(GetBlocks { lo: 5, hi: 4 }));
        assert!(heights(out).is_empty());
    }

    #[test]
    fn standard_node_runs_no_instance() {
        let k = keys(5);
        let addrs: Vec<Address> = k.iter().map(|k| k.address).collect();
        let mut node = Node::new(k[4].clone(), set_of(&k[..4]), addrs, NodeConfig::default());
        assert!(node.start().is_empty());
        assert!(node.instance().is_none());
        let fb = block_on(node.chain(), &k[..4]);
        node.handle(k[0].address, NetMessage::FinalisedBlock(fb));
        assert_eq!(node.next_height(), 2);
        assert!(node.instance().is_none());
    }
}
