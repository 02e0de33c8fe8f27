//! Timing formulas for round synchronisation and checkers over finished runs.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::chain::{Chain, Height, Round};
use crate::crypto::{digest_of, Address, Digest};
use crate::node::Observation;
use crate::proposer::{ProposerContext, ProposerMode};
use crate::simnet::{Record, World};

/// Start time of round `r` for a validator that entered the height at `si`
/// and only ever moved rounds on timer expiry.
pub fn non_forced_round_start(si: u64, r: Round, base: u64) -> u64 {
    si + base * ((1u64 << r) - 1)
}

/// How long every honest validator is in round `r` at once, given the
/// earliest and latest instance start times.
pub fn min_overlap(si_first: u64, si_last: u64, r: Round, base: u64) -> u64 {
    (si_first + base * (1u64 << r)).saturating_sub(si_last)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimingParams {
    pub base: u64,
    pub delta: u64,
    pub instance_start: BTreeMap<Address, u64>,
    pub quorum: usize,
}

impl TimingParams {
    pub fn si_first(&self) -> Option<u64> {
        self.instance_start.values().min().copied()
    }

    /// Latest start among the `quorum` earliest starters.
    pub fn si_last(&self) -> Option<u64> {
        let mut starts: Vec<u64> = self.instance_start.values().copied().collect();
        starts.sort_unstable();
        let k = self.quorum.min(starts.len());
        (k > 0).then(|| starts[k - 1])
    }
}

/// Rounds scanned before giving up.
pub const ROUND_SCAN_LIMIT: Round = 48;

/// Smallest `r ≥ gst_round` with an honest proposer and enough overlap for a
/// full Proposal/Prepare/Commit exchange plus finalised-block propagation.
pub fn first_terminating_round(
    params: &TimingParams,
    gst_round: Round,
    honest_proposer_at: impl Fn(Round) -> bool,
) -> Option<Round> {
    let (first, last) = (params.si_first()?, params.si_last()?);
    (gst_round..ROUND_SCAN_LIMIT).find(|&r| {
        honest_proposer_at(r) && first + params.base * (1u64 << r) >= last + 4 * params.delta
    })
}

/// First round that every honest validator starts, without help, at or after GST.
pub fn gst_round(si_first: u64, gst: u64, base: u64) -> Round {
    (0..ROUND_SCAN_LIMIT)
        .find(|&r| non_forced_round_start(si_first, r, base) >= gst)
        .unwrap_or(ROUND_SCAN_LIMIT)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub height: Height,
    pub blocks: Vec<Digest>,
}

/// Heights where honest nodes decided or appended different blocks.
pub fn check_safety<'a>(
    records: impl IntoIterator<Item = &'a Record>,
    honest: impl Fn(usize) -> bool,
) -> Vec<Violation> {
    let mut seen: BTreeMap<Height, BTreeSet<Digest>> = BTreeMap::new();
    for r in records {
        if !honest(r.node) {
            continue;
        }
        match &r.observation {
            Observation::Decided { height, block, .. } | Observation::Appended { height, block, .. } => {
                seen.entry(*height).or_default().insert(*block);
            }
            _ => {}
        }
    }
    seen.into_iter()
        .filter(|(_, b)| b.len() > 1)
        .map(|(height, b)| Violation { height, blocks: b.into_iter().collect() })
        .collect()
}

/// Parses records written one JSON object per line.
pub fn records_from_jsonl(text: &str) -> Result<Vec<Record>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// True iff every pair of chains agrees on all common heights.
pub fn chains_consistent(chains: &[Vec<Digest>]) -> bool {
    chains.iter().enumerate().all(|(i, a)| {
        chains[i + 1..].iter().all(|b| {
            let k = a.len().min(b.len());
            a[..k] == b[..k]
        })
    })
}

pub fn block_hashes(chain: &Chain) -> Vec<Digest> {
    chain.blocks().iter().map(|fb| fb.block.hash()).collect()
}

pub fn check_chain_consistency(world: &World) -> bool {
    let chains: Vec<Vec<Digest>> = world.honest().map(|(_, n)| block_hashes(n.chain())).collect();
    chains_consistent(&chains)
}

/// Hash over every honest chain, in node order.
pub fn chains_digest(world: &World) -> Digest {
    let mut bytes = Vec::new();
    for (i, n) in world.honest() {
        bytes.extend_from_slice(&(i as u64).to_be_bytes());
        for d in block_hashes(n.chain()) {
            bytes.extend_from_slice(&d.0);
        }
    }
    digest_of(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HeightLiveness {
    pub height: Height,
    pub observed_round: Round,
    pub gst_round: Round,
    pub predicted_round: Option<Round>,
}

impl HeightLiveness {
    pub fn within_prediction(&self) -> bool {
        self.predicted_round.is_some_and(|p| self.observed_round <= p)
    }
}

/// Compares each finalised height's round with the predicted bound, using
/// the instance start times honest validators actually observed.
pub fn liveness_report(world: &World, mode: ProposerMode, base: u64) -> Vec<HeightLiveness> {
    let Some((_, reference)) = world.honest().max_by_key(|(_, n)| n.chain().height()) else {
        return Vec::new();
    };
    let chain = reference.chain();
    let byzantine: BTreeSet<Address> = world
        .byzantine()
        .keys()
        .map(|&i| world.nodes()[i].address())
        .collect();
    let mut starts: BTreeMap<Height, BTreeMap<Address, u64>> = BTreeMap::new();
    for r in world.records() {
        if world.is_byzantine(r.node) {
            continue;
        }
        if let Observation::RoundStarted { height, round: 0 } = r.observation {
            starts
                .entry(height)
                .or_default()
                .entry(world.nodes()[r.node].address())
                .or_insert(r.time);
        }
    }
    let net = world.network();
    (1..=chain.height())
        .map(|h| {
            let fb = chain.block(h).expect("within chain");
            let ctx = ProposerContext::from_chain(&chain.prefix(h as usize), mode);
            let params = TimingParams {
                base,
                delta: net.delta,
                instance_start: starts.remove(&h).unwrap_or_default(),
                quorum: ctx.validators.quorum(),
            };
            let g = params.si_first().map_or(0, |s| gst_round(s, net.gst, base));
            HeightLiveness {
                height: h,
                observed_round: fb.proof.round,
                gst_round: g,
                predicted_round: first_terminating_round(&params, g, |r| !byzantine.contains(&ctx.proposer(r))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::hash_digest;

    #[test]
    fn round_start_formula() {
        assert_eq!(non_forced_round_start(0, 0, 10), 0);
        assert_eq!(non_forced_round_start(0, 3, 10), 70);
        assert_eq!(non_forced_round_start(5, 1, 10), 15);
    }

    #[test]
    fn overlap_formula() {
        assert_eq!(min_overlap(7, 7, 2, 10), 40);
        assert_eq!(min_overlap(0, 40, 2, 10), 0);
        assert_eq!(min_overlap(0, 50, 2, 10), 0);
        assert_eq!(min_overlap(0, 5, 2, 10), 35);
    }

    fn params(base: u64, delta: u64) -> TimingParams {
        TimingParams {
            base,
            delta,
            instance_start: (0..4u8).map(|i| (Address([i; 20]), 0)).collect(),
            quorum: 3,
        }
    }

    #[test]
    fn terminating_round_examples() {
        assert_eq!(first_terminating_round(&params(10, 1), 0, |_| true), Some(0));
        assert_eq!(first_terminating_round(&params(10, 5), 0, |_| true), Some(1));
        assert_eq!(first_terminating_round(&params(10, 1), 0, |r| r >= 2 && (r - 2) % 4 == 0), Some(2));
        assert_eq!(first_terminating_round(&params(10, 1), 3, |_| true), Some(3));
    }

    #[test]
    fn si_last_is_quorum_th_earliest() {
        let mut p = params(10, 1);
        for (i, t) in [5, 1, 9, 3].into_iter().enumerate() {
            p.instance_start.insert(Address([i as u8; 20]), t);
        }
        assert_eq!(p.si_first(), Some(1));
        assert_eq!(p.si_last(), Some(5));
    }

    #[test]
    fn gst_round_examples() {
        assert_eq!(gst_round(0, 0, 10), 0);
        assert_eq!(gst_round(0, 70, 10), 3);
        assert_eq!(gst_round(0, 71, 10), 4);
    }

    fn decided(node: usize, height: Height, tag: &[u8]) -> Record {
        Record {
            time: 0,
            node,
            observation: Observation::Decided { height, round: 0, block: hash_digest(tag) },
        }
    }

    #[test]
    fn safety_detector() {
        let ok = vec![decided(0, 1, b"a"), decided(1, 1, b"a"), decided(2, 2, b"b")];
        assert!(check_safety(&ok, |_| true).is_empty());
        let forged = vec![decided(0, 3, b"a"), decided(1, 3, b"b"), decided(2, 2, b"c")];
        let v = check_safety(&forged, |_| true);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].height, 3);
        // Byzantine records are ignored.
        assert!(check_safety(&forged, |n| n != 1).is_empty());
    }

    #[test]
    fn records_round_trip_through_jsonl() {
        let rs = vec![decided(0, 1, b"a"), decided(1, 1, b"b")];
        let text: String = rs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        let parsed = records_from_jsonl(&text).unwrap();
        assert_eq!(parsed, rs);
        assert_eq!(check_safety(&parsed, |_| true).len(), 1);
    }

    #[test]
    fn consistency_detector() {
        let a: Vec<Digest> = (0..5u8).map(|i| hash_digest(&[i])).collect();
        let lagging = a[..3].to_vec();
        assert!(chains_consistent(&[a.clone(), a.clone()]));
        assert!(chains_consistent(&[a.clone(), lagging]));
        let mut forked = a.clone();
        forked[2] = hash_digest(b"fork");
        assert!(!chains_consistent(&[a.clone(), forked.clone()]));
        assert!(!chains_consistent(&[a[..2].to_vec(), a, forked]));
        assert!(chains_consistent(&[]));
    }
}
