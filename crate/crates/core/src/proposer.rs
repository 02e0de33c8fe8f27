//! Validator sets and proposer selection.
//!
//! The base rotation walks the validator set in ascending address order,
//! anchored at the proposer of the previous block. Sticky mode starts the
//! walk at that proposer, round-robin mode one position after it. If the
//! previous proposer is no longer a validator the anchor is index 0.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chain::{max_byzantine, quorum, Chain, ChainError, Height, Round};
use crate::crypto::Address;

/// Sorted, duplicate-free, non-empty set of validator addresses.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ValidatorSet(Vec<Address>);

impl ValidatorSet {
    pub fn new(addresses: impl IntoIterator<Item = Address>) -> Result<Self, ChainError> {
        let sorted: BTreeSet<Address> = addresses.into_iter().collect();
        if sorted.is_empty() {
            return Err(ChainError::EmptyValidatorSet);
        }
        Ok(ValidatorSet(sorted.into_iter().collect()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, a: &Address) -> bool {
        self.0.binary_search(a).is_ok()
    }

    pub fn index_of(&self, a: &Address) -> Option<usize> {
        self.0.binary_search(a).ok()
    }

    pub fn get(&self, i: usize) -> Address {
        self.0[i]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Address> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[Address] {
        &self.0
    }

    pub fn quorum(&self) -> usize {
        quorum(self.0.len()).expect("non-empty")
    }

    pub fn max_byzantine(&self) -> usize {
        max_byzantine(self.0.len()).expect("non-empty")
    }

    pub(crate) fn with(&self, a: Address) -> ValidatorSet {
        ValidatorSet::new(self.0.iter().copied().chain([a])).expect("non-empty")
    }

    /// `None` when removing would empty the set.
    pub(crate) fn without(&self, a: &Address) -> Option<ValidatorSet> {
        ValidatorSet::new(self.0.iter().copied().filter(|x| x != a)).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RoundZeroRule {
    Sticky,
    #[default]
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ProposerMode {
    pub rule: RoundZeroRule,
    pub fair: bool,
}

impl ProposerMode {
    pub const ROUND_ROBIN: ProposerMode = ProposerMode {
        rule: RoundZeroRule::RoundRobin,
        fair: false,
    };
    pub const STICKY: ProposerMode = ProposerMode {
        rule: RoundZeroRule::Sticky,
        fair: false,
    };
}

impl fmt::Display for ProposerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rule = match self.rule {
            RoundZeroRule::Sticky => "sticky",
            RoundZeroRule::RoundRobin => "round-robin",
        };
        if self.fair {
            write!(f, "{rule}-fair")
        } else {
            f.write_str(rule)
        }
    }
}

impl FromStr for ProposerMode {
    type Err = String;

    /// Accepts `sticky`, `round-robin`, `sticky-fair`, `round-robin-fair`
    /// (underscores and upper case also accepted).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        let (base, fair) = match norm.strip_suffix("-fair") {
            Some(b) => (b, true),
            None => (norm.as_str(), false),
        };
        let rule = match base {
            "sticky" => RoundZeroRule::Sticky,
            "round-robin" | "roundrobin" => RoundZeroRule::RoundRobin,
            _ => return Err(format!("unknown proposer mode `{s}`")),
        };
        Ok(ProposerMode { rule, fair })
    }
}

impl Serialize for ProposerMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ProposerMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Everything proposer selection needs from a chain prefix, captured once per height.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProposerContext {
    pub height: Height,
    pub validators: ValidatorSet,
    pub previous_proposer: Address,
    /// Proposers of the latest `f(n)` blocks, used by the fair rule.
    pub recent_proposers: Vec<Address>,
    pub mode: ProposerMode,
}

impl ProposerContext {
    /// Context for the height right after `prefix`.
    pub fn from_chain(prefix: &Chain, mode: ProposerMode) -> Self {
        let validators = prefix.next_validators().clone();
        let f = validators.max_byzantine();
        ProposerContext {
            height: prefix.next_height(),
            previous_proposer: prefix.tip().block.proposer,
            recent_proposers: prefix.latest_proposers(f),
            validators,
            mode,
        }
    }

    /// Plain rotation, ignoring the fair rule.
    pub fn rotation(&self, round: Round) -> Address {
        let n = self.validators.len() as u64;
        let base = self
            .validators
            .index_of(&self.previous_proposer)
            .unwrap_or(0) as u64;
        let offset = match self.mode.rule {
            RoundZeroRule::Sticky => 0,
            RoundZeroRule::RoundRobin => 1,
        };
        let idx = (base + offset + round % n) % n;
        self.validators.get(idx as usize)
    }

    /// Skips rotation candidates that proposed any of the latest `f(n)`
    /// blocks and returns the `(round + 1)`-th remaining candidate.
    pub fn fair(&self, round: Round) -> Address {
        let excluded = &self.recent_proposers;
        assert!(
            self.validators.iter().any(|v| !excluded.contains(v)),
            "fair proposer selection needs at least one eligible validator"
        );
        let n = self.validators.len() as u64;
        let eligible: Vec<Address> = (0..n)
            .map(|i| self.rotation(i))
            .filter(|p| !excluded.contains(p))
            .collect();
        // The rotation is periodic in n, so the accepted sequence is periodic
        // in the number of eligible candidates.
        eligible[(round % eligible.len() as u64) as usize]
    }

    pub fn proposer(&self, round: Round) -> Address {
        if self.mode.fair {
            self.fair(round)
        } else {
            self.rotation(round)
        }
    }
}

pub fn validators(prefix: &Chain) -> &ValidatorSet {
    prefix.next_validators()
}

pub fn select_proposer(prefix: &Chain, round: Round, mode: ProposerMode) -> Address {
    ProposerContext::from_chain(prefix, mode).proposer(round)
}

pub fn fair_proposer(prefix: &Chain, round: Round, rule: RoundZeroRule) -> Address {
    ProposerContext::from_chain(prefix, ProposerMode { rule, fair: true }).fair(round)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::test_support::{extend, keys, set_of};
    use crate::chain::{Vote, VoteAction};
    use proptest::prelude::*;

    fn ctx(validators: &ValidatorSet, prev: Address, mode: ProposerMode) -> ProposerContext {
        ProposerContext {
            height: 2,
            validators: validators.clone(),
            previous_proposer: prev,
            recent_proposers: vec![],
            mode,
        }
    }

    /// Literal transcription of the fair-selection loop with a separate scan index.
    fn fair_by_loop(c: &ProposerContext, r: Round) -> Address {
        let mut accepted = 0;
        let mut scan = 0;
        loop {
            let p = c.rotation(scan);
            scan += 1;
            if !c.recent_proposers.contains(&p) {
                if accepted == r {
                    return p;
                }
                accepted += 1;
            }
        }
    }

    #[test]
    fn genesis_validators() {
        let k = keys(4);
        let chain = Chain::new(set_of(&k));
        assert_eq!(validators(&chain), &set_of(&k));
    }

    #[test]
    fn round_robin_and_sticky_anchor_on_previous_proposer() {
        let k = keys(4);
        let set = set_of(&k);
        let b = set.get(1);
        assert_eq!(ctx(&set, b, ProposerMode::ROUND_ROBIN).proposer(0), set.get(2));
        assert_eq!(ctx(&set, b, ProposerMode::STICKY).proposer(0), b);
    }

    #[test]
    fn removed_previous_proposer_anchors_at_zero() {
        let k = keys(4);
        let set = set_of(&k);
        let gone = crate::crypto::key_gen(77).address;
        assert_eq!(ctx(&set, gone, ProposerMode::STICKY).proposer(0), set.get(0));
        assert_eq!(ctx(&set, gone, ProposerMode::ROUND_ROBIN).proposer(0), set.get(1));
    }

    #[test]
    fn fair_skips_latest_proposer() {
        // Latest block proposed by A, rotation A,B,C,D: round 0 goes to B.
        let k = keys(4);
        let set = set_of(&k);
        let a = set.get(0);
        let mut c = ctx(&set, a, ProposerMode { rule: RoundZeroRule::Sticky, fair: true });
        c.recent_proposers = vec![a];
        assert_eq!(c.rotation(0), a);
        assert_eq!(c.proposer(0), set.get(1));
        assert_eq!(c.proposer(1), set.get(2));
        assert_eq!(c.proposer(3), set.get(1));
    }

    #[test]
    fn fair_is_plain_when_no_byzantine_budget() {
        let k = keys(3);
        let mut chain = Chain::new(set_of(&k));
        extend(&mut chain, &k, k[0].address, None);
        for rule in [RoundZeroRule::Sticky, RoundZeroRule::RoundRobin] {
            for r in 0..10 {
                assert_eq!(
                    fair_proposer(&chain, r, rule),
                    select_proposer(&chain, r, ProposerMode { rule, fair: false })
                );
            }
        }
    }

    #[test]
    fn selection_follows_chain() {
        let k = keys(4);
        let mut chain = Chain::new(set_of(&k));
        let first = select_proposer(&chain, 0, ProposerMode::ROUND_ROBIN);
        extend(&mut chain, &k, first, None);
        let second = select_proposer(&chain, 0, ProposerMode::ROUND_ROBIN);
        assert_ne!(first, second);
        let copy = chain.prefix(2);
        assert_eq!(select_proposer(&copy, 0, ProposerMode::ROUND_ROBIN), second);
    }

    #[test]
    fn fair_exclusion_on_real_chain() {
        let k = keys(7);
        let mut chain = Chain::new(set_of(&k));
        for _ in 0..6 {
            let p = fair_proposer(&chain, 0, RoundZeroRule::RoundRobin);
            extend(&mut chain, &k, p, None);
        }
        let latest = chain.latest_proposers(2);
        for r in 0..20 {
            assert!(!latest.contains(&fair_proposer(&chain, r, RoundZeroRule::RoundRobin)));
        }
    }

    #[test]
    fn validators_after_completed_vote() {
        let k = keys(5);
        let four = &k[..4];
        let mut chain = Chain::new(set_of(four));
        let e = k[4].address;
        let vote = Some(Vote { action: VoteAction::Add, target: e });
        for kp in &four[..3] {
            extend(&mut chain, four, kp.address, vote);
        }
        assert_eq!(validators(&chain), &set_of(&k));
    }

    #[test]
    fn fair_liveness_arithmetic() {
        for n in 1..=10_000usize {
            let f = crate::chain::max_byzantine(n).unwrap();
            assert!(n - f > f);
            assert!(n - 2 * f >= 1);
        }
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("sticky".parse::<ProposerMode>().unwrap(), ProposerMode::STICKY);
        assert_eq!("ROUND_ROBIN".parse::<ProposerMode>().unwrap(), ProposerMode::ROUND_ROBIN);
        let fair: ProposerMode = "round-robin-fair".parse().unwrap();
        assert!(fair.fair);
        assert_eq!(fair.to_string().parse::<ProposerMode>().unwrap(), fair);
        assert!("random".parse::<ProposerMode>().is_err());
    }

    proptest! {
        #[test]
        fn any_n_consecutive_rounds_cover_the_set(
            n in 1usize..12,
            prev in 0usize..14,
            r0 in 0u64..1000,
            sticky in any::<bool>(),
        ) {
            let k = keys(n);
            let set = set_of(&k);
            let prev = if prev < n { set.get(prev) } else { Address::ZERO };
            let mode = if sticky { ProposerMode::STICKY } else { ProposerMode::ROUND_ROBIN };
            let c = ctx(&set, prev, mode);
            let got: BTreeSet<Address> = (r0..r0 + n as u64).map(|r| c.proposer(r)).collect();
            prop_assert_eq!(got.len(), n);
        }

        #[test]
        fn fair_matches_loop_and_excludes_recent(
            n in 1usize..12,
            prev in 0usize..12,
            recent in proptest::collection::vec(0usize..12, 0..4),
            r in 0u64..200,
            sticky in any::<bool>(),
        ) {
            let k = keys(n);
            let set = set_of(&k);
            let f = set.max_byzantine();
            let recent: Vec<Address> = recent.into_iter().take(f).map(|i| set.get(i % n)).collect();
            let rule = if sticky { RoundZeroRule::Sticky } else { RoundZeroRule::RoundRobin };
            let mut c = ctx(&set, set.get(prev % n), ProposerMode { rule, fair: true });
            c.recent_proposers = recent.clone();
            let p = c.proposer(r);
            prop_assert!(!recent.contains(&p));
            prop_assert_eq!(p, fair_by_loop(&c, r));
        }
    }
}
