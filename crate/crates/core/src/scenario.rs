//! Scenario files: a JSON description of a run, turned into a [`World`],
//! executed, and reduced to a summary.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{chains_digest, check_chain_consistency, check_safety, Violation};
use crate::chain::{max_byzantine, Height, Round, VoteAction, VoteInstruction};
use crate::crypto::{hash_digest, key_gen_all, Address, Digest};
use crate::node::{Node, NodeConfig};
use crate::parallel::{map_seeds, Execution};
use crate::proposer::{ProposerMode, ValidatorSet};
use crate::simnet::{DropRule, NetworkConfig, PreGst, PreGstDelay, StopCondition, StopReason, Strategy, World};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteSpec {
    pub height_hint: Height,
    pub proposer: usize,
    pub action: VoteAction,
    pub target: usize,
}

/// Link loss window; a missing end of the link means any node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropSpec {
    #[serde(default)]
    pub from: Option<usize>,
    #[serde(default)]
    pub to: Option<usize>,
    pub start: u64,
    pub end: u64,
}

/// Nodes are referred to by index; node `i` uses key seed `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub n: usize,
    /// Defaults to every node.
    #[serde(default)]
    pub genesis_validators: Option<Vec<usize>>,
    #[serde(default)]
    pub byzantine: BTreeMap<usize, Strategy>,
    pub gst: u64,
    pub delta: u64,
    #[serde(default)]
    pub pre_gst: PreGst,
    pub base_timeout: u64,
    #[serde(default)]
    pub proposer_mode: ProposerMode,
    #[serde(default)]
    pub fast_forward_enabled: bool,
    #[serde(default)]
    pub votes: Vec<VoteSpec>,
    #[serde(default)]
    pub drop_matrix: Vec<DropSpec>,
    pub stop: StopCondition,
    pub seed: u64,
    #[serde(default)]
    pub allow_overload: bool,
    /// Synthetic transactions put in every node's pool at start.
    #[serde(default)]
    pub transactions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub allow_overload: bool,
    pub fast_forward: bool,
    pub proposer_mode: Option<ProposerMode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub heights_finalised: Height,
    pub rounds_per_height: Vec<Round>,
    pub safety_violations: usize,
    pub chains_consistent: bool,
    pub chains_digest: Digest,
    pub stop_reason: String,
    pub stop_condition_met: bool,
    pub final_time: u64,
    pub events: u64,
}

impl Summary {
    /// 0 when safe, consistent and the stop condition was met; 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.safety_violations == 0 && self.chains_consistent && self.stop_condition_met {
            0
        } else {
            1
        }
    }
}

pub struct RunOutput {
    pub world: World,
    pub summary: Summary,
    pub violations: Vec<Violation>,
}

impl Scenario {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s = Self::parse(text)?;
        s.validate()?;
        Ok(s)
    }

    /// Parses without validating, so overrides can be applied first.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn with_overrides(mut self, o: &Overrides) -> Self {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        self.allow_overload |= o.allow_overload;
        self.fast_forward_enabled |= o.fast_forward;
        if let Some(m) = o.proposer_mode {
            self.proposer_mode = m;
        }
        self
    }

    pub fn genesis_indices(&self) -> Vec<usize> {
        self.genesis_validators.clone().unwrap_or_else(|| (0..self.n).collect())
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        let genesis = self.genesis_indices();
        let mut sorted = genesis.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != genesis.len() || sorted.iter().any(|&i| i >= self.n) {
            return Err(invalid("genesis_validators must be distinct node indices below n"));
        }
        // A lone validator finalises every height inside a single event.
        if genesis.len() < 2 {
            return Err(invalid("at least two genesis validators are required"));
        }
        if self.delta == 0 || self.base_timeout == 0 {
            return Err(invalid("delta and base_timeout must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pre_gst.loss) {
            return Err(invalid("pre_gst.loss must be within [0, 1]"));
        }
        if let PreGstDelay::Range { min, max } = self.pre_gst.delay {
            if min > max {
                return Err(invalid("pre_gst.delay.range needs min <= max"));
            }
        }
        if self.byzantine.keys().any(|&i| i >= self.n) {
            return Err(invalid("byzantine node index out of range"));
        }
        let faulty = genesis.iter().filter(|i| self.byzantine.contains_key(i)).count();
        let f = max_byzantine(genesis.len()).map_err(|e| invalid(e.to_string()))?;
        if faulty > f && !self.allow_overload {
            return Err(invalid(format!(
                "{faulty} Byzantine genesis validators exceed f = {f}; pass allow_overload to run anyway"
            )));
        }
        if self.votes.iter().any(|v| v.proposer >= self.n || v.target >= self.n) {
            return Err(invalid("vote refers to an unknown node"));
        }
        for d in &self.drop_matrix {
            if d.from.is_some_and(|i| i >= self.n) || d.to.is_some_and(|i| i >= self.n) {
                return Err(invalid("drop_matrix refers to an unknown node"));
            }
        }
        if self.stop.max_time.is_none() && self.stop.target_height.is_none() && self.stop.max_events.is_none() {
            return Err(invalid("stop needs at least one of max_time, target_height, max_events"));
        }
        Ok(())
    }

    pub fn build(&self, trace: bool) -> Result<World, ScenarioError> {
        self.validate()?;
        let seeds: Vec<u64> = (1..=self.n as u64).collect();
        let keys = key_gen_all(&seeds).map_err(|e| invalid(e.to_string()))?;
        let addr: Vec<Address> = keys.iter().map(|k| k.address).collect();
        let genesis = ValidatorSet::new(self.genesis_indices().into_iter().map(|i| addr[i]))
            .map_err(|e| invalid(e.to_string()))?;
        let config = NodeConfig {
            base_timeout: self.base_timeout,
            fast_forward: self.fast_forward_enabled,
            proposer_mode: self.proposer_mode,
            tx_capacity: 16,
            votes: self
                .votes
                .iter()
                .map(|v| VoteInstruction {
                    height_hint: v.height_hint,
                    proposer: addr[v.proposer],
                    action: v.action,
                    target: addr[v.target],
                })
                .collect(),
        };
        let nodes = keys
            .into_iter()
            .map(|k| {
                let mut node = Node::new(k, genesis.clone(), addr.clone(), config.clone());
                for t in 0..self.transactions {
                    node.submit_transaction(format!("tx-{t}").into_bytes());
                }
                node
            })
            .collect();
        let net = NetworkConfig {
            gst: self.gst,
            delta: self.delta,
            pre_gst: self.pre_gst.clone(),
            drop_matrix: self
                .drop_matrix
                .iter()
                .map(|d| DropRule {
                    from: d.from.map(|i| addr[i]),
                    to: d.to.map(|i| addr[i]),
                    start: d.start,
                    end: d.end,
                })
                .collect(),
        };
        Ok(World::new(nodes, self.byzantine.clone(), net, self.seed, trace))
    }

    pub fn run(&self, trace: bool) -> Result<RunOutput, ScenarioError> {
        let mut world = self.build(trace)?;
        let reason = world.run(self.stop);
        let violations = check_safety(world.records(), |i| !world.is_byzantine(i));
        let summary = summarise(self, &world, reason, violations.len());
        Ok(RunOutput { world, summary, violations })
    }

    pub fn sweep(&self, seeds: Range<u64>, exec: Execution) -> Result<SweepReport, ScenarioError> {
        self.validate()?;
        let runs = map_seeds(seeds.clone(), exec, |seed| {
            let s = Scenario { seed, ..self.clone() };
            s.run(false).map(|o| o.summary)
        });
        let mut report = SweepReport {
            seeds: seeds.end.saturating_sub(seeds.start),
            ..SweepReport::default()
        };
        for r in runs {
            report.add(r?);
        }
        Ok(report)
    }
}

/// Canonical on-disk form of a summary.
pub fn summary_json(s: &Summary) -> String {
    serde_json::to_string_pretty(s).expect("summary serialises") + "\n"
}

/// Canonical on-disk form of a trace, one JSON object per line.
pub fn trace_jsonl(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

pub fn trace_digest(lines: &[String]) -> Digest {
    hash_digest(trace_jsonl(lines).as_bytes())
}

fn summarise(s: &Scenario, world: &World, reason: StopReason, violations: usize) -> Summary {
    let heights_finalised = world.min_honest_height();
    let rounds_per_height = world
        .honest()
        .max_by_key(|(_, n)| n.chain().height())
        .map(|(_, n)| {
            (1..=heights_finalised)
                .map(|h| n.chain().block(h).expect("below min height").proof.round)
                .collect()
        })
        .unwrap_or_default();
    let stop_condition_met = match s.stop.target_height {
        Some(_) => reason == StopReason::TargetHeight,
        None => true,
    };
    Summary {
        seed: s.seed,
        heights_finalised,
        rounds_per_height,
        safety_violations: violations,
        chains_consistent: check_chain_consistency(world),
        chains_digest: chains_digest(world),
        stop_reason: serde_json::to_value(reason)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default(),
        stop_condition_met,
        final_time: world.now(),
        events: world.events_processed(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SweepReport {
    pub seeds: u64,
    pub runs: usize,
    pub safety_violations: usize,
    pub inconsistent_runs: usize,
    pub unmet_stop_conditions: usize,
    pub failed_seeds: Vec<u64>,
    /// Finalisation round -> number of heights decided in it.
    pub rounds_histogram: BTreeMap<Round, u64>,
    pub min_heights_finalised: Option<Height>,
}

impl SweepReport {
    fn add(&mut self, s: Summary) {
        self.runs += 1;
        self.safety_violations += s.safety_violations;
        self.inconsistent_runs += usize::from(!s.chains_consistent);
        self.unmet_stop_conditions += usize::from(!s.stop_condition_met);
        if s.exit_code() != 0 {
            self.failed_seeds.push(s.seed);
        }
        for r in &s.rounds_per_height {
            *self.rounds_histogram.entry(*r).or_default() += 1;
        }
        self.min_heights_finalised = Some(
            self.min_heights_finalised
                .map_or(s.heights_finalised, |m| m.min(s.heights_finalised)),
        );
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(!self.failed_seeds.is_empty())
    }
}
