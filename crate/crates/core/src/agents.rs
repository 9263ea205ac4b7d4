//! Tabular Q-learning agents that pick MAC configurations.
//!
//! Observations are binned per AP into (busy-fraction quartile,
//! collision-rate quartile, queue-nonempty bit). An agent controls one or
//! more APs; its action is a joint index into `per_ap_configs^arity`.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::wireless::{ApId, MacConfig, Observation};

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_GAMMA: f64 = 0.5;
pub const EPSILON_START: f64 = 0.5;
pub const EPSILON_END: f64 = 0.05;
/// Fraction of the run over which epsilon is annealed.
pub const EPSILON_ANNEAL_FRACTION: f64 = 0.8;

const POLICY_MAGIC: &str = "autonet-policy 1";
const POLICY_SET_MAGIC: &str = "autonet-policy-set 1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("policy is frozen (inference mode); updates are not allowed")]
    Frozen,
    #[error("action space must be nonempty and duplicate-free")]
    BadActionSpace,
    #[error("action index {0} out of range")]
    BadAction(u32),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("policy snapshot line {line}: {msg}")]
    Snapshot { line: usize, msg: String },
}

/// Discretized observation: one 5-bit code per AP.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ObsBin(Vec<u8>);

impl ObsBin {
    pub fn from_codes(codes: Vec<u8>) -> Self {
        Self(codes)
    }

    pub fn codes(&self) -> &[u8] {
        &self.0
    }

    /// (busy quartile, collision quartile, queue-nonempty) per AP.
    pub fn triples(&self) -> Vec<(u8, u8, u8)> {
        self.0.iter().map(|c| (c >> 3, (c >> 1) & 3, c & 1)).collect()
    }

    fn render(&self) -> String {
        if self.0.is_empty() {
            return "-".into();
        }
        self.0.iter().map(|c| format!("{c:02x}")).collect::<Vec<_>>().join(".")
    }

    fn parse(s: &str) -> Option<Self> {
        if s == "-" {
            return Some(Self(Vec::new()));
        }
        s.split('.')
            .map(|h| u8::from_str_radix(h, 16).ok())
            .collect::<Option<Vec<_>>>()
            .map(Self)
    }
}

fn quartile(x: f64) -> u8 {
    ((x * 4.0).floor() as i64).clamp(0, 3) as u8
}

pub fn discretize(obs: &Observation) -> ObsBin {
    ObsBin(
        obs.aps
            .iter()
            .map(|a| {
                let busy = quartile(a.channel_busy_fraction(obs.window_slots));
                let coll = quartile(a.collision_rate());
                let nonempty = u8::from(a.queue_len > 0);
                busy << 3 | coll << 1 | nonempty
            })
            .collect(),
    )
}

/// The per-AP configurations an agent chooses from: `cw_min_exp` in
/// {1, 3, 5} with `cw_max_exp = cw_min_exp + 4` and retry limit in {3, 7},
/// plus a fixed tiny window and the most conservative setting.
pub fn default_per_ap_configs() -> Vec<MacConfig> {
    let mut out = Vec::with_capacity(8);
    for exp in [1u8, 3, 5] {
        for retry in [3u8, 7] {
            out.push(MacConfig::new(exp, exp + 4, retry).expect("valid"));
        }
    }
    out.push(MacConfig::new(1, 1, 1).expect("valid"));
    out.push(MacConfig::new(6, 10, 7).expect("valid"));
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    per_ap: Vec<MacConfig>,
    arity: usize,
}

impl ActionSpace {
    pub fn new(per_ap: Vec<MacConfig>, arity: usize) -> Result<Self, AgentError> {
        let mut sorted = per_ap.clone();
        sorted.sort();
        sorted.dedup();
        if per_ap.is_empty() || sorted.len() != per_ap.len() || arity == 0 {
            return Err(AgentError::BadActionSpace);
        }
        if (per_ap.len() as u64)
            .checked_pow(arity as u32)
            .is_none_or(|n| n > u32::MAX as u64)
        {
            return Err(AgentError::BadActionSpace);
        }
        Ok(Self { per_ap, arity })
    }

    pub fn per_ap(&self) -> &[MacConfig] {
        &self.per_ap
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn len(&self) -> u32 {
        (self.per_ap.len() as u32).pow(self.arity as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Joint index to one config per controlled AP; the first AP is the
    /// least significant digit.
    pub fn decode(&self, index: u32) -> Result<Vec<MacConfig>, AgentError> {
        if index >= self.len() {
            return Err(AgentError::BadAction(index));
        }
        let base = self.per_ap.len() as u32;
        let mut rest = index;
        Ok((0..self.arity)
            .map(|_| {
                let c = self.per_ap[(rest % base) as usize];
                rest /= base;
                c
            })
            .collect())
    }

    pub fn encode(&self, configs: &[MacConfig]) -> Option<u32> {
        if configs.len() != self.arity {
            return None;
        }
        let base = self.per_ap.len() as u32;
        configs.iter().rev().try_fold(0u32, |acc, c| {
            let d = self.per_ap.iter().position(|p| p == c)? as u32;
            Some(acc * base + d)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Infer => "infer",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Mode::Train),
            "infer" => Ok(Mode::Infer),
            other => Err(format!("unknown mode {other:?} (expected train|infer)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            epsilon: EPSILON_START,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: ObsBin,
    pub action: u32,
    pub reward: f64,
    pub next: ObsBin,
}

/// Linear anneal from `EPSILON_START` to `EPSILON_END` over the first 80%
/// of `total` episodes.
pub fn epsilon_for_episode(episode: u32, total: u32) -> f64 {
    let horizon = (total as f64 * EPSILON_ANNEAL_FRACTION).max(1.0);
    let frac = (episode as f64 / horizon).min(1.0);
    EPSILON_START + (EPSILON_END - EPSILON_START) * frac
}

/// Sparse Q-table; missing cells read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    q: BTreeMap<ObsBin, BTreeMap<u32, f64>>,
    hyper: Hyperparams,
    action_space: ActionSpace,
    frozen: bool,
}

impl Policy {
    pub fn new(action_space: ActionSpace, hyper: Hyperparams) -> Self {
        Self {
            q: BTreeMap::new(),
            hyper,
            action_space,
            frozen: false,
        }
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.action_space
    }

    pub fn hyperparams(&self) -> Hyperparams {
        self.hyper
    }

    pub fn epsilon(&self) -> f64 {
        self.hyper.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.hyper.epsilon = epsilon.clamp(0.0, 1.0);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn q_value(&self, state: &ObsBin, action: u32) -> f64 {
        self.q
            .get(state)
            .and_then(|row| row.get(&action))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn set_q(&mut self, state: ObsBin, action: u32, value: f64) {
        self.q.entry(state).or_default().insert(action, value);
    }

    pub fn visited_cells(&self) -> usize {
        self.q.values().map(BTreeMap::len).sum()
    }

    /// Max over a row and the lowest action index attaining it.
    fn best(&self, state: &ObsBin) -> (f64, u32) {
        let n = self.action_space.len();
        let Some(row) = self.q.get(state) else {
            return (0.0, 0);
        };
        let mut best = (f64::NEG_INFINITY, 0u32);
        for (&a, &v) in row {
            if v > best.0 {
                best = (v, a);
            }
        }
        if (row.len() as u32) < n {
            // Some cell is unvisited and reads as 0.
            let first_unvisited = (0..n).find(|a| !row.contains_key(a)).expect("row not full");
            if 0.0 > best.0 || (0.0 == best.0 && first_unvisited < best.1) {
                best = (0.0, first_unvisited);
            }
        }
        if best.0 == f64::NEG_INFINITY {
            return (0.0, 0);
        }
        // Lowest index among ties.
        let lowest_tie = row
            .iter()
            .filter(|(_, &v)| v == best.0)
            .map(|(&a, _)| a)
            .min()
            .unwrap_or(best.1);
        (best.0, lowest_tie.min(best.1))
    }

    pub fn greedy_action(&self, state: &ObsBin) -> u32 {
        self.best(state).1
    }

    pub fn max_q(&self, state: &ObsBin) -> f64 {
        self.best(state).0
    }

    /// Epsilon-greedy in training; deterministic argmax in inference, which
    /// draws nothing from `rng`.
    pub fn select_action<R: Rng + ?Sized>(&self, state: &ObsBin, mode: Mode, rng: &mut R) -> u32 {
        match mode {
            Mode::Infer => self.greedy_action(state),
            Mode::Train => {
                if rng.random::<f64>() < self.hyper.epsilon {
                    rng.random_range(0..self.action_space.len())
                } else {
                    self.greedy_action(state)
                }
            }
        }
    }

    /// One-step Q-learning backup on a single cell.
    pub fn update(&mut self, t: &Transition) -> Result<(), AgentError> {
        if self.frozen {
            return Err(AgentError::Frozen);
        }
        if t.action >= self.action_space.len() {
            return Err(AgentError::BadAction(t.action));
        }
        let target = t.reward + self.hyper.gamma * self.max_q(&t.next);
        let old = self.q_value(&t.state, t.action);
        let new = old + self.hyper.alpha * (target - old);
        self.set_q(t.state.clone(), t.action, new);
        Ok(())
    }

    /// Platform-independent text dump. Floats use Rust's shortest
    /// round-trip formatting, so parsing gives back identical bits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{POLICY_MAGIC}");
        let _ = writeln!(out, "alpha {:?}", self.hyper.alpha);
        let _ = writeln!(out, "gamma {:?}", self.hyper.gamma);
        let _ = writeln!(out, "epsilon {:?}", self.hyper.epsilon);
        let _ = writeln!(out, "frozen {}", self.frozen);
        let _ = writeln!(out, "arity {}", self.action_space.arity);
        let configs: Vec<String> = self
            .action_space
            .per_ap
            .iter()
            .map(|c| format!("{},{},{}", c.cw_min_exp(), c.cw_max_exp(), c.retry_limit()))
            .collect();
        let _ = writeln!(out, "configs {}", configs.join(" "));
        let _ = writeln!(out, "cells {}", self.visited_cells());
        for (s, row) in &self.q {
            let key = s.render();
            for (a, v) in row {
                let _ = writeln!(out, "q {key} {a} {v:?}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, AgentError> {
        Self::parse_lines(&mut text.lines().enumerate().peekable())
    }

    fn parse_lines<'a, I>(lines: &mut std::iter::Peekable<I>) -> Result<Self, AgentError>
    where
        I: Iterator<Item = (usize, &'a str)>,
    {
        let err = |line: usize, msg: &str| AgentError::Snapshot {
            line: line + 1,
            msg: msg.to_string(),
        };
        let mut next = |want: &str| -> Result<(usize, &'a str), AgentError> {
            let (i, l) = lines.next().ok_or_else(|| err(0, &format!("missing `{want}`")))?;
            l.strip_prefix(want)
                .map(|rest| (i, rest.trim()))
                .ok_or_else(|| err(i, &format!("expected `{want}`")))
        };
        let (i, rest) = next(POLICY_MAGIC)?;
        if !rest.is_empty() {
            return Err(err(i, "bad header"));
        }
        let float = |(i, s): (usize, &str)| s.parse::<f64>().map_err(|_| err(i, "bad number"));
        let alpha = float(next("alpha ")?)?;
        let gamma = float(next("gamma ")?)?;
        let epsilon = float(next("epsilon ")?)?;
        let (i, f) = next("frozen ")?;
        let frozen = f.parse::<bool>().map_err(|_| err(i, "bad bool"))?;
        let (i, a) = next("arity ")?;
        let arity = a.parse::<usize>().map_err(|_| err(i, "bad arity"))?;
        let (i, cs) = next("configs ")?;
        let per_ap = cs
            .split_whitespace()
            .map(|c| {
                let parts: Vec<u8> = c.split(',').filter_map(|x| x.parse().ok()).collect();
                match parts.as_slice() {
                    [a, b, r] => MacConfig::new(*a, *b, *r).map_err(|e| err(i, &e.to_string())),
                    _ => Err(err(i, "bad config")),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let action_space = ActionSpace::new(per_ap, arity).map_err(|e| err(i, &e.to_string()))?;
        let (i, c) = next("cells ")?;
        let cells = c.parse::<usize>().map_err(|_| err(i, "bad cell count"))?;
        let mut policy = Policy::new(action_space, Hyperparams { alpha, gamma, epsilon });
        policy.frozen = frozen;
        for _ in 0..cells {
            let (i, rest) = next("q ")?;
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [s, a, v] = parts.as_slice() else {
                return Err(err(i, "bad q line"));
            };
            let s = ObsBin::parse(s).ok_or_else(|| err(i, "bad state"))?;
            let a = a.parse::<u32>().map_err(|_| err(i, "bad action"))?;
            let v = v.parse::<f64>().map_err(|_| err(i, "bad value"))?;
            policy.set_q(s, a, v);
        }
        Ok(policy)
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScenarioKind {
    CentralSingle,
    CentralMulti,
    DistributedSingle,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::CentralSingle,
        ScenarioKind::CentralMulti,
        ScenarioKind::DistributedSingle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::CentralSingle => "central-single",
            ScenarioKind::CentralMulti => "central-multi",
            ScenarioKind::DistributedSingle => "distributed-single",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

/// A scheduled link failure, in simulated microseconds from the start of
/// the scenario loop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkFailure {
    pub at_us: u64,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub ap_ids: Vec<ApId>,
    /// RL nodes in discovery order.
    pub rl_node_names: Vec<String>,
    pub episodes: u32,
    pub seed: u64,
    pub failure_schedule: Vec<LinkFailure>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentAssignment {
    pub agent_id: u16,
    pub rl_node: String,
    pub aps: Vec<ApId>,
    pub action_space: ActionSpace,
}

/// Map the scenario onto agents:
/// central-single is one agent with a joint action over every AP on the
/// first RL node; central-multi is one agent per AP, all on the first RL
/// node; distributed-single splits the APs into contiguous, even subsets,
/// one agent per RL node.
pub fn assign_agents(spec: &ScenarioSpec) -> Result<Vec<AgentAssignment>, AgentError> {
    let bad = |m: &str| AgentError::InvalidScenario(m.to_string());
    if spec.ap_ids.is_empty() {
        return Err(bad("no APs"));
    }
    let mut sorted = spec.ap_ids.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != spec.ap_ids.len() {
        return Err(bad("duplicate AP ids"));
    }
    let first = spec.rl_node_names.first().ok_or_else(|| bad("no RL node available"))?;
    let per_ap = default_per_ap_configs();
    let single = |arity| ActionSpace::new(per_ap.clone(), arity);
    match spec.kind {
        ScenarioKind::CentralSingle => Ok(vec![AgentAssignment {
            agent_id: 0,
            rl_node: first.clone(),
            aps: spec.ap_ids.clone(),
            action_space: single(spec.ap_ids.len())?,
        }]),
        ScenarioKind::CentralMulti => spec
            .ap_ids
            .iter()
            .enumerate()
            .map(|(i, &ap)| {
                Ok(AgentAssignment {
                    agent_id: i as u16,
                    rl_node: first.clone(),
                    aps: vec![ap],
                    action_space: single(1)?,
                })
            })
            .collect(),
        ScenarioKind::DistributedSingle => {
            let nodes = spec.rl_node_names.len();
            if nodes < 2 {
                return Err(bad("distributed-single needs at least two RL nodes"));
            }
            if nodes > spec.ap_ids.len() {
                return Err(bad("more RL nodes than APs; cannot partition"));
            }
            let (base, extra) = (spec.ap_ids.len() / nodes, spec.ap_ids.len() % nodes);
            let mut start = 0;
            spec.rl_node_names
                .iter()
                .enumerate()
                .map(|(i, node)| {
                    let size = base + usize::from(i < extra);
                    let aps = spec.ap_ids[start..start + size].to_vec();
                    start += size;
                    Ok(AgentAssignment {
                        agent_id: i as u16,
                        rl_node: node.clone(),
                        action_space: single(aps.len())?,
                        aps,
                    })
                })
                .collect()
        }
    }
}

/// Several policies in one snapshot file, tagged with their assignment.
pub fn policy_set_to_text(scenario: ScenarioKind, agents: &[(AgentAssignment, Policy)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{POLICY_SET_MAGIC}");
    let _ = writeln!(out, "scenario {scenario}");
    let _ = writeln!(out, "agents {}", agents.len());
    for (a, p) in agents {
        let aps: Vec<String> = a.aps.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "agent {} {} {}", a.agent_id, a.rl_node, aps.join(","));
        out.push_str(&p.to_text());
    }
    out
}

/// Parsed snapshot entry: agent id, RL node, APs, policy.
pub type SnapshotEntry = (u16, String, Vec<ApId>, Policy);

pub fn policy_set_from_text(text: &str) -> Result<(ScenarioKind, Vec<SnapshotEntry>), AgentError> {
    let err = |line: usize, msg: &str| AgentError::Snapshot {
        line: line + 1,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, l)) if l == POLICY_SET_MAGIC => {}
        _ => return Err(err(0, "not a policy-set snapshot")),
    }
    let (i, l) = lines.next().ok_or_else(|| err(1, "missing scenario"))?;
    let kind = l
        .strip_prefix("scenario ")
        .and_then(|s| s.parse::<ScenarioKind>().ok())
        .ok_or_else(|| err(i, "bad scenario line"))?;
    let (i, l) = lines.next().ok_or_else(|| err(2, "missing agent count"))?;
    let count = l
        .strip_prefix("agents ")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| err(i, "bad agents line"))?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (i, l) = lines.next().ok_or_else(|| err(0, "truncated snapshot"))?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        let ["agent", id, node, aps] = parts.as_slice() else {
            return Err(err(i, "bad agent line"));
        };
        let id = id.parse::<u16>().map_err(|_| err(i, "bad agent id"))?;
        let aps = aps
            .split(',')
            .map(|x| x.parse::<ApId>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| err(i, "bad AP list"))?;
        let policy = Policy::parse_lines(&mut lines)?;
        out.push((id, node.to_string(), aps, policy));
    }
    Ok((kind, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wireless::ApObservation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(n: usize) -> ActionSpace {
        ActionSpace::new(default_per_ap_configs()[..n].to_vec(), 1).unwrap()
    }

    fn obs(aps: Vec<ApObservation>) -> Observation {
        Observation {
            window_slots: 200,
            n_aps: aps.len() as u8,
            aps,
        }
    }

    #[test]
    fn discretize_examples() {
        let zero = obs(vec![ApObservation::default(); 4]);
        assert_eq!(discretize(&zero), ObsBin::from_codes(vec![0; 4]));

        let busy = ApObservation {
            busy_slots: 198,
            attempts: 10,
            collisions: 9,
            queue_len: 5,
            ..Default::default()
        };
        assert_eq!(discretize(&obs(vec![busy])).triples(), vec![(3, 3, 1)]);

        let a = ApObservation {
            delivered: 3,
            busy_slots: 60,
            attempts: 10,
            collisions: 3,
            queue_len: 2,
            ..Default::default()
        };
        let b = ApObservation { delivered: 11, ..a };
        assert_eq!(discretize(&obs(vec![a])), discretize(&obs(vec![b])));
    }

    #[test]
    fn default_action_space() {
        let per = default_per_ap_configs();
        assert_eq!(per.len(), 8);
        let joint = ActionSpace::new(per.clone(), 4).unwrap();
        assert_eq!(joint.len(), 4096);
        for idx in [0, 1, 7, 8, 511, 4095] {
            let cfgs = joint.decode(idx).unwrap();
            assert_eq!(joint.encode(&cfgs), Some(idx));
        }
        assert!(joint.decode(4096).is_err());
        let mut dup = per.clone();
        dup.push(per[0]);
        assert_eq!(ActionSpace::new(dup, 1), Err(AgentError::BadActionSpace));
        assert_eq!(ActionSpace::new(vec![], 1), Err(AgentError::BadActionSpace));
    }

    #[test]
    fn greedy_with_unique_argmax() {
        let mut p = Policy::new(
            space(4),
            Hyperparams {
                epsilon: 0.0,
                ..Default::default()
            },
        );
        let s = ObsBin::from_codes(vec![1]);
        p.set_q(s.clone(), 2, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(p.select_action(&s, Mode::Train, &mut rng), 2);
        assert_eq!(p.select_action(&s, Mode::Infer, &mut rng), 2);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut p = Policy::new(space(4), Hyperparams::default());
        let s = ObsBin::from_codes(vec![3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(p.select_action(&s, Mode::Infer, &mut rng), 0);
        for a in 0..4 {
            p.set_q(s.clone(), a, 0.25);
        }
        assert_eq!(p.select_action(&s, Mode::Infer, &mut rng), 0);
        p.set_q(s.clone(), 0, -1.0);
        assert_eq!(p.greedy_action(&s), 1);
        // Negative visited cells lose to unvisited zeros.
        let mut q = Policy::new(space(4), Hyperparams::default());
        q.set_q(s.clone(), 0, -0.5);
        q.set_q(s.clone(), 1, -0.1);
        assert_eq!(q.greedy_action(&s), 2);
        assert_eq!(q.max_q(&s), 0.0);
    }

    #[test]
    fn infer_mode_consumes_no_randomness() {
        let p = Policy::new(
            space(8),
            Hyperparams {
                epsilon: 1.0,
                ..Default::default()
            },
        );
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let b = a.clone();
        let s = ObsBin::default();
        for _ in 0..10 {
            p.select_action(&s, Mode::Infer, &mut a);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn one_step_collapse() {
        let mut p = Policy::new(
            space(2),
            Hyperparams {
                alpha: 1.0,
                gamma: 0.0,
                epsilon: 0.0,
            },
        );
        let s = ObsBin::from_codes(vec![0]);
        p.update(&Transition {
            state: s.clone(),
            action: 1,
            reward: 0.5,
            next: s.clone(),
        })
        .unwrap();
        assert_eq!(p.q_value(&s, 1), 0.5);
        assert_eq!(p.visited_cells(), 1);
    }

    #[test]
    fn zero_rewards_keep_table_zero() {
        let mut p = Policy::new(space(3), Hyperparams::default());
        for i in 0..100u8 {
            p.update(&Transition {
                state: ObsBin::from_codes(vec![i % 4]),
                action: (i % 3) as u32,
                reward: 0.0,
                next: ObsBin::from_codes(vec![(i + 1) % 4]),
            })
            .unwrap();
        }
        assert!(p.q.values().flat_map(|r| r.values()).all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_policy_rejects_updates() {
        let mut p = Policy::new(space(2), Hyperparams::default());
        p.freeze();
        let t = Transition {
            state: ObsBin::default(),
            action: 0,
            reward: 1.0,
            next: ObsBin::default(),
        };
        assert_eq!(p.update(&t), Err(AgentError::Frozen));
    }

    #[test]
    fn epsilon_schedule() {
        assert_eq!(epsilon_for_episode(0, 100), 0.5);
        assert!((epsilon_for_episode(40, 100) - 0.275).abs() < 1e-12);
        assert!((epsilon_for_episode(80, 100) - 0.05).abs() < 1e-12);
        assert!((epsilon_for_episode(99, 100) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut p = Policy::new(
            ActionSpace::new(default_per_ap_configs(), 2).unwrap(),
            Hyperparams::default(),
        );
        p.set_q(ObsBin::from_codes(vec![0x1b, 0x00]), 63, 0.1 + 0.2);
        p.set_q(ObsBin::from_codes(vec![0x01, 0x02]), 0, -3.25e-7);
        p.set_q(ObsBin::default(), 5, 1.0 / 3.0);
        let text = p.to_text();
        let back = Policy::from_text(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.digest(), p.digest());
        assert!(Policy::from_text(&text.replace("arity 2", "arity x")).is_err());
    }

    fn spec(kind: ScenarioKind, nodes: &[&str]) -> ScenarioSpec {
        ScenarioSpec {
            kind,
            ap_ids: vec![1, 2, 3, 4],
            rl_node_names: nodes.iter().map(|s| s.to_string()).collect(),
            episodes: 1,
            seed: 0,
            failure_schedule: vec![],
        }
    }

    #[test]
    fn assignments_per_scenario() {
        let cs = assign_agents(&spec(ScenarioKind::CentralSingle, &["rl1", "rl2"])).unwrap();
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].rl_node, "rl1");
        assert_eq!(cs[0].action_space.len(), 4096);

        let cm = assign_agents(&spec(ScenarioKind::CentralMulti, &["rl1", "rl2"])).unwrap();
        assert_eq!(cm.len(), 4);
        assert!(cm
            .iter()
            .all(|a| a.rl_node == "rl1" && a.aps.len() == 1 && a.action_space.len() == 8));

        let ds = assign_agents(&spec(ScenarioKind::DistributedSingle, &["rl1", "rl2"])).unwrap();
        assert_eq!(
            ds.iter().map(|a| a.aps.clone()).collect::<Vec<_>>(),
            vec![vec![1, 2], vec![3, 4]]
        );
        assert_eq!(ds[1].rl_node, "rl2");

        assert!(assign_agents(&spec(ScenarioKind::DistributedSingle, &["rl1"])).is_err());
        assert!(assign_agents(&spec(ScenarioKind::DistributedSingle, &["a", "b", "c", "d", "e"])).is_err());
        let three = assign_agents(&spec(ScenarioKind::DistributedSingle, &["a", "b", "c"])).unwrap();
        assert_eq!(three.iter().map(|a| a.aps.len()).collect::<Vec<_>>(), vec![2, 1, 1]);
    }

    #[test]
    fn policy_set_round_trip() {
        let assignments = assign_agents(&spec(ScenarioKind::DistributedSingle, &["rl1", "rl2"])).unwrap();
        let agents: Vec<_> = assignments
            .into_iter()
            .map(|a| {
                let mut p = Policy::new(a.action_space.clone(), Hyperparams::default());
                p.set_q(ObsBin::from_codes(vec![1, 2]), a.agent_id as u32, 0.5);
                (a, p)
            })
            .collect();
        let text = policy_set_to_text(ScenarioKind::DistributedSingle, &agents);
        let (kind, back) = policy_set_from_text(&text).unwrap();
        assert_eq!(kind, ScenarioKind::DistributedSingle);
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].1, "rl2");
        assert_eq!(back[1].2, vec![3, 4]);
        assert_eq!(back[1].3, agents[1].1);
    }
}
