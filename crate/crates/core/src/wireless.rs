//! Slotted CSMA/CA channel shared by a set of access points.
//!
//! Stand-in for a packet-level wireless simulator. Time is counted in slots;
//! one frame occupies one slot. Each slot:
//!
//! 1. every active AP receives a Bernoulli(`offered_load`) arrival (tail drop
//!    at [`QUEUE_CAP`]);
//! 2. every AP with a queued frame and a zero backoff counter transmits;
//! 3. a lone transmitter succeeds, redrawing its backoff from `[0, CWmin]`;
//!    two or more collide, each doubling its window up to `CWmax` and
//!    redrawing, and dropping the frame once the retry limit is exceeded;
//! 4. everyone else counts its backoff down by one.
//!
//! All APs hear each other (no hidden terminals, no capture).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::Micros;

pub type ApId = u8;

pub const WINDOW_SLOTS: u16 = 200;
pub const STEPS_PER_EPISODE: u16 = 50;
pub const DEMO_APS: usize = 4;
pub const DYNAMIC_APS: (usize, usize) = (2, 6);
pub const DEMO_LOAD: f64 = 0.9;
pub const DYNAMIC_LOAD: (f64, f64) = (0.1, 0.9);
pub const QUEUE_CAP: u32 = 64;
/// Simulated duration of one slot (802.11 OFDM slot time).
pub const SLOT_US: Micros = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid MAC config: {0}")]
    InvalidConfig(String),
    #[error("action set does not match the APs: missing {missing:?}, unknown {unknown:?}")]
    ApMismatch { missing: Vec<ApId>, unknown: Vec<ApId> },
    #[error("analytic rate needs n >= 1 and p in [0, 1] (got n={n}, p={p})")]
    Domain { n: usize, p: f64 },
}

/// MAC parameters for one AP. `CW = 2^exp - 1` slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MacConfig {
    cw_min_exp: u8,
    cw_max_exp: u8,
    retry_limit: u8,
}

impl MacConfig {
    pub const CW_MIN_EXP: (u8, u8) = (1, 6);
    pub const CW_MAX_EXP_MAX: u8 = 10;
    pub const RETRY: (u8, u8) = (1, 7);

    pub fn new(cw_min_exp: u8, cw_max_exp: u8, retry_limit: u8) -> Result<Self, EnvError> {
        let (lo, hi) = Self::CW_MIN_EXP;
        if !(lo..=hi).contains(&cw_min_exp) {
            return Err(EnvError::InvalidConfig(format!(
                "cw_min_exp {cw_min_exp} outside {lo}..={hi}"
            )));
        }
        if !(cw_min_exp..=Self::CW_MAX_EXP_MAX).contains(&cw_max_exp) {
            return Err(EnvError::InvalidConfig(format!(
                "cw_max_exp {cw_max_exp} outside {cw_min_exp}..={}",
                Self::CW_MAX_EXP_MAX
            )));
        }
        let (rlo, rhi) = Self::RETRY;
        if !(rlo..=rhi).contains(&retry_limit) {
            return Err(EnvError::InvalidConfig(format!(
                "retry_limit {retry_limit} outside {rlo}..={rhi}"
            )));
        }
        Ok(Self {
            cw_min_exp,
            cw_max_exp,
            retry_limit,
        })
    }

    pub fn cw_min_exp(&self) -> u8 {
        self.cw_min_exp
    }

    pub fn cw_max_exp(&self) -> u8 {
        self.cw_max_exp
    }

    pub fn retry_limit(&self) -> u8 {
        self.retry_limit
    }

    pub fn cw_min(&self) -> u32 {
        (1 << self.cw_min_exp) - 1
    }

    pub fn cw_max(&self) -> u32 {
        (1 << self.cw_max_exp) - 1
    }
}

impl Default for MacConfig {
    /// 802.11 DCF-like defaults: CWmin 15, CWmax 1023, 7 retries.
    fn default() -> Self {
        Self {
            cw_min_exp: 4,
            cw_max_exp: 10,
            retry_limit: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvMode {
    /// Four saturated APs every episode.
    Demo,
    /// AP count and loads redrawn per episode.
    Dynamic,
}

impl EnvMode {
    pub fn max_aps(self) -> usize {
        match self {
            EnvMode::Demo => DEMO_APS,
            EnvMode::Dynamic => DYNAMIC_APS.1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvMode::Demo => "demo",
            EnvMode::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for EnvMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "demo" => Ok(EnvMode::Demo),
            "dynamic" => Ok(EnvMode::Dynamic),
            other => Err(format!("unknown env mode {other:?} (expected demo|dynamic)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccessMode {
    Csma,
    /// Test mode: every backlogged AP transmits with this probability each
    /// slot, ignoring backoff. Collided frames stay queued.
    FixedProbability(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardKind {
    /// Aggregate delivered frames per slot.
    #[default]
    Throughput,
    /// Throughput scaled by Jain's fairness index over active APs.
    JainWeighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub mode: EnvMode,
    pub window_slots: u16,
    pub access: AccessMode,
    pub reward: RewardKind,
    /// Overrides the per-episode load draw when set.
    pub fixed_load: Option<f64>,
    /// Overrides the per-episode AP-count draw when set.
    pub fixed_aps: Option<usize>,
}

impl EnvConfig {
    pub fn demo() -> Self {
        Self {
            mode: EnvMode::Demo,
            window_slots: WINDOW_SLOTS,
            access: AccessMode::Csma,
            reward: RewardKind::Throughput,
            fixed_load: None,
            fixed_aps: None,
        }
    }

    pub fn dynamic() -> Self {
        Self {
            mode: EnvMode::Dynamic,
            ..Self::demo()
        }
    }

    pub fn for_mode(mode: EnvMode) -> Self {
        match mode {
            EnvMode::Demo => Self::demo(),
            EnvMode::Dynamic => Self::dynamic(),
        }
    }

    pub fn max_aps(&self) -> usize {
        self.fixed_aps.unwrap_or(0).max(self.mode.max_aps())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApState {
    pub ap_id: ApId,
    pub offered_load: f64,
    pub queue_len: u32,
    pub backoff_counter: u32,
    pub retry_count: u8,
    /// Current contention window.
    pub cw: u32,
    pub config: MacConfig,
}

impl ApState {
    fn new(ap_id: ApId, offered_load: f64, config: MacConfig) -> Self {
        Self {
            ap_id,
            offered_load,
            queue_len: 0,
            backoff_counter: 0,
            retry_count: 0,
            cw: config.cw_min(),
            config,
        }
    }

    fn install(&mut self, config: MacConfig) {
        self.config = config;
        self.cw = self.cw.clamp(config.cw_min(), config.cw_max());
        self.backoff_counter = self.backoff_counter.min(self.cw);
        self.retry_count = self.retry_count.min(config.retry_limit);
    }
}

/// Per-AP statistics for one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ApObservation {
    pub ap_id: ApId,
    pub active: bool,
    pub delivered: u32,
    pub collisions: u32,
    pub attempts: u32,
    /// Slots in which some other AP transmitted.
    pub busy_slots: u32,
    pub queue_len: u32,
    pub arrivals: u32,
    pub dropped: u32,
}

impl ApObservation {
    pub fn channel_busy_fraction(&self, window_slots: u16) -> f64 {
        if window_slots == 0 {
            0.0
        } else {
            self.busy_slots as f64 / window_slots as f64
        }
    }

    pub fn collision_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.collisions as f64 / self.attempts as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Observation {
    pub window_slots: u16,
    pub n_aps: u8,
    /// One entry per AP id in the environment's universe, ascending.
    pub aps: Vec<ApObservation>,
}

impl Observation {
    pub fn ap(&self, id: ApId) -> Option<&ApObservation> {
        self.aps.iter().find(|a| a.ap_id == id)
    }

    pub fn subset(&self, ids: &[ApId]) -> Observation {
        Observation {
            window_slots: self.window_slots,
            n_aps: self.n_aps,
            aps: ids.iter().filter_map(|&id| self.ap(id).copied()).collect(),
        }
    }

    pub fn total_delivered(&self) -> u32 {
        self.aps.iter().map(|a| a.delivered).sum()
    }
}

/// `n p (1-p)^(n-1)`: per-slot success probability with `n` independent
/// transmitters each sending with probability `p`.
pub fn analytic_success_rate(n: usize, p: f64) -> Result<f64, EnvError> {
    if n == 0 || !(0.0..=1.0).contains(&p) {
        return Err(EnvError::Domain { n, p });
    }
    Ok(n as f64 * p * (1.0 - p).powi(n as i32 - 1))
}

/// Deterministic per-episode seed.
pub fn episode_seed(seed: u64, episode: u64) -> u64 {
    splitmix64(seed ^ splitmix64(episode.wrapping_add(0x5EED)))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub struct WirelessEnv {
    cfg: EnvConfig,
    universe: Vec<ApId>,
    aps: Vec<ApState>,
    configs: BTreeMap<ApId, MacConfig>,
    staged: Option<BTreeMap<ApId, MacConfig>>,
    rng: ChaCha8Rng,
    episode: u64,
    trace: Option<Vec<u64>>,
}

impl WirelessEnv {
    pub fn new(cfg: EnvConfig) -> Self {
        let universe: Vec<ApId> = (1..=cfg.max_aps() as ApId).collect();
        let configs = universe.iter().map(|&id| (id, MacConfig::default())).collect();
        Self {
            cfg,
            universe,
            aps: Vec::new(),
            configs,
            staged: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            episode: 0,
            trace: None,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// All AP ids an action set must cover.
    pub fn ap_ids(&self) -> &[ApId] {
        &self.universe
    }

    pub fn active_aps(&self) -> &[ApState] {
        &self.aps
    }

    pub fn mac_configs(&self) -> &BTreeMap<ApId, MacConfig> {
        &self.configs
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    /// Record a bitmask of transmitters per slot (AP id `i` is bit `i`).
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn slot_trace(&self) -> Option<&[u64]> {
        self.trace.as_deref()
    }

    /// Start a new episode: redraw AP count and loads from the episode RNG,
    /// zero all queues and backoff state, restore default MAC configs.
    pub fn reset(&mut self, seed: u64, episode: u64) -> Observation {
        self.episode = episode;
        self.rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, episode));
        let n = match (self.cfg.fixed_aps, self.cfg.mode) {
            (Some(n), _) => n,
            (None, EnvMode::Demo) => DEMO_APS,
            (None, EnvMode::Dynamic) => self.rng.random_range(DYNAMIC_APS.0..=DYNAMIC_APS.1),
        };
        for c in self.configs.values_mut() {
            *c = MacConfig::default();
        }
        self.staged = None;
        self.aps = (1..=n as ApId)
            .map(|id| {
                let load = match (self.cfg.fixed_load, self.cfg.mode) {
                    (Some(l), _) => l,
                    (None, EnvMode::Demo) => DEMO_LOAD,
                    (None, EnvMode::Dynamic) => self.rng.random_range(DYNAMIC_LOAD.0..=DYNAMIC_LOAD.1),
                };
                ApState::new(id, load, self.configs[&id])
            })
            .collect();
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }
        self.observation(&vec![ApObservation::default(); n])
    }

    /// Stage a full set of configs; they take effect at the next window.
    pub fn apply_actions(&mut self, actions: &BTreeMap<ApId, MacConfig>) -> Result<(), EnvError> {
        let missing: Vec<ApId> = self
            .universe
            .iter()
            .copied()
            .filter(|id| !actions.contains_key(id))
            .collect();
        let unknown: Vec<ApId> = actions
            .keys()
            .copied()
            .filter(|id| !self.universe.contains(id))
            .collect();
        if !missing.is_empty() || !unknown.is_empty() {
            return Err(EnvError::ApMismatch { missing, unknown });
        }
        for c in actions.values() {
            MacConfig::new(c.cw_min_exp, c.cw_max_exp, c.retry_limit)?;
        }
        self.staged = Some(actions.clone());
        Ok(())
    }

    /// Simulate one observation window of the configured length.
    pub fn step_window(&mut self) -> (Observation, f64) {
        let len = self.cfg.window_slots;
        self.step_slots(len)
    }

    pub fn step_slots(&mut self, window_slots: u16) -> (Observation, f64) {
        if let Some(staged) = self.staged.take() {
            self.configs = staged;
            for ap in &mut self.aps {
                ap.install(self.configs[&ap.ap_id]);
            }
        }
        let n = self.aps.len();
        let mut stats = vec![ApObservation::default(); n];
        let mut tx = Vec::with_capacity(n);
        for _ in 0..window_slots {
            for (ap, st) in self.aps.iter_mut().zip(stats.iter_mut()) {
                if self.rng.random_bool(ap.offered_load.clamp(0.0, 1.0)) {
                    st.arrivals += 1;
                    if ap.queue_len < QUEUE_CAP {
                        ap.queue_len += 1;
                    } else {
                        st.dropped += 1;
                    }
                }
            }
            tx.clear();
            for (i, ap) in self.aps.iter().enumerate() {
                if ap.queue_len == 0 {
                    continue;
                }
                let sends = match self.cfg.access {
                    AccessMode::Csma => ap.backoff_counter == 0,
                    AccessMode::FixedProbability(p) => self.rng.random_bool(p),
                };
                if sends {
                    tx.push(i);
                }
            }
            if let Some(trace) = self.trace.as_mut() {
                trace.push(tx.iter().fold(0u64, |m, &i| m | 1 << self.aps[i].ap_id));
            }
            for (i, st) in stats.iter_mut().enumerate() {
                if tx.iter().any(|&j| j != i) {
                    st.busy_slots += 1;
                }
            }
            match tx.len() {
                0 => {}
                1 => {
                    let i = tx[0];
                    let ap = &mut self.aps[i];
                    stats[i].attempts += 1;
                    stats[i].delivered += 1;
                    ap.queue_len -= 1;
                    ap.retry_count = 0;
                    ap.cw = ap.config.cw_min();
                    if self.cfg.access == AccessMode::Csma {
                        ap.backoff_counter = self.rng.random_range(0..=ap.cw);
                    }
                }
                _ => {
                    for &i in &tx {
                        let ap = &mut self.aps[i];
                        stats[i].attempts += 1;
                        stats[i].collisions += 1;
                        if self.cfg.access != AccessMode::Csma {
                            continue;
                        }
                        ap.retry_count += 1;
                        if ap.retry_count > ap.config.retry_limit {
                            ap.queue_len -= 1;
                            stats[i].dropped += 1;
                            ap.retry_count = 0;
                            ap.cw = ap.config.cw_min();
                        } else {
                            ap.cw = (2 * ap.cw + 1).min(ap.config.cw_max());
                        }
                        ap.backoff_counter = self.rng.random_range(0..=ap.cw);
                    }
                }
            }
            if self.cfg.access == AccessMode::Csma {
                for (i, ap) in self.aps.iter_mut().enumerate() {
                    if ap.backoff_counter > 0 && !tx.contains(&i) {
                        ap.backoff_counter -= 1;
                    }
                }
            }
        }
        for (ap, st) in self.aps.iter().zip(stats.iter_mut()) {
            st.queue_len = ap.queue_len;
        }
        let obs = self.observation(&stats);
        let reward = self.reward(&obs, window_slots);
        (obs, reward)
    }

    fn observation(&self, stats: &[ApObservation]) -> Observation {
        let aps = self
            .universe
            .iter()
            .map(|&id| match self.aps.iter().position(|a| a.ap_id == id) {
                Some(i) => ApObservation {
                    ap_id: id,
                    active: true,
                    ..stats[i]
                },
                None => ApObservation {
                    ap_id: id,
                    ..Default::default()
                },
            })
            .collect();
        Observation {
            window_slots: self.cfg.window_slots,
            n_aps: self.aps.len() as u8,
            aps,
        }
    }

    fn reward(&self, obs: &Observation, window_slots: u16) -> f64 {
        if window_slots == 0 {
            return 0.0;
        }
        let throughput = obs.total_delivered() as f64 / window_slots as f64;
        match self.cfg.reward {
            RewardKind::Throughput => throughput,
            RewardKind::JainWeighted => {
                let xs: Vec<f64> = obs
                    .aps
                    .iter()
                    .filter(|a| a.active)
                    .map(|a| a.delivered as f64)
                    .collect();
                let sum: f64 = xs.iter().sum();
                let sq: f64 = xs.iter().map(|x| x * x).sum();
                if sq == 0.0 {
                    0.0
                } else {
                    throughput * sum * sum / (xs.len() as f64 * sq)
                }
            }
        }
    }
}

/// Mean per-episode throughput when every AP keeps `config` for the whole
/// episode. Used as the static baseline.
pub fn evaluate_static(cfg: &EnvConfig, config: MacConfig, seed: u64, episodes: u64, steps: u16) -> Vec<f64> {
    let mut env = WirelessEnv::new(cfg.clone());
    (0..episodes)
        .map(|ep| {
            env.reset(seed, ep);
            let actions: BTreeMap<ApId, MacConfig> = env.ap_ids().iter().map(|&id| (id, config)).collect();
            let mut total = 0.0;
            for _ in 0..steps {
                env.apply_actions(&actions).expect("valid static config");
                total += env.step_window().1;
            }
            total / steps as f64
        })
        .collect()
}
