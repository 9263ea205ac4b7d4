//! DHT-backed name service.
//!
//! Records live on the `REPL` nodes whose ids are XOR-closest to the hash of
//! the name, computed from the origin's current membership view. Updates
//! and queries are ordinary packets through [`Network`]; retries happen once
//! per repair window and an operation gives up after `retry_windows`.
//!
//! Every node runs the same daemon, so the service keeps per-node stores and
//! caches in one place and dispatches on the receiving node.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::network::{Application, Delivery, Network};
use crate::routing::{derive_node_id, xor_distance, NodeId};
use crate::sim::{LogLevel, Micros, MICROS_PER_SEC};
use crate::topology::NodeIdx;

pub const REPL: usize = 2;
pub const CACHE_TTL_US: Micros = MICROS_PER_SEC;
pub const REFRESH_US: Micros = 5 * MICROS_PER_SEC;
/// Records not refreshed within three refresh periods expire.
pub const RECORD_TTL_US: Micros = 3 * REFRESH_US;
pub const RETRY_WINDOWS: u32 = 3;
pub const NAME_SUFFIX: &str = ".kira.internal";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DnsError {
    #[error("invalid name {name:?}: {reason}")]
    InvalidName { name: String, reason: &'static str },
    #[error("update failed: no replica of {0} reachable")]
    UpdateFailed(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("resolution timeout for {0}: no replica answered")]
    ResolutionTimeout(String),
}

impl DnsError {
    pub fn tag(&self) -> &'static str {
        match self {
            DnsError::InvalidName { .. } => "invalid-name",
            DnsError::UpdateFailed(_) => "update-failed",
            DnsError::NotFound(_) => "not-found",
            DnsError::ResolutionTimeout(_) => "resolution-timeout",
        }
    }
}

/// Lowercases and checks `label(.label)*.kira.internal`, labels being 1..=63
/// characters of `[a-z0-9-]` that neither start nor end with `-`.
pub fn validate_name(name: &str) -> Result<String, DnsError> {
    let bad = |reason| DnsError::InvalidName {
        name: name.to_string(),
        reason,
    };
    let lower = name.to_ascii_lowercase();
    let Some(prefix) = lower.strip_suffix(NAME_SUFFIX) else {
        return Err(bad("must end in .kira.internal"));
    };
    if prefix.is_empty() {
        return Err(bad("needs a label before the suffix"));
    }
    for label in prefix.split('.') {
        if label.is_empty() || label.len() > 63 {
            return Err(bad("labels must be 1..=63 characters"));
        }
        if !label
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
        {
            return Err(bad("labels may only contain letters, digits and '-'"));
        }
        if label.starts_with('-') || label.ends_with('-') {
            return Err(bad("labels must not start or end with '-'"));
        }
    }
    Ok(lower)
}

/// The `REPL` ids closest to the name's hash, nearest first.
pub fn replicas_for<'a, I>(name: &str, live_ids: I) -> Vec<NodeId>
where
    I: IntoIterator<Item = &'a NodeId>,
{
    replicas_for_n(name, live_ids, REPL)
}

pub fn replicas_for_n<'a, I>(name: &str, live_ids: I, repl: usize) -> Vec<NodeId>
where
    I: IntoIterator<Item = &'a NodeId>,
{
    let key = derive_node_id(name).expect("validated names are nonempty");
    let mut ids: Vec<NodeId> = live_ids.into_iter().copied().collect();
    ids.sort_unstable_by_key(|id| xor_distance(key, *id));
    ids.dedup();
    ids.truncate(repl);
    ids
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhtRecord {
    pub name: String,
    pub address: NodeId,
    pub version: u64,
    /// Id of the node that wrote this version; breaks version ties.
    pub origin: NodeId,
    pub expiry: Micros,
}

impl DhtRecord {
    pub fn supersedes(&self, other: &DhtRecord) -> bool {
        (self.version, self.origin) > (other.version, other.origin)
    }
}

pub type OpId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DnsMessage {
    Store { op: OpId, record: DhtRecord },
    StoreAck { op: OpId },
    Get { op: OpId, name: String },
    GetReply { op: OpId, record: Option<DhtRecord> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DnsTimer {
    Retry(OpId),
    Refresh(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateAck {
    pub version: u64,
    /// Replicas confirmed when the ack was issued.
    pub confirmed: usize,
    pub replicas: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Answer {
    pub address: NodeId,
    pub version: u64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Update(Result<UpdateAck, DnsError>),
    Query(Result<Answer, DnsError>),
}

/// Frontend answer: either immediate from the cache or an operation to
/// wait on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolve {
    Cached(Answer),
    Pending(OpId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DnsConfig {
    pub repl: usize,
    pub cache_ttl_us: Micros,
    /// `None` disables soft-state refresh.
    pub refresh_us: Option<Micros>,
    pub record_ttl_us: Micros,
    pub retry_windows: u32,
}

impl Default for DnsConfig {
    fn default() -> Self {
        Self {
            repl: REPL,
            cache_ttl_us: CACHE_TTL_US,
            refresh_us: Some(REFRESH_US),
            record_ttl_us: RECORD_TTL_US,
            retry_windows: RETRY_WINDOWS,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct NodeState {
    store: BTreeMap<String, DhtRecord>,
    cache: BTreeMap<String, (Answer, Micros)>,
    versions: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Update,
    Query { fill_cache: bool },
}

#[derive(Debug, Clone)]
struct PendingOp {
    kind: OpKind,
    origin: NodeIdx,
    name: String,
    record: Option<DhtRecord>,
    replicas: Vec<NodeId>,
    answered: BTreeSet<NodeId>,
    best: Option<DhtRecord>,
    attempt: u32,
    reported: bool,
    /// Background operations (refreshes) only log their result.
    background: bool,
}

#[derive(Debug, Clone)]
struct Registration {
    origin: NodeIdx,
    name: String,
    address: NodeId,
}

#[derive(Debug, Clone, Default)]
pub struct NameService {
    cfg: DnsConfig,
    nodes: Vec<NodeState>,
    ops: BTreeMap<OpId, PendingOp>,
    outcomes: BTreeMap<OpId, Outcome>,
    registrations: Vec<Registration>,
    next_op: OpId,
    packets_sent: u64,
}

/// An application that embeds a [`NameService`].
pub trait DnsHost {
    fn dns(&self) -> &NameService;
    fn dns_mut(&mut self) -> &mut NameService;
}

impl NameService {
    pub fn new(node_count: usize, cfg: DnsConfig) -> Self {
        Self {
            cfg,
            nodes: vec![NodeState::default(); node_count],
            ..Default::default()
        }
    }

    pub fn config(&self) -> DnsConfig {
        self.cfg
    }

    /// Records currently held by `node`, including expired ones.
    pub fn stored(&self, node: NodeIdx, name: &str) -> Option<&DhtRecord> {
        self.nodes[node].store.get(name)
    }

    pub fn holders(&self, name: &str) -> Vec<NodeIdx> {
        (0..self.nodes.len())
            .filter(|&n| self.nodes[n].store.contains_key(name))
            .collect()
    }

    pub fn packets_sent(&self) -> u64 {
        self.packets_sent
    }

    pub fn outcome(&self, op: OpId) -> Option<&Outcome> {
        self.outcomes.get(&op)
    }

    pub fn take_outcome(&mut self, op: OpId) -> Option<Outcome> {
        self.outcomes.remove(&op)
    }

    /// Write `name -> address` from `origin` with the next version.
    pub fn start_update<P, T>(
        &mut self,
        net: &mut Network<P, T>,
        origin: NodeIdx,
        name: &str,
        address: NodeId,
    ) -> Result<OpId, DnsError>
    where
        P: From<DnsMessage>,
        T: From<DnsTimer>,
    {
        self.update_inner(net, origin, name, address, false)
    }

    /// Register a name and keep refreshing it every `refresh_us`.
    pub fn register<P, T>(
        &mut self,
        net: &mut Network<P, T>,
        origin: NodeIdx,
        name: &str,
        address: NodeId,
    ) -> Result<OpId, DnsError>
    where
        P: From<DnsMessage>,
        T: From<DnsTimer>,
    {
        let op = self.update_inner(net, origin, name, address, false)?;
        if let Some(period) = self.cfg.refresh_us {
            let name = validate_name(name)?;
            self.registrations.push(Registration { origin, name, address });
            net.set_timer(period, T::from(DnsTimer::Refresh(self.registrations.len() - 1)));
        }
        Ok(op)
    }

    fn update_inner<P, T>(
        &mut self,
        net: &mut Network<P, T>,
        origin: NodeIdx,
        name: &str,
        address: NodeId,
        background: bool,
    ) -> Result<OpId, DnsError>
    where
        P: From<DnsMessage>,
        T: From<DnsTimer>,
    {
        let name = validate_name(name)?;
        let version = {
            let v = self.nodes[origin].versions.entry(name.clone()).or_insert(0);
            *v += 1;
            *v
        };
        let record = DhtRecord {
            name: name.clone(),
            address,
            version,
            origin: net.id(origin),
            expiry: net.now() + self.cfg.record_ttl_us,
        };
        let op = self.new_op(net, origin, OpKind::Update, name, Some(record), background);
        self.transmit(net, op);
        Ok(op)
    }

    /// Query the replicas directly, bypassing the cache.
    pub fn start_query<P, T>(&mut self, net: &mut Network<P, T>, origin: NodeIdx, name: &str) -> Result<OpId, DnsError>
    where
        P: From<DnsMessage>,
        T: From<DnsTimer>,
    {
        let name = validate_name(name)?;
        let op = self.new_op(net, origin, OpKind::Query { fill_cache: false }, name, None, false);
        self.transmit(net, op);
        Ok(op)
    }

    /// The node-local DNS frontend: answer from the cache when fresh,
    /// otherwise query the DHT and cache a positive answer.
    pub fn resolve<P, T>(&mut self, net: &mut Network<P, T>, node: NodeIdx, name: &str) -> Result<Resolve, DnsError>
    where
        P: From<DnsMessage>,
        T: From<DnsTimer>,
    {
        let name = validate_name(name)?;
        if let Some((answer, expires)) = self.nodes[node].cache.get(&name) {
            if net.now() < *expires {
                let answer = Answer {
                    from_cache: true,
                    ..*answer
                };
                let result = format!("cache-hit v{} {}", answer.version, answer.address.to_ipv6());
                net.log_event(LogLevel::Info, "DNS", &[&"query", &name, &result]);
                return Ok(Resolve::Cached(answer));
            }
        }
        let op = self.new_op(net, node, OpKind::Query { fill_cache: true }, name, None, false);
        self.transmit(net, op);
        Ok(Resolve::Pending(op))
    }

    fn new_op<P, T>(
        &mut self,
        net: &Network<P, T>,
        origin: NodeIdx,
        kind: OpKind,
        name: String,
        record: Option<DhtRecord>,
        background: bool,
    ) -> OpId {
        let replicas = replicas_for_n(&name, net.routing().table(origin).view().keys(), self.cfg.repl);
        let op = self.next_op;
        self.next_op += 1;
        self.ops.insert(
            op,
            PendingOp {
                kind,
                origin,
                name,
                record,
                replicas,
                answered: BTreeSet::new(),
                best: None,
                attempt: 0,
                reported: false,
                background,
            },
        );
        op
    }

    /// Send to every replica that has not answered yet, then arm the retry
    /// timer. A replica that is the origin itself is served locally.
    fn transmit<P, T>(&mut self, net: &mut Network<P, T>, op: OpId)
    where
        P: From<DnsMessage>,
        T: From<DnsTimer>,
    {
        let Some(pending) = self.ops.get(&op) else { return };
        let origin = pending.origin;
        let own_id = net.id(origin);
        let targets: Vec<NodeId> = pending
            .replicas
            .iter()
            .copied()
            .filter(|r| !pending.answered.contains(r))
            .collect();
        for replica in targets {
            let msg = match &self.ops[&op].record {
                Some(record) => DnsMessage::Store {
                    op,
                    record: record.clone(),
                },
                None => DnsMessage::Get {
                    op,
                    name: self.ops[&op].name.clone(),
                },
            };
            if replica == own_id {
                let now = net.now();
                let reply = self.serve(origin, msg, now);
                self.on_reply(net, own_id, reply);
            } else {
                self.packets_sent += 1;
                net.send(origin, replica, P::from(msg));
            }
        }
        if self.ops.contains_key(&op) {
            net.set_timer(net.repair_window_us(), T::from(DnsTimer::Retry(op)));
        }
    }

    /// Replica side: apply a request to the local store and build the reply.
    fn serve(&mut self, node: NodeIdx, msg: DnsMessage, now: Micros) -> DnsMessage {
        let store = &mut self.nodes[node].store;
        match msg {
            DnsMessage::Store { op, record } => {
                let keep = store.get(&record.name).is_some_and(|old| !record.supersedes(old));
                if !keep {
                    store.insert(record.name.clone(), record);
                }
                DnsMessage::StoreAck { op }
            }
            DnsMessage::Get { op, name } => DnsMessage::GetReply {
                op,
                record: store.get(&name).filter(|r| r.expiry > now).cloned(),
            },
            other => other,
        }
    }

    fn on_reply<P, T>(&mut self, net: &mut Network<P, T>, from: NodeId, msg: DnsMessage) {
        let (op, record) = match msg {
            DnsMessage::StoreAck { op } => (op, None),
            DnsMessage::GetReply { op, record } => (op, record),
            _ => return,
        };
        let Some(pending) = self.ops.get_mut(&op) else { return };
        if !pending.replicas.contains(&from) || !pending.answered.insert(from) {
            return;
        }
        if let Some(r) = record {
            if pending.best.as_ref().is_none_or(|b| r.supersedes(b)) {
                pending.best = Some(r);
            }
        }
        let all = pending.answered.len() == pending.replicas.len();
        match pending.kind {
            OpKind::Update => {
                if !pending.reported {
                    self.report_update(net, op);
                }
                if all {
                    self.ops.remove(&op);
                }
            }
            OpKind::Query { .. } => {
                if all {
                    self.finish(net, op);
                }
            }
        }
    }

    fn report_update<P, T>(&mut self, net: &mut Network<P, T>, op: OpId) {
        let pending = self.ops.get_mut(&op).expect("live op");
        pending.reported = true;
        let record = pending.record.as_ref().expect("update carries a record");
        let result = if pending.answered.is_empty() {
            Err(DnsError::UpdateFailed(pending.name.clone()))
        } else {
            Ok(UpdateAck {
                version: record.version,
                confirmed: pending.answered.len(),
                replicas: pending.replicas.len(),
            })
        };
        let text = match &result {
            Ok(a) => format!("ok v{} {}/{}", a.version, a.confirmed, a.replicas),
            Err(e) => e.tag().to_string(),
        };
        let name = pending.name.clone();
        let background = pending.background;
        net.log_event(LogLevel::Info, "DNS", &[&"update", &name, &text]);
        if !background {
            self.outcomes.insert(op, Outcome::Update(result));
        }
    }

    fn finish<P, T>(&mut self, net: &mut Network<P, T>, op: OpId) {
        let Some(pending) = self.ops.remove(&op) else { return };
        match pending.kind {
            OpKind::Update => {
                if !pending.reported {
                    self.ops.insert(op, pending);
                    self.report_update(net, op);
                    self.ops.remove(&op);
                }
            }
            OpKind::Query { fill_cache } => {
                let result = match (&pending.best, pending.answered.is_empty()) {
                    (Some(r), _) => Ok(Answer {
                        address: r.address,
                        version: r.version,
                        from_cache: false,
                    }),
                    (None, false) => Err(DnsError::NotFound(pending.name.clone())),
                    (None, true) => Err(DnsError::ResolutionTimeout(pending.name.clone())),
                };
                if let (Ok(answer), true) = (&result, fill_cache) {
                    let expires = net.now() + self.cfg.cache_ttl_us;
                    self.nodes[pending.origin]
                        .cache
                        .insert(pending.name.clone(), (*answer, expires));
                }
                let text = match &result {
                    Ok(a) => format!("ok v{} {}", a.version, a.address.to_ipv6()),
                    Err(e) => e.tag().to_string(),
                };
                net.log_event(LogLevel::Info, "DNS", &[&"query", &pending.name, &text]);
                self.outcomes.insert(op, Outcome::Query(result));
            }
        }
    }

    pub fn handle_delivery<P, T>(&mut self, net: &mut Network<P, T>, at: NodeIdx, src: NodeIdx, msg: DnsMessage)
    where
        P: From<DnsMessage>,
    {
        match msg {
            DnsMessage::Store { .. } | DnsMessage::Get { .. } => {
                let now = net.now();
                let reply = self.serve(at, msg, now);
                self.packets_sent += 1;
                let to = net.id(src);
                net.send(at, to, P::from(reply));
            }
            reply => {
                let from = net.id(src);
                self.on_reply(net, from, reply);
            }
        }
    }

    pub fn handle_timer<P, T>(&mut self, net: &mut Network<P, T>, timer: DnsTimer)
    where
        P: From<DnsMessage>,
        T: From<DnsTimer>,
    {
        match timer {
            DnsTimer::Retry(op) => {
                let Some(pending) = self.ops.get_mut(&op) else { return };
                pending.attempt += 1;
                if pending.attempt >= self.cfg.retry_windows {
                    self.finish(net, op);
                } else {
                    self.transmit(net, op);
                }
            }
            DnsTimer::Refresh(i) => {
                let reg = self.registrations[i].clone();
                // Names were validated at registration.
                let _ = self.update_inner(net, reg.origin, &reg.name, reg.address, true);
                if let Some(period) = self.cfg.refresh_us {
                    net.set_timer(period, T::from(DnsTimer::Refresh(i)));
                }
            }
        }
    }
}

impl Application<DnsMessage, DnsTimer> for NameService {
    fn on_deliver(&mut self, net: &mut Network<DnsMessage, DnsTimer>, d: Delivery<DnsMessage>) {
        self.handle_delivery(net, d.at, d.src, d.payload);
    }

    fn on_timer(&mut self, net: &mut Network<DnsMessage, DnsTimer>, timer: DnsTimer) {
        self.handle_timer(net, timer);
    }
}

impl DnsHost for NameService {
    fn dns(&self) -> &NameService {
        self
    }

    fn dns_mut(&mut self) -> &mut NameService {
        self
    }
}

fn wait<P, T, A>(net: &mut Network<P, T>, app: &mut A, op: OpId) -> Option<Outcome>
where
    A: Application<P, T> + DnsHost,
{
    let windows = app.dns().cfg.retry_windows as Micros + 1;
    let deadline = net.now() + windows * net.repair_window_us();
    net.run_until_cond(app, deadline, |a| a.dns().outcome(op).is_some());
    app.dns_mut().take_outcome(op)
}

/// Run an update to completion (first confirmation or give-up).
pub fn dns_update<P, T, A>(
    net: &mut Network<P, T>,
    app: &mut A,
    origin: NodeIdx,
    name: &str,
    address: NodeId,
) -> Result<UpdateAck, DnsError>
where
    P: From<DnsMessage>,
    T: From<DnsTimer>,
    A: Application<P, T> + DnsHost,
{
    let op = app.dns_mut().start_update(net, origin, name, address)?;
    match wait(net, app, op) {
        Some(Outcome::Update(r)) => r,
        _ => Err(DnsError::UpdateFailed(name.to_string())),
    }
}

pub fn dns_register<P, T, A>(
    net: &mut Network<P, T>,
    app: &mut A,
    origin: NodeIdx,
    name: &str,
    address: NodeId,
) -> Result<UpdateAck, DnsError>
where
    P: From<DnsMessage>,
    T: From<DnsTimer>,
    A: Application<P, T> + DnsHost,
{
    let op = app.dns_mut().register(net, origin, name, address)?;
    match wait(net, app, op) {
        Some(Outcome::Update(r)) => r,
        _ => Err(DnsError::UpdateFailed(name.to_string())),
    }
}

pub fn dns_query<P, T, A>(net: &mut Network<P, T>, app: &mut A, origin: NodeIdx, name: &str) -> Result<Answer, DnsError>
where
    P: From<DnsMessage>,
    T: From<DnsTimer>,
    A: Application<P, T> + DnsHost,
{
    let op = app.dns_mut().start_query(net, origin, name)?;
    match wait(net, app, op) {
        Some(Outcome::Query(r)) => r,
        _ => Err(DnsError::ResolutionTimeout(name.to_string())),
    }
}

/// Ask `node`'s local frontend.
pub fn local_dns_frontend<P, T, A>(
    net: &mut Network<P, T>,
    app: &mut A,
    node: NodeIdx,
    name: &str,
) -> Result<Answer, DnsError>
where
    P: From<DnsMessage>,
    T: From<DnsTimer>,
    A: Application<P, T> + DnsHost,
{
    match app.dns_mut().resolve(net, node, name)? {
        Resolve::Cached(a) => Ok(a),
        Resolve::Pending(op) => match wait(net, app, op) {
            Some(Outcome::Query(r)) => r,
            _ => Err(DnsError::ResolutionTimeout(name.to_string())),
        },
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (v{})", self.address.to_ipv6(), self.version)
    }
}
