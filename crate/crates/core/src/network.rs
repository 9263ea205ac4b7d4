//! The routed network as a discrete-event simulation.
//!
//! [`Network`] owns the topology, the event queue and the routing state.
//! Packets move hop by hop as `Arrival` events; a link that fails while a
//! packet is on it drops that packet. Link failures invalidate affected
//! contacts immediately and schedule a re-flood per affected node, which
//! completes after the flood's round-trip time.
//!
//! Upper layers plug in through [`Application`]: they receive deliveries and
//! their own timers, and send packets/timers back through the network handle.

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

use crate::routing::{flood_arrival, NextHop, NodeId, Routing, RoutingConfig, RoutingError};
use crate::sim::{EventLog, EventQueue, LogLevel, Micros, SimError};
use crate::topology::{LinkIdx, LinkState, NodeIdx, Topology, TopologyError};

pub type PacketId = u64;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct Packet<P> {
    pub id: PacketId,
    pub src: NodeIdx,
    pub dst: NodeId,
    pub payload: P,
    pub sent_at: Micros,
    /// Physical nodes visited so far.
    pub trace: Vec<NodeIdx>,
    pub greedy_steps: usize,
    segment: VecDeque<NodeIdx>,
}

impl<P> Packet<P> {
    pub fn hops(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    NoProgress,
    LinkDown,
    InFlight,
    Injected,
    StepLimit,
}

impl DropReason {
    fn as_str(self) -> &'static str {
        match self {
            DropReason::NoProgress => "no-progress",
            DropReason::LinkDown => "link-down",
            DropReason::InFlight => "in-flight",
            DropReason::Injected => "injected",
            DropReason::StepLimit => "step-limit",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Delivery<P> {
    pub packet_id: PacketId,
    pub src: NodeIdx,
    pub at: NodeIdx,
    pub payload: P,
    pub hops: usize,
    pub latency_us: Micros,
    pub greedy_steps: usize,
    pub path: Vec<NodeIdx>,
}

#[derive(Debug)]
pub enum NetEvent<P, T> {
    Arrival {
        node: NodeIdx,
        via: Option<(LinkIdx, u64)>,
        packet: Packet<P>,
    },
    LinkFail(LinkIdx),
    LinkRestore(LinkIdx),
    RepairDone(NodeIdx),
    App(T),
}

pub trait Application<P, T> {
    fn on_deliver(&mut self, net: &mut Network<P, T>, delivery: Delivery<P>);
    fn on_timer(&mut self, net: &mut Network<P, T>, timer: T);
    fn on_drop(&mut self, _net: &mut Network<P, T>, _packet: &Packet<P>, _reason: DropReason) {}
}

/// An application that ignores everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoApp;

impl<P, T> Application<P, T> for NoApp {
    fn on_deliver(&mut self, _: &mut Network<P, T>, _: Delivery<P>) {}
    fn on_timer(&mut self, _: &mut Network<P, T>, _: T) {}
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub repairs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryOutcome {
    Delivered {
        hops: usize,
        latency_us: Micros,
        greedy_steps: usize,
        path: Vec<NodeIdx>,
    },
    Unreachable {
        attempts: usize,
    },
}

type LossFilter<P> = Box<dyn FnMut(&Packet<P>) -> bool>;

pub struct Network<P, T> {
    topo: Topology,
    routing: Routing,
    queue: EventQueue<NetEvent<P, T>>,
    epochs: Vec<u64>,
    next_packet: PacketId,
    log: EventLog,
    loss_filter: Option<LossFilter<P>>,
    repairing: BTreeSet<NodeIdx>,
    last_repair_done: Option<Micros>,
    stats: NetStats,
}

impl<P, T> Network<P, T> {
    /// Assign ids and bootstrap routing. The clock starts at 0; callers that
    /// want to model the convergence delay advance it explicitly.
    pub fn new(topo: Topology, cfg: RoutingConfig, level: LogLevel) -> Result<Self, NetError> {
        let routing = Routing::bootstrap(&topo, cfg)?;
        let epochs = vec![0; topo.links().len()];
        Ok(Self {
            topo,
            routing,
            queue: EventQueue::new(),
            epochs,
            next_packet: 0,
            log: EventLog::new(level),
            loss_filter: None,
            repairing: BTreeSet::new(),
            last_repair_done: None,
            stats: NetStats::default(),
        })
    }

    pub fn now(&self) -> Micros {
        self.queue.now()
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn routing(&self) -> &Routing {
        &self.routing
    }

    pub fn id(&self, node: NodeIdx) -> NodeId {
        self.routing.id(node)
    }

    pub fn index_of(&self, id: NodeId) -> Option<NodeIdx> {
        self.routing.index_of(id)
    }

    pub fn name(&self, node: NodeIdx) -> &str {
        self.topo.name(node)
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn repair_window_us(&self) -> Micros {
        self.routing.config().repair_window_us
    }

    /// True while any node is still re-flooding after a link change.
    pub fn is_repairing(&self) -> bool {
        !self.repairing.is_empty()
    }

    pub fn last_repair_done(&self) -> Option<Micros> {
        self.last_repair_done
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn log_event(&mut self, level: LogLevel, kind: &str, fields: &[&dyn std::fmt::Display]) {
        let now = self.now();
        self.log.record(level, now, kind, fields);
    }

    pub fn take_log(&mut self) -> EventLog {
        let level = self.log.level();
        std::mem::replace(&mut self.log, EventLog::new(level))
    }

    /// Install a predicate deciding, per packet about to be delivered,
    /// whether to drop it instead (fault injection).
    pub fn set_loss_filter(&mut self, filter: impl FnMut(&Packet<P>) -> bool + 'static) {
        self.loss_filter = Some(Box::new(filter));
    }

    pub fn clear_loss_filter(&mut self) {
        self.loss_filter = None;
    }

    /// Inject a packet at `src`, addressed to `dst`. It is processed in the
    /// event loop at the current time.
    pub fn send(&mut self, src: NodeIdx, dst: NodeId, payload: P) -> PacketId {
        let id = self.next_packet;
        self.next_packet += 1;
        self.stats.sent += 1;
        let packet = Packet {
            id,
            src,
            dst,
            payload,
            sent_at: self.now(),
            trace: Vec::new(),
            greedy_steps: 0,
            segment: VecDeque::new(),
        };
        self.queue.schedule_in(
            0,
            NetEvent::Arrival {
                node: src,
                via: None,
                packet,
            },
        );
        id
    }

    pub fn set_timer(&mut self, delay: Micros, timer: T) {
        self.queue.schedule_in(delay, NetEvent::App(timer));
    }

    pub fn set_timer_at(&mut self, at: Micros, timer: T) -> Result<(), SimError> {
        self.queue.schedule(at, NetEvent::App(timer)).map(|_| ())
    }

    /// Schedule a failure of link `a`–`b` at time `at`.
    pub fn fail_link(&mut self, a: &str, b: &str, at: Micros) -> Result<(), NetError> {
        let l = self.topo.find_link(a, b)?;
        self.queue.schedule(at, NetEvent::LinkFail(l))?;
        Ok(())
    }

    pub fn restore_link(&mut self, a: &str, b: &str, at: Micros) -> Result<(), NetError> {
        let l = self.topo.find_link(a, b)?;
        self.queue.schedule(at, NetEvent::LinkRestore(l))?;
        Ok(())
    }

    /// Fail every link of `name` at `at`, isolating the node.
    pub fn fail_node(&mut self, name: &str, at: Micros) -> Result<(), NetError> {
        let n = self.topo.require_node(name)?;
        let links: Vec<LinkIdx> = self.topo.incident(n).iter().map(|&(_, l)| l).collect();
        for l in links {
            self.queue.schedule(at, NetEvent::LinkFail(l))?;
        }
        Ok(())
    }

    pub fn advance_to(&mut self, t: Micros) -> Result<(), NetError> {
        if let Some(next) = self.queue.peek_time() {
            if next <= t {
                return Err(NetError::Sim(SimError::PastHorizon { t_end: next, now: t }));
            }
        }
        self.queue.advance_to(t)?;
        Ok(())
    }

    /// Process every event up to `t_end` and set the clock to `t_end`.
    pub fn run_until<A: Application<P, T>>(&mut self, t_end: Micros, app: &mut A) -> usize {
        let t_end = t_end.max(self.now());
        let mut processed = 0;
        while let Some(ev) = self.queue.pop_until(t_end) {
            self.dispatch(ev.kind, app);
            processed += 1;
        }
        self.queue.advance_to(t_end).expect("horizon not in the past");
        processed
    }

    /// Process events one by one until `done(app)` holds or the next event
    /// lies beyond `deadline`. Returns whether `done` was reached.
    pub fn run_until_cond<A, F>(&mut self, app: &mut A, deadline: Micros, mut done: F) -> bool
    where
        A: Application<P, T>,
        F: FnMut(&A) -> bool,
    {
        loop {
            if done(app) {
                return true;
            }
            match self.queue.pop_until(deadline) {
                Some(ev) => self.dispatch(ev.kind, app),
                None => return done(app),
            }
        }
    }

    fn dispatch<A: Application<P, T>>(&mut self, ev: NetEvent<P, T>, app: &mut A) {
        match ev {
            NetEvent::Arrival { node, via, packet } => self.on_arrival(node, via, packet, app),
            NetEvent::LinkFail(l) => self.on_link_change(l, LinkState::Down),
            NetEvent::LinkRestore(l) => self.on_link_change(l, LinkState::Up),
            NetEvent::RepairDone(n) => self.on_repair_done(n),
            NetEvent::App(t) => app.on_timer(self, t),
        }
    }

    fn drop_packet<A: Application<P, T>>(&mut self, packet: Packet<P>, at: NodeIdx, reason: DropReason, app: &mut A) {
        self.stats.dropped += 1;
        if self.log.enabled(LogLevel::Trace) {
            let src = self.topo.name(packet.src).to_string();
            let here = self.topo.name(at).to_string();
            self.log_event(LogLevel::Trace, "DROP", &[&src, &packet.dst, &here, &reason.as_str()]);
        }
        app.on_drop(self, &packet, reason);
    }

    fn on_arrival<A: Application<P, T>>(
        &mut self,
        node: NodeIdx,
        via: Option<(LinkIdx, u64)>,
        mut packet: Packet<P>,
        app: &mut A,
    ) {
        if let Some((l, epoch)) = via {
            if self.epochs[l] != epoch || !self.topo.link(l).is_up() {
                self.drop_packet(packet, node, DropReason::InFlight, app);
                return;
            }
        }
        packet.trace.push(node);
        if self.routing.id(node) == packet.dst {
            if let Some(filter) = self.loss_filter.as_mut() {
                if filter(&packet) {
                    self.drop_packet(packet, node, DropReason::Injected, app);
                    return;
                }
            }
            self.stats.delivered += 1;
            let latency_us = self.now() - packet.sent_at;
            if self.log.enabled(LogLevel::Trace) {
                let src = self.topo.name(packet.src).to_string();
                let dst = self.topo.name(node).to_string();
                self.log_event(LogLevel::Trace, "ROUTE", &[&src, &dst, &packet.hops(), &latency_us]);
            }
            let delivery = Delivery {
                packet_id: packet.id,
                src: packet.src,
                at: node,
                hops: packet.hops(),
                latency_us,
                greedy_steps: packet.greedy_steps,
                path: packet.trace,
                payload: packet.payload,
            };
            app.on_deliver(self, delivery);
            return;
        }
        if packet.segment.is_empty() {
            match self.routing.table(node).next_hop(packet.dst) {
                Ok(NextHop::Contact(c)) => {
                    packet.segment = c.path[1..].iter().copied().collect();
                    packet.greedy_steps += 1;
                }
                Ok(NextHop::Local) => unreachable!("local delivery handled above"),
                Err(_) => {
                    self.drop_packet(packet, node, DropReason::NoProgress, app);
                    return;
                }
            }
            if packet.greedy_steps > self.topo.node_count() {
                self.drop_packet(packet, node, DropReason::StepLimit, app);
                return;
            }
        }
        let next = packet.segment.pop_front().expect("nonempty segment");
        match self.topo.link_between(node, next) {
            Some(l) if self.topo.link(l).is_up() => {
                let lat = self.topo.link(l).latency_us;
                let epoch = self.epochs[l];
                self.queue.schedule_in(
                    lat,
                    NetEvent::Arrival {
                        node: next,
                        via: Some((l, epoch)),
                        packet,
                    },
                );
            }
            _ => self.drop_packet(packet, node, DropReason::LinkDown, app),
        }
    }

    fn on_link_change(&mut self, l: LinkIdx, state: LinkState) {
        if self.topo.link(l).state == state {
            return;
        }
        self.topo.set_link_state(l, state);
        self.epochs[l] += 1;
        let (a, b) = (self.topo.link(l).a, self.topo.link(l).b);
        let (na, nb) = (self.topo.name(a).to_string(), self.topo.name(b).to_string());
        let kind = match state {
            LinkState::Down => "LINK_FAIL",
            LinkState::Up => "LINK_RESTORE",
        };
        self.log_event(LogLevel::Info, kind, &[&na, &nb]);
        let affected: Vec<NodeIdx> = match state {
            LinkState::Down => self.routing.invalidate_all(&self.topo),
            LinkState::Up => {
                let comp = self.topo.components();
                (0..self.topo.node_count()).filter(|&n| comp[n] == comp[a]).collect()
            }
        };
        let notice = flood_arrival(&self.topo, &[a, b]);
        for n in affected {
            if self.repairing.insert(n) {
                let d = self.routing.repair_duration(&self.topo, n, &notice);
                self.queue.schedule_in(d, NetEvent::RepairDone(n));
            }
        }
    }

    fn on_repair_done(&mut self, n: NodeIdx) {
        self.repairing.remove(&n);
        self.routing.rediscover(&self.topo, n);
        self.stats.repairs += 1;
        let name = self.topo.name(n).to_string();
        let contacts = self.routing.table(n).contact_count();
        self.log_event(LogLevel::Info, "REPAIR", &[&name, &contacts]);
        if self.repairing.is_empty() {
            self.last_repair_done = Some(self.now());
            let converged = self.routing.refresh_convergence(&self.topo);
            self.log_event(LogLevel::Info, "CONVERGED", &[&converged]);
        }
    }

    /// Walk the current tables without simulating packets.
    pub fn trace_route(
        &self,
        src: NodeIdx,
        dst: NodeId,
    ) -> Result<crate::routing::RouteTrace, crate::routing::RouteError> {
        self.routing.walk(&self.topo, src, dst)
    }

    /// Send one packet through the event loop and wait for it. A dropped
    /// packet is retried once per repair window; after three windows the
    /// destination is reported unreachable. Other events that fire meanwhile
    /// are forwarded to `app`.
    pub fn route_packet<A: Application<P, T>>(
        &mut self,
        src: NodeIdx,
        dst: NodeId,
        payload: P,
        app: &mut A,
    ) -> DeliveryOutcome
    where
        P: Clone,
    {
        const WINDOWS: usize = 3;
        let window = self.repair_window_us();
        let give_up = self.now() + WINDOWS as Micros * window;
        let mut attempts = 0;
        while attempts < WINDOWS {
            attempts += 1;
            let attempt_start = self.now();
            let id = self.send(src, dst, payload.clone());
            let mut probe = Probe {
                inner: app,
                id,
                outcome: None,
            };
            self.run_until_cond(&mut probe, give_up, |p| p.outcome.is_some());
            match probe.outcome.take() {
                Some(Ok(d)) => {
                    return DeliveryOutcome::Delivered {
                        hops: d.0,
                        latency_us: d.1,
                        greedy_steps: d.2,
                        path: d.3,
                    }
                }
                Some(Err(())) => {
                    let retry_at = (attempt_start + window).min(give_up);
                    self.run_until(retry_at, app);
                }
                None => break,
            }
        }
        DeliveryOutcome::Unreachable { attempts }
    }
}

type ProbeResult = Result<(usize, Micros, usize, Vec<NodeIdx>), ()>;

struct Probe<'a, A> {
    inner: &'a mut A,
    id: PacketId,
    outcome: Option<ProbeResult>,
}

impl<P, T, A: Application<P, T>> Application<P, T> for Probe<'_, A> {
    fn on_deliver(&mut self, net: &mut Network<P, T>, d: Delivery<P>) {
        if d.packet_id == self.id {
            self.outcome = Some(Ok((d.hops, d.latency_us, d.greedy_steps, d.path)));
        } else {
            self.inner.on_deliver(net, d);
        }
    }

    fn on_timer(&mut self, net: &mut Network<P, T>, timer: T) {
        self.inner.on_timer(net, timer);
    }

    fn on_drop(&mut self, net: &mut Network<P, T>, packet: &Packet<P>, reason: DropReason) {
        if packet.id == self.id {
            self.outcome = Some(Err(()));
        } else {
            self.inner.on_drop(net, packet, reason);
        }
    }
}
