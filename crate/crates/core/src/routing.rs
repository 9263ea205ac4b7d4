//! ID-based routing over the physical topology.
//!
//! Every node gets a flat 128-bit [`NodeId`] hashed from its name. Each node
//! keeps a Kademlia-style table: 128 XOR buckets of source-routed contacts.
//! Contacts are learned by flooding: an expanding-ring search starting at
//! `ttl` hops and doubling until the flood frontier is exhausted, so a node
//! ends up with at least one contact in every bucket that is nonempty within
//! its component. That property is what makes greedy forwarding complete:
//! for any destination there is always a contact strictly closer in XOR
//! distance, until the destination itself is reached.
//!
//! Repair after a link change: the endpoints see it at once and flood a
//! notice; every node the notice reaches re-announces itself with a one-way
//! flood carrying its path, and receivers learn the reversed route. A node's
//! table is rebuilt once the announcements of everything it knows about
//! have arrived, so no reply has to travel back.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::net::Ipv6Addr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sim::{Micros, MICROS_PER_MS};
use crate::topology::{LinkIdx, NodeIdx, Topology};

pub const ID_BITS: usize = 128;
pub const K_BUCKET: usize = 4;
pub const DEFAULT_FLOOD_TTL: u32 = 8;
pub const DEFAULT_REPAIR_WINDOW_US: Micros = 50 * MICROS_PER_MS;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoutingError {
    #[error("node name must not be empty")]
    EmptyName,
    #[error("node id collision between {0:?} and {1:?}")]
    IdCollision(String, String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("no contact closer to {dst} at {at}")]
    NoProgress { at: String, dst: NodeId },
    #[error("source route from {at} crosses down link {link}")]
    LinkDown { at: String, link: LinkIdx },
    #[error("forwarding loop guard tripped after {0} steps")]
    StepLimit(usize),
}

/// Flat identifier in the 128-bit ID space.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u128);

impl NodeId {
    /// Cosmetic IPv6-looking rendering of the id, for logs.
    pub fn to_ipv6(self) -> Ipv6Addr {
        Ipv6Addr::from(self.0)
    }

    pub fn distance(self, other: NodeId) -> u128 {
        xor_distance(self, other)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({:032x})", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

/// First 128 bits (big-endian) of SHA-256 over the UTF-8 name.
pub fn derive_node_id(name: &str) -> Result<NodeId, RoutingError> {
    if name.is_empty() {
        return Err(RoutingError::EmptyName);
    }
    let digest = Sha256::digest(name.as_bytes());
    let mut buf = [0u8; 16];
    buf.copy_from_slice(&digest[..16]);
    Ok(NodeId(u128::from_be_bytes(buf)))
}

pub fn xor_distance(a: NodeId, b: NodeId) -> u128 {
    a.0 ^ b.0
}

/// Index of the highest differing bit, `None` for equal ids.
pub fn bucket_index(owner: NodeId, other: NodeId) -> Option<usize> {
    let d = xor_distance(owner, other);
    (d != 0).then(|| ID_BITS - 1 - d.leading_zeros() as usize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contact {
    pub id: NodeId,
    pub node: NodeIdx,
    /// Source route from the owner to the contact, both endpoints included.
    pub path: Vec<NodeIdx>,
    pub latency_us: Micros,
    pub bucket: usize,
}

impl Contact {
    pub fn hops(&self) -> usize {
        self.path.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextHop<'a> {
    Local,
    Contact(&'a Contact),
}

/// Result of one flood from a node: shortest (hops, latency) paths to every
/// node it reached, and how long the search took.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub reached: Vec<(NodeIdx, Vec<NodeIdx>, Micros)>,
    pub rings: Vec<u32>,
    pub duration_us: Micros,
}

/// Expanding-ring flood from `origin` over Up links.
pub fn discover(topo: &Topology, origin: NodeIdx, initial_ttl: u32) -> Discovery {
    let mut ttl = initial_ttl.max(1);
    let mut rings = Vec::new();
    let mut duration_us = 0;
    loop {
        rings.push(ttl);
        let (reached, exhausted) = bounded_shortest_paths(topo, origin, ttl);
        let farthest = reached.iter().map(|r| r.2).max().unwrap_or(0);
        duration_us += 2 * farthest;
        if exhausted {
            return Discovery {
                reached,
                rings,
                duration_us,
            };
        }
        ttl = ttl.saturating_mul(2);
    }
}

/// Earliest arrival of a flood started at every node of `sources` at once,
/// over Up links. `None` for nodes it cannot reach.
pub fn flood_arrival(topo: &Topology, sources: &[NodeIdx]) -> Vec<Option<Micros>> {
    let mut best: Vec<Option<Micros>> = vec![None; topo.node_count()];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        best[s] = Some(0);
        heap.push(Reverse((0 as Micros, s)));
    }
    while let Some(Reverse((t, u))) = heap.pop() {
        if best[u].is_some_and(|b| b < t) {
            continue;
        }
        for (v, l) in topo.up_neighbors(u) {
            let tv = t + topo.link(l).latency_us;
            if best[v].is_none_or(|b| tv < b) {
                best[v] = Some(tv);
                heap.push(Reverse((tv, v)));
            }
        }
    }
    best
}

/// Lexicographic (hops, latency) shortest paths limited to `ttl` hops.
/// The flag reports whether the search frontier was exhausted inside the limit.
fn bounded_shortest_paths(topo: &Topology, origin: NodeIdx, ttl: u32) -> (Vec<(NodeIdx, Vec<NodeIdx>, Micros)>, bool) {
    let n = topo.node_count();
    let mut best: Vec<Option<(u32, Micros)>> = vec![None; n];
    let mut parent: Vec<Option<NodeIdx>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    best[origin] = Some((0, 0));
    heap.push(Reverse((0u32, 0 as Micros, origin)));
    while let Some(Reverse((hops, lat, u))) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for (v, link) in topo.up_neighbors(u) {
            if done[v] {
                continue;
            }
            if hops == ttl {
                continue;
            }
            let cand = (hops + 1, lat + topo.link(link).latency_us);
            if best[v].is_none_or(|b| cand < b) {
                best[v] = Some(cand);
                parent[v] = Some(u);
                heap.push(Reverse((cand.0, cand.1, v)));
            }
        }
    }
    let exhausted = (0..n)
        .filter(|&u| done[u] && best[u].is_some_and(|b| b.0 == ttl))
        .all(|u| topo.up_neighbors(u).all(|(v, _)| done[v]));
    let mut reached = Vec::new();
    for v in 0..n {
        if v == origin || !done[v] {
            continue;
        }
        let mut path = vec![v];
        let mut cur = v;
        while let Some(p) = parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        reached.push((v, path, best[v].expect("reached").1));
    }
    (reached, exhausted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTable {
    owner: NodeId,
    owner_idx: NodeIdx,
    buckets: Vec<Vec<Contact>>,
    neighbors: BTreeSet<NodeIdx>,
    /// Membership learned by the last flood.
    view: BTreeMap<NodeId, NodeIdx>,
}

impl RoutingTable {
    pub fn empty(owner: NodeId, owner_idx: NodeIdx) -> Self {
        let mut view = BTreeMap::new();
        view.insert(owner, owner_idx);
        Self {
            owner,
            owner_idx,
            buckets: vec![Vec::new(); ID_BITS],
            neighbors: BTreeSet::new(),
            view,
        }
    }

    /// Fill a table from a flood result. Each bucket keeps the `K_BUCKET`
    /// contacts with the shortest paths (ties by id); direct neighbors are
    /// never evicted, so a bucket holds more than `K_BUCKET` entries only when
    /// it has more than that many neighbors.
    pub fn from_discovery(topo: &Topology, ids: &[NodeId], owner_idx: NodeIdx, discovery: &Discovery) -> Self {
        let mut table = Self::empty(ids[owner_idx], owner_idx);
        table.neighbors = topo.up_neighbors(owner_idx).map(|(v, _)| v).collect();
        for (node, path, latency_us) in &discovery.reached {
            let id = ids[*node];
            table.view.insert(id, *node);
            let bucket = bucket_index(table.owner, id).expect("distinct ids");
            table.buckets[bucket].push(Contact {
                id,
                node: *node,
                path: path.clone(),
                latency_us: *latency_us,
                bucket,
            });
        }
        for bucket in &mut table.buckets {
            bucket.sort_by_key(|c| (c.path.len(), c.id));
            let direct = bucket.iter().filter(|c| c.hops() == 1).count();
            bucket.truncate(direct.max(K_BUCKET));
        }
        table
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn owner_index(&self) -> NodeIdx {
        self.owner_idx
    }

    pub fn bucket(&self, i: usize) -> &[Contact] {
        &self.buckets[i]
    }

    pub fn contacts(&self) -> impl Iterator<Item = &Contact> {
        self.buckets.iter().flatten()
    }

    pub fn contact_count(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn neighbors(&self) -> &BTreeSet<NodeIdx> {
        &self.neighbors
    }

    pub fn view(&self) -> &BTreeMap<NodeId, NodeIdx> {
        &self.view
    }

    pub fn knows(&self, id: NodeId) -> bool {
        self.contacts().any(|c| c.id == id)
    }

    /// Greedy XOR forwarding decision. Picks the contact with the smallest
    /// resulting distance to `dst`, then the shorter path, then the smaller id.
    pub fn next_hop(&self, dst: NodeId) -> Result<NextHop<'_>, RouteError> {
        let Some(top) = bucket_index(self.owner, dst) else {
            return Ok(NextHop::Local);
        };
        let own = xor_distance(self.owner, dst);
        // Contacts in buckets above `top` are always farther than the owner;
        // anything in bucket `top` beats anything below it.
        (0..=top)
            .rev()
            .find_map(|b| {
                self.buckets[b]
                    .iter()
                    .filter(|c| xor_distance(c.id, dst) < own)
                    .min_by_key(|c| (xor_distance(c.id, dst), c.path.len(), c.id))
            })
            .map(NextHop::Contact)
            .ok_or_else(|| RouteError::NoProgress {
                at: format!("{}", self.owner),
                dst,
            })
    }

    /// Drop contacts whose source route crosses a Down link. Returns how many
    /// were removed.
    pub fn invalidate(&mut self, topo: &Topology) -> usize {
        let mut removed = 0;
        for bucket in &mut self.buckets {
            let before = bucket.len();
            bucket.retain(|c| {
                c.path
                    .windows(2)
                    .all(|w| topo.link_between(w[0], w[1]).is_some_and(|l| topo.link(l).is_up()))
            });
            removed += before - bucket.len();
        }
        self.neighbors = topo.up_neighbors(self.owner_idx).map(|(v, _)| v).collect();
        removed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingConfig {
    pub flood_ttl: u32,
    pub repair_window_us: Micros,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            flood_ttl: DEFAULT_FLOOD_TTL,
            repair_window_us: DEFAULT_REPAIR_WINDOW_US,
        }
    }
}

/// Outcome of walking the routing tables from a source to a destination.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteTrace {
    /// Physical nodes traversed, source and destination included.
    pub path: Vec<NodeIdx>,
    pub latency_us: Micros,
    /// Greedy forwarding decisions taken (overlay hops).
    pub greedy_steps: usize,
}

impl RouteTrace {
    /// Physical link traversals.
    pub fn hops(&self) -> usize {
        self.path.len() - 1
    }
}

pub fn assign_ids(topo: &Topology) -> Result<Vec<NodeId>, RoutingError> {
    let ids = topo
        .nodes()
        .iter()
        .map(|n| derive_node_id(&n.name))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seen: BTreeMap<NodeId, NodeIdx> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        if let Some(prev) = seen.insert(*id, i) {
            return Err(RoutingError::IdCollision(
                topo.name(prev).to_string(),
                topo.name(i).to_string(),
            ));
        }
    }
    Ok(ids)
}

/// Routing state for the whole network: one table per node.
#[derive(Debug, Clone)]
pub struct Routing {
    cfg: RoutingConfig,
    ids: Vec<NodeId>,
    by_id: BTreeMap<NodeId, NodeIdx>,
    tables: Vec<RoutingTable>,
    /// Per-node diameter estimate: the ring that last covered its component.
    /// Repairs flood with this TTL instead of restarting the ring search.
    diameter_ttl: Vec<u32>,
    convergence_time_us: Micros,
    converged: bool,
}

impl Routing {
    /// Run discovery from every node, then check greedy reachability.
    pub fn bootstrap(topo: &Topology, cfg: RoutingConfig) -> Result<Self, RoutingError> {
        let ids = assign_ids(topo)?;
        let by_id = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut convergence_time_us = 0;
        let mut diameter_ttl = Vec::with_capacity(topo.node_count());
        let tables = (0..topo.node_count())
            .map(|i| {
                let d = discover(topo, i, cfg.flood_ttl);
                convergence_time_us = convergence_time_us.max(d.duration_us);
                diameter_ttl.push(*d.rings.last().unwrap());
                RoutingTable::from_discovery(topo, &ids, i, &d)
            })
            .collect();
        let mut routing = Self {
            cfg,
            ids,
            by_id,
            tables,
            diameter_ttl,
            convergence_time_us,
            converged: false,
        };
        routing.converged = routing.check_convergence(topo);
        Ok(routing)
    }

    pub fn config(&self) -> RoutingConfig {
        self.cfg
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn id(&self, idx: NodeIdx) -> NodeId {
        self.ids[idx]
    }

    pub fn index_of(&self, id: NodeId) -> Option<NodeIdx> {
        self.by_id.get(&id).copied()
    }

    pub fn table(&self, idx: NodeIdx) -> &RoutingTable {
        &self.tables[idx]
    }

    pub fn tables(&self) -> &[RoutingTable] {
        &self.tables
    }

    pub fn convergence_time_us(&self) -> Micros {
        self.convergence_time_us
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    /// Greedy routing succeeds for every ordered pair inside each component.
    /// Pairs are sampled with a fixed stride above 64 nodes.
    pub fn check_convergence(&self, topo: &Topology) -> bool {
        let n = topo.node_count();
        let comp = topo.components();
        let stride = if n <= 64 { 1 } else { n / 32 };
        (0..n).step_by(stride).all(|s| {
            (0..n)
                .filter(|&d| d != s && comp[d] == comp[s])
                .all(|d| self.walk(topo, s, self.ids[d]).is_ok())
        })
    }

    /// Follow next-hop decisions and source routes from `src` to `dst`
    /// without going through the event queue.
    pub fn walk(&self, topo: &Topology, src: NodeIdx, dst: NodeId) -> Result<RouteTrace, RouteError> {
        let mut path = vec![src];
        let mut at = src;
        let mut latency_us = 0;
        let mut steps = 0;
        loop {
            let contact = match self.tables[at].next_hop(dst) {
                Ok(NextHop::Local) => {
                    return Ok(RouteTrace {
                        path,
                        latency_us,
                        greedy_steps: steps,
                    })
                }
                Ok(NextHop::Contact(c)) => c,
                Err(RouteError::NoProgress { dst, .. }) => {
                    return Err(RouteError::NoProgress {
                        at: topo.name(at).to_string(),
                        dst,
                    })
                }
                Err(e) => return Err(e),
            };
            for w in contact.path.windows(2) {
                match topo.link_between(w[0], w[1]) {
                    Some(l) if topo.link(l).is_up() => {
                        latency_us += topo.link(l).latency_us;
                        path.push(w[1]);
                    }
                    Some(l) => {
                        return Err(RouteError::LinkDown {
                            at: topo.name(w[0]).to_string(),
                            link: l,
                        })
                    }
                    None => unreachable!("contact path over non-adjacent nodes"),
                }
            }
            at = contact.node;
            steps += 1;
            if steps > topo.node_count() {
                return Err(RouteError::StepLimit(steps));
            }
        }
    }

    /// Apply the current link states to every table. Returns the nodes that
    /// lost at least one contact (or a neighbor).
    pub fn invalidate_all(&mut self, topo: &Topology) -> Vec<NodeIdx> {
        let mut affected = Vec::new();
        for (i, t) in self.tables.iter_mut().enumerate() {
            let before = t.neighbors.len();
            let removed = t.invalidate(topo);
            if removed > 0 || t.neighbors.len() != before {
                affected.push(i);
            }
        }
        affected
    }

    /// Time from the link change until `node` has heard every announcement
    /// it needs, given when each node received the change notice.
    pub fn repair_duration(&self, topo: &Topology, node: NodeIdx, notice: &[Option<Micros>]) -> Micros {
        discover(topo, node, self.diameter_ttl[node])
            .reached
            .iter()
            .map(|(u, _, lat)| notice[*u].unwrap_or(0) + lat)
            .max()
            .unwrap_or(0)
    }

    /// Re-flood from `node` and rebuild its table.
    pub fn rediscover(&mut self, topo: &Topology, node: NodeIdx) -> Micros {
        let d = discover(topo, node, self.diameter_ttl[node]);
        self.diameter_ttl[node] = *d.rings.last().unwrap();
        self.tables[node] = RoutingTable::from_discovery(topo, &self.ids, node, &d);
        d.duration_us
    }

    pub fn refresh_convergence(&mut self, topo: &Topology) -> bool {
        self.converged = self.check_convergence(topo);
        self.converged
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{LinkState, DEMO_TOPOLOGY};

    fn line(n: usize) -> Topology {
        let nodes = (0..n).map(|i| (format!("n{i}"), crate::topology::NodeRole::Router));
        let links = (1..n).map(|i| (format!("n{}", i - 1), format!("n{i}"), 100));
        Topology::from_parts(nodes, links).unwrap()
    }

    #[test]
    fn derive_is_deterministic_and_rejects_empty() {
        assert_eq!(derive_node_id("A").unwrap(), derive_node_id("A").unwrap());
        assert_ne!(derive_node_id("A").unwrap(), derive_node_id("B").unwrap());
        assert_eq!(derive_node_id(""), Err(RoutingError::EmptyName));
    }

    #[test]
    fn xor_metric_basics() {
        let a = NodeId(0b0101);
        let b = NodeId(0b0011);
        assert_eq!(xor_distance(a, b), 6);
        assert_eq!(xor_distance(a, a), 0);
        assert_eq!(xor_distance(a, b), xor_distance(b, a));
        assert_eq!(bucket_index(a, b), Some(2));
        assert_eq!(bucket_index(a, a), None);
    }

    #[test]
    fn two_node_tables() {
        let t = Topology::parse("node A router\nnode B router\nlink A B 1000\n").unwrap();
        let r = Routing::bootstrap(&t, RoutingConfig::default()).unwrap();
        for (i, other) in [(0, 1), (1, 0)] {
            let table = r.table(i);
            let contacts: Vec<_> = table.contacts().collect();
            assert_eq!(contacts.len(), 1);
            assert_eq!(contacts[0].node, other);
            assert_eq!(contacts[0].path, vec![i, other]);
        }
        assert!(r.is_converged());
    }

    #[test]
    fn next_hop_to_self_and_neighbor() {
        let t = Topology::parse(DEMO_TOPOLOGY).unwrap();
        let r = Routing::bootstrap(&t, RoutingConfig::default()).unwrap();
        let gw = t.node_index("gateway").unwrap();
        let r4 = t.node_index("r4").unwrap();
        assert_eq!(r.table(gw).next_hop(r.id(gw)).unwrap(), NextHop::Local);
        match r.table(gw).next_hop(r.id(r4)).unwrap() {
            NextHop::Contact(c) => {
                assert_eq!(c.node, r4);
                assert_eq!(c.hops(), 1);
            }
            NextHop::Local => panic!("expected contact"),
        }
    }

    #[test]
    fn buckets_are_sorted_and_bounded() {
        let t = Topology::parse(DEMO_TOPOLOGY).unwrap();
        let r = Routing::bootstrap(&t, RoutingConfig::default()).unwrap();
        for table in r.tables() {
            for b in 0..ID_BITS {
                let bucket = table.bucket(b);
                let keys: Vec<_> = bucket.iter().map(|c| (c.path.len(), c.id)).collect();
                let mut sorted = keys.clone();
                sorted.sort();
                assert_eq!(keys, sorted);
                let direct = bucket.iter().filter(|c| c.hops() == 1).count();
                assert!(bucket.len() <= K_BUCKET.max(direct));
                for c in bucket {
                    assert_eq!(bucket_index(table.owner(), c.id), Some(b));
                    assert_eq!(c.path.first(), Some(&table.owner_index()));
                    assert_eq!(c.path.last(), Some(&c.node));
                }
            }
            for &nb in table.neighbors() {
                assert!(table.contacts().any(|c| c.node == nb && c.hops() == 1));
            }
        }
    }

    #[test]
    fn expanding_ring_reaches_beyond_initial_ttl() {
        let t = line(30);
        let d = discover(&t, 0, 8);
        assert_eq!(d.reached.len(), 29);
        assert_eq!(d.rings, vec![8, 16, 32]);
        let r = Routing::bootstrap(&t, RoutingConfig::default()).unwrap();
        assert!(r.is_converged());
        let tr = r.walk(&t, 0, r.id(29)).unwrap();
        assert_eq!(*tr.path.last().unwrap(), 29);
    }

    #[test]
    fn partitioned_pairs_fail() {
        let t = Topology::parse("node A router\nnode B router\nnode C router\nnode D router\nlink A B 5\nlink C D 5\n")
            .unwrap();
        let r = Routing::bootstrap(&t, RoutingConfig::default()).unwrap();
        assert!(r.is_converged(), "convergence is judged per component");
        assert!(r.walk(&t, 0, r.id(1)).is_ok());
        assert!(matches!(r.walk(&t, 0, r.id(2)), Err(RouteError::NoProgress { .. })));
        assert!(r.walk(&t, 3, r.id(1)).is_err());
    }

    #[test]
    fn invalidation_removes_broken_paths() {
        let mut t = line(4);
        let mut r = Routing::bootstrap(&t, RoutingConfig::default()).unwrap();
        let l = t.find_link("n1", "n2").unwrap();
        t.set_link_state(l, LinkState::Down);
        let affected = r.invalidate_all(&t);
        assert_eq!(affected, vec![0, 1, 2, 3]);
        assert!(r.table(0).contacts().all(|c| c.node <= 1));
        assert!(matches!(r.walk(&t, 0, r.id(3)), Err(RouteError::NoProgress { .. })));
        t.set_link_state(l, LinkState::Up);
        for i in 0..4 {
            r.rediscover(&t, i);
        }
        assert_eq!(r.walk(&t, 0, r.id(3)).unwrap().hops(), 3);
    }
}
