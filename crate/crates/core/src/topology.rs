//! Static network description: named nodes with roles and latency-annotated
//! links that can be taken down and brought back up.
//!
//! Text format, one declaration per line:
//!
//! ```text
//! # comment
//! node <name> <router|rlnode|gateway>
//! link <a> <b> <latency_us>
//! ```
//!
//! Nodes and links are stored in canonical (name) order so that indices, and
//! everything derived from them, do not depend on declaration order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::sim::Micros;

/// Index of a node in canonical (sorted by name) order.
pub type NodeIdx = usize;
/// Index of a link in canonical order.
pub type LinkIdx = usize;

/// The demo core: two RL nodes and a gateway attached to a five-router ring with chords.
pub const DEMO_TOPOLOGY: &str = include_str!("../topologies/demo.topo");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate node {name:?}")]
    DuplicateNode { line: usize, name: String },
    #[error("line {line}: link endpoint {name:?} is not a declared node")]
    DanglingEndpoint { line: usize, name: String },
    #[error("line {line}: link latency must be positive")]
    NonPositiveLatency { line: usize },
    #[error("line {line}: self-link on {name:?}")]
    SelfLink { line: usize, name: String },
    #[error("line {line}: duplicate link {a}-{b}")]
    DuplicateLink { line: usize, a: String, b: String },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("no link between {0:?} and {1:?}")]
    UnknownLink(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRole {
    Router,
    RlNode,
    Gateway,
}

impl FromStr for NodeRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "router" => Ok(NodeRole::Router),
            "rlnode" => Ok(NodeRole::RlNode),
            "gateway" => Ok(NodeRole::Gateway),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeRole::Router => "router",
            NodeRole::RlNode => "rlnode",
            NodeRole::Gateway => "gateway",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkState {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub name: String,
    pub role: NodeRole,
}

/// An undirected link. `a < b` in canonical node order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub a: NodeIdx,
    pub b: NodeIdx,
    pub latency_us: Micros,
    pub state: LinkState,
}

impl Link {
    pub fn other(&self, n: NodeIdx) -> NodeIdx {
        if n == self.a {
            self.b
        } else {
            self.a
        }
    }

    pub fn is_up(&self) -> bool {
        self.state == LinkState::Up
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    nodes: Vec<Node>,
    links: Vec<Link>,
    index: BTreeMap<String, NodeIdx>,
    /// Per node: (neighbor, link), sorted by neighbor index.
    adjacency: Vec<Vec<(NodeIdx, LinkIdx)>>,
}

struct LinkDecl {
    a: String,
    b: String,
    latency_us: i64,
    line: usize,
}

impl Topology {
    /// Parse the line-oriented topology format.
    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut nodes = Vec::new();
        let mut links = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let tokens: Vec<&str> = content.split_whitespace().collect();
            match tokens.as_slice() {
                ["node", name, role] => {
                    let role = role
                        .parse::<NodeRole>()
                        .map_err(|msg| TopologyError::Parse { line, msg })?;
                    nodes.push((name.to_string(), role, line));
                }
                ["link", a, b, latency] => {
                    let latency_us = latency.parse::<i64>().map_err(|_| TopologyError::Parse {
                        line,
                        msg: format!("bad latency {latency:?}"),
                    })?;
                    links.push(LinkDecl {
                        a: a.to_string(),
                        b: b.to_string(),
                        latency_us,
                        line,
                    });
                }
                ["node", ..] => {
                    return Err(TopologyError::Parse {
                        line,
                        msg: "expected `node <name> <role>`".into(),
                    })
                }
                ["link", ..] => {
                    return Err(TopologyError::Parse {
                        line,
                        msg: "expected `link <a> <b> <latency_us>`".into(),
                    })
                }
                [kw, ..] => {
                    return Err(TopologyError::Parse {
                        line,
                        msg: format!("unknown directive {kw:?}"),
                    })
                }
                [] => unreachable!(),
            }
        }
        Self::build(nodes, links)
    }

    /// Build a topology programmatically. Errors report line 0.
    pub fn from_parts<N, L>(nodes: N, links: L) -> Result<Self, TopologyError>
    where
        N: IntoIterator<Item = (String, NodeRole)>,
        L: IntoIterator<Item = (String, String, Micros)>,
    {
        let nodes = nodes.into_iter().map(|(n, r)| (n, r, 0)).collect();
        let links = links
            .into_iter()
            .map(|(a, b, l)| LinkDecl {
                a,
                b,
                latency_us: i64::try_from(l).unwrap_or(i64::MAX),
                line: 0,
            })
            .collect();
        Self::build(nodes, links)
    }

    fn build(mut decl_nodes: Vec<(String, NodeRole, usize)>, decl_links: Vec<LinkDecl>) -> Result<Self, TopologyError> {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (name, _, line) in &decl_nodes {
            if seen.insert(name.as_str(), *line).is_some() {
                return Err(TopologyError::DuplicateNode {
                    line: *line,
                    name: name.clone(),
                });
            }
        }
        decl_nodes.sort_by(|x, y| x.0.cmp(&y.0));
        let nodes: Vec<Node> = decl_nodes
            .into_iter()
            .map(|(name, role, _)| Node { name, role })
            .collect();
        let index: BTreeMap<String, NodeIdx> = nodes.iter().enumerate().map(|(i, n)| (n.name.clone(), i)).collect();

        let mut links = Vec::with_capacity(decl_links.len());
        let mut pairs: BTreeMap<(NodeIdx, NodeIdx), usize> = BTreeMap::new();
        for d in decl_links {
            let ia = *index.get(&d.a).ok_or_else(|| TopologyError::DanglingEndpoint {
                line: d.line,
                name: d.a.clone(),
            })?;
            let ib = *index.get(&d.b).ok_or_else(|| TopologyError::DanglingEndpoint {
                line: d.line,
                name: d.b.clone(),
            })?;
            if ia == ib {
                return Err(TopologyError::SelfLink {
                    line: d.line,
                    name: d.a,
                });
            }
            if d.latency_us <= 0 {
                return Err(TopologyError::NonPositiveLatency { line: d.line });
            }
            let (a, b) = if ia < ib { (ia, ib) } else { (ib, ia) };
            if pairs.insert((a, b), d.line).is_some() {
                return Err(TopologyError::DuplicateLink {
                    line: d.line,
                    a: nodes[a].name.clone(),
                    b: nodes[b].name.clone(),
                });
            }
            links.push(Link {
                a,
                b,
                latency_us: d.latency_us as Micros,
                state: LinkState::Up,
            });
        }
        links.sort_by_key(|l| (l.a, l.b));

        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (li, l) in links.iter().enumerate() {
            adjacency[l.a].push((l.b, li));
            adjacency[l.b].push((l.a, li));
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Ok(Self {
            nodes,
            links,
            index,
            adjacency,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, idx: NodeIdx) -> &Node {
        &self.nodes[idx]
    }

    pub fn name(&self, idx: NodeIdx) -> &str {
        &self.nodes[idx].name
    }

    pub fn link(&self, idx: LinkIdx) -> &Link {
        &self.links[idx]
    }

    pub fn node_index(&self, name: &str) -> Option<NodeIdx> {
        self.index.get(name).copied()
    }

    pub fn require_node(&self, name: &str) -> Result<NodeIdx, TopologyError> {
        self.node_index(name)
            .ok_or_else(|| TopologyError::UnknownNode(name.to_string()))
    }

    pub fn link_between(&self, a: NodeIdx, b: NodeIdx) -> Option<LinkIdx> {
        self.adjacency.get(a)?.iter().find(|(n, _)| *n == b).map(|&(_, l)| l)
    }

    pub fn find_link(&self, a: &str, b: &str) -> Result<LinkIdx, TopologyError> {
        let ia = self.require_node(a)?;
        let ib = self.require_node(b)?;
        self.link_between(ia, ib)
            .ok_or_else(|| TopologyError::UnknownLink(a.to_string(), b.to_string()))
    }

    /// All incident links regardless of state.
    pub fn incident(&self, n: NodeIdx) -> &[(NodeIdx, LinkIdx)] {
        &self.adjacency[n]
    }

    pub fn up_neighbors(&self, n: NodeIdx) -> impl Iterator<Item = (NodeIdx, LinkIdx)> + '_ {
        self.adjacency[n]
            .iter()
            .copied()
            .filter(move |&(_, l)| self.links[l].is_up())
    }

    pub fn set_link_state(&mut self, link: LinkIdx, state: LinkState) {
        self.links[link].state = state;
    }

    pub fn nodes_with_role(&self, role: NodeRole) -> impl Iterator<Item = NodeIdx> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.role == role)
            .map(|(i, _)| i)
    }

    /// Connected component label per node over Up links (labels are the
    /// smallest node index in the component).
    pub fn components(&self) -> Vec<NodeIdx> {
        let n = self.nodes.len();
        let mut label = vec![usize::MAX; n];
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = start;
            let mut stack = vec![start];
            while let Some(u) = stack.pop() {
                for (v, _) in self.up_neighbors(u) {
                    if label[v] == usize::MAX {
                        label[v] = start;
                        stack.push(v);
                    }
                }
            }
        }
        label
    }

    /// Render back to the text format (canonical order).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!("node {} {}\n", n.name, n.role));
        }
        for l in &self.links {
            out.push_str(&format!(
                "link {} {} {}\n",
                self.nodes[l.a].name, self.nodes[l.b].name, l.latency_us
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_graph() {
        let t = Topology::parse("node A router\nnode B router\nlink A B 1000\n").unwrap();
        assert_eq!(t.node_count(), 2);
        assert_eq!(t.links().len(), 1);
        assert_eq!(t.links()[0].latency_us, 1000);
    }

    #[test]
    fn demo_topology_shape() {
        let t = Topology::parse(DEMO_TOPOLOGY).unwrap();
        assert_eq!(t.node_count(), 8);
        assert_eq!(t.nodes_with_role(NodeRole::RlNode).count(), 2);
        assert_eq!(t.nodes_with_role(NodeRole::Gateway).count(), 1);
        assert_eq!(t.nodes_with_role(NodeRole::Router).count(), 5);
    }

    #[test]
    fn dangling_endpoint() {
        let err = Topology::parse("node A router\nlink A X 10\n").unwrap_err();
        assert_eq!(
            err,
            TopologyError::DanglingEndpoint {
                line: 2,
                name: "X".into()
            }
        );
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(
            Topology::parse("node A router\nnode A gateway\n"),
            Err(TopologyError::DuplicateNode { line: 2, .. })
        ));
        assert!(matches!(
            Topology::parse("node A router\nnode B router\nlink A B 0\n"),
            Err(TopologyError::NonPositiveLatency { line: 3 })
        ));
        assert!(matches!(
            Topology::parse("node A router\nnode B router\nlink A B -5\n"),
            Err(TopologyError::NonPositiveLatency { line: 3 })
        ));
        assert!(matches!(
            Topology::parse("node A router\nlink A A 5\n"),
            Err(TopologyError::SelfLink { line: 2, .. })
        ));
        assert!(matches!(
            Topology::parse("node A router\nnode B router\nlink A B 5\nlink B A 7\n"),
            Err(TopologyError::DuplicateLink { line: 4, .. })
        ));
        assert!(matches!(
            Topology::parse("\n\nnode A switch\n"),
            Err(TopologyError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            Topology::parse("edge A B 1\n"),
            Err(TopologyError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn declaration_order_does_not_matter() {
        let a = Topology::parse("node B router\nnode A rlnode\nnode C gateway\nlink C A 5\nlink B A 3\n").unwrap();
        let b = Topology::parse(
            "# same graph\nnode A rlnode\nnode C gateway # trailing\nnode B router\nlink A B 3\nlink A C 5\n",
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(Topology::parse(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn components_follow_link_state() {
        let mut t = Topology::parse("node A router\nnode B router\nnode C router\nlink A B 1\nlink B C 1\n").unwrap();
        assert_eq!(t.components(), vec![0, 0, 0]);
        let l = t.find_link("B", "C").unwrap();
        t.set_link_state(l, LinkState::Down);
        assert_eq!(t.components(), vec![0, 0, 2]);
    }
}
