//! Random graph generators and a BFS oracle independent of the crate's own
//! graph code.

#![allow(dead_code)]

use std::collections::VecDeque;

use autonet::sim::Micros;
use autonet::topology::{NodeRole, Topology};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<(usize, usize, Micros)>,
}

fn latency<R: Rng>(rng: &mut R) -> Micros {
    rng.random_range(100..=2000)
}

impl Graph {
    pub fn name(i: usize) -> String {
        format!("n{i}")
    }

    fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.iter().any(|&(x, y, _)| (x, y) == (a, b) || (x, y) == (b, a))
    }

    fn add_random_edges<R: Rng>(&mut self, rng: &mut R, extra: usize) {
        if self.n < 3 {
            return;
        }
        let mut added = 0;
        let mut tries = 0;
        while added < extra && tries < extra * 20 {
            tries += 1;
            let a = rng.random_range(0..self.n);
            let b = rng.random_range(0..self.n);
            if a != b && !self.has_edge(a, b) {
                let l = latency(rng);
                self.edges.push((a, b, l));
                added += 1;
            }
        }
    }

    /// Random spanning tree plus `extra` random edges.
    pub fn random_connected<R: Rng>(rng: &mut R, n: usize, extra: usize) -> Graph {
        let mut g = Graph { n, edges: Vec::new() };
        for i in 1..n {
            let parent = rng.random_range(0..i);
            let l = latency(rng);
            g.edges.push((parent, i, l));
        }
        g.add_random_edges(rng, extra);
        g
    }

    /// A Hamiltonian cycle over a random permutation plus chords.
    pub fn random_two_edge_connected<R: Rng>(rng: &mut R, n: usize, extra: usize) -> Graph {
        assert!(n >= 3);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut g = Graph { n, edges: Vec::new() };
        for i in 0..n {
            let l = latency(rng);
            g.edges.push((order[i], order[(i + 1) % n], l));
        }
        g.add_random_edges(rng, extra);
        g
    }

    /// Two 2-edge-connected halves joined by a single bridge edge; the
    /// bridge is the last edge.
    pub fn with_bridge<R: Rng>(rng: &mut R, left: usize, right: usize) -> Graph {
        let a = Graph::random_two_edge_connected(rng, left, left / 3);
        let b = Graph::random_two_edge_connected(rng, right, right / 3);
        let mut edges = a.edges;
        edges.extend(b.edges.iter().map(|&(x, y, l)| (x + left, y + left, l)));
        let u = rng.random_range(0..left);
        let v = left + rng.random_range(0..right);
        let l = latency(rng);
        edges.push((u, v, l));
        Graph { n: left + right, edges }
    }

    pub fn topology(&self) -> Topology {
        let nodes = (0..self.n).map(|i| (Graph::name(i), NodeRole::Router));
        let links = self.edges.iter().map(|&(a, b, l)| (Graph::name(a), Graph::name(b), l));
        Topology::from_parts(nodes, links).expect("generated graph is valid")
    }

    /// Topology index of each graph vertex (the topology orders nodes by
    /// name).
    pub fn indices(&self, topo: &Topology) -> Vec<usize> {
        (0..self.n)
            .map(|i| topo.node_index(&Graph::name(i)).expect("node exists"))
            .collect()
    }

    fn adjacency(&self, removed: Option<usize>) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for (i, &(a, b, _)) in self.edges.iter().enumerate() {
            if Some(i) != removed {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        adj
    }

    /// Hop distances from `s`, skipping edge `removed`.
    pub fn bfs(&self, s: usize, removed: Option<usize>) -> Vec<Option<usize>> {
        let adj = self.adjacency(removed);
        let mut dist = vec![None; self.n];
        dist[s] = Some(0);
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(dist[u].unwrap() + 1);
                    q.push_back(v);
                }
            }
        }
        dist
    }

    pub fn reachable(&self, removed: Option<usize>) -> Vec<Vec<bool>> {
        (0..self.n)
            .map(|s| self.bfs(s, removed).iter().map(Option::is_some).collect())
            .collect()
    }
}
