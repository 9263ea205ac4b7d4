mod common;

use std::collections::BTreeSet;

use autonet::network::{DeliveryOutcome, Network, NoApp};
use autonet::routing::{assign_ids, derive_node_id, xor_distance, NextHop, NodeId, Routing, RoutingConfig};
use autonet::sim::LogLevel;
use autonet::topology::{NodeRole, Topology, DEMO_TOPOLOGY};
use common::Graph;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Net = Network<u32, ()>;

fn golden(file: &str) -> Vec<Vec<String>> {
    file.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

#[test]
fn ids_match_golden_hashes() {
    let rows = golden(include_str!("ids.golden"));
    assert!(rows.len() >= 10);
    for row in rows {
        let want = u128::from_str_radix(&row[1], 16).unwrap();
        assert_eq!(derive_node_id(&row[0]).unwrap(), NodeId(want), "{}", row[0]);
    }
}

#[test]
fn name_corpus_has_no_collisions() {
    let names: Vec<&str> = include_str!("names.txt").lines().collect();
    assert_eq!(names.len(), 1000);
    let ids: BTreeSet<NodeId> = names.iter().map(|n| derive_node_id(n).unwrap()).collect();
    assert_eq!(ids.len(), names.len());
}

/// Iterate `next_hop` by hand, checking strict XOR progress at every step.
fn greedy_walk(r: &Routing, src: usize, dst: NodeId) -> Option<usize> {
    let mut at = src;
    let mut steps = 0;
    loop {
        match r.table(at).next_hop(dst) {
            Ok(NextHop::Local) => return Some(steps),
            Ok(NextHop::Contact(c)) => {
                assert!(
                    xor_distance(c.id, dst) < xor_distance(r.id(at), dst),
                    "no strict progress"
                );
                at = c.node;
                steps += 1;
            }
            Err(_) => return None,
        }
    }
}

#[test]
fn demo_routes_every_ordered_pair() {
    let topo = Topology::parse(DEMO_TOPOLOGY).unwrap();
    let r = Routing::bootstrap(&topo, RoutingConfig::default()).unwrap();
    let n = topo.node_count();
    let mut pairs = 0;
    for s in 0..n {
        for d in (0..n).filter(|&d| d != s) {
            let steps = greedy_walk(&r, s, r.id(d)).expect("reachable");
            assert!(steps <= 8);
            let trace = r.walk(&topo, s, r.id(d)).unwrap();
            assert_eq!(*trace.path.last().unwrap(), d);
            pairs += 1;
        }
    }
    assert_eq!(pairs, 56);
}

#[test]
fn bootstrap_is_deterministic() {
    let topo = Topology::parse(DEMO_TOPOLOGY).unwrap();
    let a = Routing::bootstrap(&topo, RoutingConfig::default()).unwrap();
    let b = Routing::bootstrap(&topo, RoutingConfig::default()).unwrap();
    for (ta, tb) in a.tables().iter().zip(b.tables()) {
        let ca: Vec<_> = ta.contacts().collect();
        let cb: Vec<_> = tb.contacts().collect();
        assert_eq!(ca, cb);
    }
}

#[test]
fn duplicate_names_cannot_form_a_topology_and_ids_are_unique() {
    let topo = Topology::parse(DEMO_TOPOLOGY).unwrap();
    let ids = assign_ids(&topo).unwrap();
    let unique: BTreeSet<_> = ids.iter().collect();
    assert_eq!(unique.len(), ids.len());
}

fn ring(n: usize) -> Topology {
    let nodes = (0..n).map(|i| (format!("n{i}"), NodeRole::Router));
    let links = (0..n).map(|i| (format!("n{i}"), format!("n{}", (i + 1) % n), 1000));
    Topology::from_parts(nodes, links).unwrap()
}

fn settle(net: &mut Net) {
    let t = net.now() + net.repair_window_us();
    net.run_until(t, &mut NoApp);
}

#[test]
fn ring_of_six_goes_the_long_way() {
    let mut net = Net::new(ring(6), RoutingConfig::default(), LogLevel::Info).unwrap();
    net.fail_link("n0", "n1", 0).unwrap();
    settle(&mut net);
    assert!(!net.is_repairing());
    let g = Graph {
        n: 6,
        edges: (0..6).map(|i| (i, (i + 1) % 6, 1000)).collect(),
    };
    let lower = g.bfs(0, Some(0))[1].unwrap();
    assert_eq!(lower, 5);
    let dst = net.id(1);
    match net.route_packet(0, dst, 1, &mut NoApp) {
        DeliveryOutcome::Delivered { hops, latency_us, .. } => {
            assert!(hops >= lower);
            assert_eq!(hops, 5);
            assert_eq!(latency_us, 5000);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn leaf_failure_only_cuts_the_leaf() {
    let mut topo = ring(5);
    topo = Topology::parse(&(topo.to_text() + "node leaf router\nlink leaf n2 300\n")).unwrap();
    let mut net = Net::new(topo, RoutingConfig::default(), LogLevel::Info).unwrap();
    net.fail_link("leaf", "n2", 0).unwrap();
    settle(&mut net);
    let leaf = net.topology().node_index("leaf").unwrap();
    for s in 0..net.topology().node_count() {
        for d in 0..net.topology().node_count() {
            let ok = net.trace_route(s, net.id(d)).is_ok();
            let cut = (s == leaf) != (d == leaf);
            assert_eq!(ok, !cut, "{s}->{d}");
        }
    }
}

#[test]
fn restore_gives_back_reachability() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = Graph::with_bridge(&mut rng, 6, 5);
    let bridge = g.edges.last().copied().unwrap();
    let topo = g.topology();
    let ix = g.indices(&topo);
    let mut net = Net::new(topo, RoutingConfig::default(), LogLevel::Info).unwrap();
    let (a, b) = (Graph::name(bridge.0), Graph::name(bridge.1));
    net.fail_link(&a, &b, 0).unwrap();
    settle(&mut net);
    assert!(net.trace_route(ix[bridge.0], net.id(ix[bridge.1])).is_err());
    let t = net.now();
    net.restore_link(&a, &b, t).unwrap();
    settle(&mut net);
    for s in 0..g.n {
        for d in 0..g.n {
            let t = net.trace_route(s, net.id(d)).expect("reachable again");
            assert!(t.greedy_steps <= g.n);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Greedy routing reaches exactly the BFS-reachable pairs, with at most
    /// one overlay step per node.
    #[test]
    fn reachability_matches_bfs(seed in any::<u64>(), n in 2usize..=20, split in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = if split && n >= 4 {
            // Two disconnected pieces.
            let a = Graph::random_connected(&mut rng, n / 2, 2);
            let b = Graph::random_connected(&mut rng, n - n / 2, 2);
            let mut edges = a.edges;
            edges.extend(b.edges.iter().map(|&(x, y, l)| (x + n / 2, y + n / 2, l)));
            Graph { n, edges }
        } else {
            Graph::random_connected(&mut rng, n, n / 2)
        };
        let topo = g.topology();
        let ix = g.indices(&topo);
        let r = Routing::bootstrap(&topo, RoutingConfig::default()).unwrap();
        let oracle = g.reachable(None);
        for s in 0..n {
            for d in 0..n {
                let walked = r.walk(&topo, ix[s], r.id(ix[d]));
                prop_assert_eq!(walked.is_ok(), oracle[s][d], "{} -> {}", s, d);
                if let Ok(t) = walked {
                    prop_assert!(t.greedy_steps <= n);
                    prop_assert!(t.hops() >= g.bfs(s, None)[d].unwrap());
                }
            }
        }
    }
}
