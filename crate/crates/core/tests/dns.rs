mod common;

use autonet::dns::{
    dns_query, dns_update, local_dns_frontend, replicas_for, validate_name, DnsConfig, DnsError, DnsMessage, DnsTimer,
    NameService,
};
use autonet::network::Network;
use autonet::routing::{derive_node_id, xor_distance, NodeId, RoutingConfig};
use autonet::sim::{LogLevel, MICROS_PER_MS, MICROS_PER_SEC};
use autonet::topology::{Topology, DEMO_TOPOLOGY};
use common::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Net = Network<DnsMessage, DnsTimer>;

fn boot(topo: Topology) -> (Net, NameService) {
    let n = topo.node_count();
    let net = Net::new(topo, RoutingConfig::default(), LogLevel::Info).unwrap();
    (net, NameService::new(n, DnsConfig::default()))
}

fn quiesce(net: &mut Net, dns: &mut NameService) {
    let t = net.now() + net.repair_window_us();
    net.run_until(t, dns);
}

/// Brute force: sort every id by distance to the key, keep two.
fn nearest_two(name: &str, ids: &[NodeId]) -> Vec<NodeId> {
    let key = derive_node_id(name).unwrap();
    let mut v = ids.to_vec();
    v.sort_by_key(|id| xor_distance(*id, key));
    v.truncate(2);
    v
}

#[test]
fn demo_replicas_match_golden() {
    let (net, _) = boot(Topology::parse(DEMO_TOPOLOGY).unwrap());
    for line in include_str!("replicas.golden").lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split('\t').collect();
        let want: Vec<NodeId> = f[1..]
            .iter()
            .map(|n| net.id(net.topology().node_index(n).unwrap()))
            .collect();
        assert_eq!(replicas_for(f[0], net.routing().ids()), want, "{}", f[0]);
    }
}

#[test]
fn registered_demo_name_lands_on_both_replicas() {
    let (mut net, mut dns) = boot(Topology::parse(DEMO_TOPOLOGY).unwrap());
    let rl = net.topology().node_index("rlnode1").unwrap();
    {
        let a = net.id(rl);
        dns_update(&mut net, &mut dns, rl, "rlagent.kira.internal", a)
    }
    .unwrap();
    quiesce(&mut net, &mut dns);
    let holders: Vec<&str> = dns
        .holders("rlagent.kira.internal")
        .into_iter()
        .map(|n| net.topology().name(n))
        .collect();
    // Golden placement: r4 and r1.
    assert_eq!(holders.len(), 2);
    assert!(holders.contains(&"r4") && holders.contains(&"r1"), "{holders:?}");
    for h in dns.holders("rlagent.kira.internal") {
        assert_eq!(dns.stored(h, "rlagent.kira.internal").unwrap().address, net.id(rl));
    }
}

#[test]
fn names_need_the_kira_suffix() {
    assert_eq!(validate_name("RLAgent.KIRA.internal").unwrap(), "rlagent.kira.internal");
    for bad in [
        "rlagent",
        "rlagent.example.com",
        ".kira.internal",
        "-x.kira.internal",
        "a..b.kira.internal",
    ] {
        assert!(matches!(validate_name(bad), Err(DnsError::InvalidName { .. })), "{bad}");
    }
}

#[test]
fn frontend_sees_new_address_after_cache_expiry() {
    let (mut net, mut dns) = boot(Topology::parse(DEMO_TOPOLOGY).unwrap());
    let rl1 = net.topology().node_index("rlnode1").unwrap();
    let rl2 = net.topology().node_index("rlnode2").unwrap();
    let gw = net.topology().node_index("gateway").unwrap();
    let name = "mobile.kira.internal";
    {
        let a = net.id(rl1);
        dns_update(&mut net, &mut dns, rl1, name, a)
    }
    .unwrap();
    quiesce(&mut net, &mut dns);
    assert_eq!(
        local_dns_frontend(&mut net, &mut dns, gw, name).unwrap().address,
        net.id(rl1)
    );

    // Same origin moves the name to a new address.
    {
        let a = net.id(rl2);
        dns_update(&mut net, &mut dns, rl1, name, a)
    }
    .unwrap();
    quiesce(&mut net, &mut dns);
    let cached = local_dns_frontend(&mut net, &mut dns, gw, name).unwrap();
    assert!(cached.from_cache);
    assert_eq!(cached.address, net.id(rl1));

    let t = net.now() + MICROS_PER_SEC + MICROS_PER_MS;
    net.run_until(t, &mut dns);
    let fresh = local_dns_frontend(&mut net, &mut dns, gw, name).unwrap();
    assert!(!fresh.from_cache);
    assert_eq!(fresh.address, net.id(rl2));
    assert_eq!(fresh.version, 2);
}

#[test]
fn resolved_versions_never_decrease() {
    let (mut net, mut dns) = boot(Topology::parse(DEMO_TOPOLOGY).unwrap());
    let origin = net.topology().node_index("rlnode2").unwrap();
    let name = "counter.kira.internal";
    let mut last = 0;
    for round in 0..6 {
        {
            let a = net.id(origin);
            dns_update(&mut net, &mut dns, origin, name, a)
        }
        .unwrap();
        for q in 0..net.topology().node_count() {
            let v = dns_query(&mut net, &mut dns, q, name).unwrap().version;
            assert!(v >= last, "round {round}: version went from {last} to {v}");
            last = v;
        }
    }
    assert_eq!(last, 6);
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> Graph {
    Graph::random_two_edge_connected(rng, n, n / 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn replicas_are_the_brute_force_nearest(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<NodeId> = (0..n).map(|_| NodeId(rng.random())).collect();
        let name = format!("svc{}.kira.internal", rng.random_range(0..1000));
        prop_assert_eq!(replicas_for(&name, &ids), nearest_two(&name, &ids));
    }

    #[test]
    fn get_after_put(seed in any::<u64>(), n in 3usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n);
        let (mut net, mut dns) = boot(g.topology());
        let names: Vec<&str> = include_str!("names.txt").lines().collect();
        for _ in 0..5 {
            let name = names[rng.random_range(0..names.len())];
            let origin = rng.random_range(0..n);
            let querier = rng.random_range(0..n);
            let addr = net.id(rng.random_range(0..n));
            dns_update(&mut net, &mut dns, origin, name, addr).unwrap();
            quiesce(&mut net, &mut dns);
            prop_assert_eq!(dns_query(&mut net, &mut dns, querier, name).unwrap().address, addr);
        }
    }

    #[test]
    fn one_lost_replica_keeps_the_name(seed in any::<u64>(), n in 4usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n);
        let name = "survivor.kira.internal";
        let ids = g.topology();
        let (probe, _) = boot(ids);
        let replicas = replicas_for(name, probe.routing().ids());
        for victim in replicas {
            let (mut net, mut dns) = boot(g.topology());
            let v = net.index_of(victim).unwrap();
            let origin = (0..n).find(|&i| i != v).unwrap();
            { let a = net.id(origin); dns_update(&mut net, &mut dns, origin, name, a) }.unwrap();
            quiesce(&mut net, &mut dns);
            let vname = net.topology().name(v).to_string();
            let t = net.now();
            net.fail_node(&vname, t).unwrap();
            quiesce(&mut net, &mut dns);
            // Only pick queriers that stay connected once the victim is gone.
            for q in (0..n).filter(|&q| q != v) {
                let got = dns_query(&mut net, &mut dns, q, name);
                prop_assert_eq!(got.map(|a| a.address), Ok(net.id(origin)), "victim {} querier {}", vname, q);
            }
        }
    }
}
