//! Wire format and delivery guarantees of the agent/environment protocol.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use autonet::agents::{ScenarioKind, ScenarioSpec};
use autonet::daemon::Payload;
use autonet::dns::DnsConfig;
use autonet::experiment::{deploy, run_training, Deployment, LoopConfig, ScenarioOutcome};
use autonet::protocol::codec::{decode_actions, decode_obs_reward, encode_actions, encode_obs_reward};
use autonet::protocol::{Frame, MsgType, ObsReward, HEADER_LEN};
use autonet::routing::RoutingConfig;
use autonet::sim::LogLevel;
use autonet::topology::{Topology, DEMO_TOPOLOGY};
use autonet::wireless::{ApObservation, EnvConfig, MacConfig, Observation, STEPS_PER_EPISODE};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn msg_type() -> impl Strategy<Value = MsgType> {
    prop_oneof![
        Just(MsgType::ObsReward),
        Just(MsgType::Action),
        Just(MsgType::EpisodeStart),
        Just(MsgType::EpisodeEnd),
        Just(MsgType::Ack),
    ]
}

fn frame() -> impl Strategy<Value = Frame> {
    (
        msg_type(),
        any::<u32>(),
        any::<u32>(),
        any::<u16>(),
        any::<u16>(),
        prop::collection::vec(any::<u8>(), 0..400),
    )
        .prop_map(|(msg_type, seq, episode, step, agent_id, payload)| Frame {
            msg_type,
            seq,
            episode,
            step,
            agent_id,
            payload,
        })
}

fn ap_obs() -> impl Strategy<Value = ApObservation> {
    (
        any::<u8>(),
        any::<bool>(),
        prop::array::uniform7(0u32..=u16::MAX as u32),
    )
        .prop_map(|(ap_id, active, v)| ApObservation {
            ap_id,
            active,
            delivered: v[0],
            collisions: v[1],
            attempts: v[2],
            busy_slots: v[3],
            queue_len: v[4],
            arrivals: v[5],
            dropped: v[6],
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn frame_round_trip(f in frame()) {
        let bytes = f.encode().unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + f.payload.len());
        prop_assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn obs_reward_round_trip(
        aps in prop::collection::vec(ap_obs(), 0..8),
        n_aps in any::<u8>(),
        window_slots in any::<u16>(),
        reward in -1e9f64..1e9,
    ) {
        let o = ObsReward { observation: Observation { window_slots, n_aps, aps }, reward };
        let bytes = encode_obs_reward(&o).unwrap();
        prop_assert_eq!(decode_obs_reward(&bytes).unwrap(), o);
    }

    #[test]
    fn actions_round_trip(raw in prop::collection::vec((any::<u8>(), 0u8..=10, 0u8..=10, 0u8..=15), 0..8)) {
        let acts: Vec<_> = raw
            .into_iter()
            .filter_map(|(ap, a, b, r)| MacConfig::new(a, b, r).ok().map(|c| (ap, c)))
            .collect();
        prop_assert_eq!(decode_actions(&encode_actions(&acts)).unwrap(), acts);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = Frame::decode(&bytes);
        let _ = decode_obs_reward(&bytes);
        let _ = decode_actions(&bytes);
    }
}

#[test]
fn fuzz_decode_random_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF022);
    let mut accepted = 0;
    for i in 0..100_000 {
        let len = rng.random_range(0..64usize);
        let mut buf = vec![0u8; len];
        rng.fill_bytes(&mut buf);
        // Half the inputs get a plausible header so the payload decoders are
        // reached too.
        if i % 2 == 0 && len >= HEADER_LEN {
            buf[0] = rng.random_range(1..=5);
            let plen = (len - HEADER_LEN) as u16;
            buf[13..15].copy_from_slice(&plen.to_be_bytes());
        }
        if let Ok(f) = Frame::decode(&buf) {
            accepted += 1;
            let _ = decode_obs_reward(&f.payload);
            let _ = decode_actions(&f.payload);
            assert_eq!(f.encode().unwrap(), buf);
        }
    }
    assert!(accepted > 0);
}

fn demo() -> Deployment {
    let topo = Topology::parse(DEMO_TOPOLOGY).unwrap();
    deploy(topo, RoutingConfig::default(), DnsConfig::default(), LogLevel::Info).unwrap()
}

fn spec(kind: ScenarioKind, dep: &Deployment, episodes: u32) -> ScenarioSpec {
    ScenarioSpec {
        kind,
        ap_ids: vec![1, 2, 3, 4],
        rl_node_names: dep.rl_nodes(),
        episodes,
        seed: 11,
        failure_schedule: vec![],
    }
}

fn frame_of(p: &Payload) -> Option<Frame> {
    match p {
        Payload::Frame(d) => Frame::decode(&d.0).ok(),
        Payload::Dns(_) => None,
    }
}

/// Everything about a run that must not depend on transport timing.
fn fingerprint(o: &ScenarioOutcome) -> (Vec<String>, Vec<(u32, u16, u16)>, Vec<String>, Vec<u64>) {
    let steps = o
        .steps
        .iter()
        .map(|s| format!("{} {} {:?} {:?} {:?}", s.episode, s.step, s.reward, s.throughput, s.aps))
        .collect();
    let policies = o.policies.iter().map(|(_, p)| p.to_text()).collect();
    let returns = o.returns.iter().map(|r| r.return_value.to_bits()).collect();
    (steps, o.applied.clone(), policies, returns)
}

fn same(a: &ScenarioOutcome, b: &ScenarioOutcome, what: &str) {
    let (fa, fb) = (fingerprint(a), fingerprint(b));
    for (i, (x, y)) in fa.0.iter().zip(&fb.0).enumerate() {
        assert_eq!(x, y, "{what}: step record {i}");
    }
    assert_eq!(fa.0.len(), fb.0.len(), "{what}: step count");
    assert_eq!(fa.1, fb.1, "{what}: applied actions");
    assert_eq!(fa.3, fb.3, "{what}: returns");
    assert_eq!(fa.2, fb.2, "{what}: policies");
}

fn train(
    kind: ScenarioKind,
    episodes: u32,
    filter: Option<Box<dyn FnMut(&autonet::network::Packet<Payload>) -> bool>>,
) -> ScenarioOutcome {
    let mut dep = demo();
    if let Some(f) = filter {
        dep.net.set_loss_filter(f);
    }
    let s = spec(kind, &dep, episodes);
    run_training(&mut dep, &s, &LoopConfig::new(EnvConfig::demo())).unwrap()
}

#[test]
fn exactly_once_under_ten_percent_loss() {
    for kind in ScenarioKind::ALL {
        let clean = train(kind, 4, None);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let lossy = train(
            kind,
            4,
            Some(Box::new(move |p| {
                matches!(p.payload, Payload::Frame(_)) && rng.random_bool(0.1)
            })),
        );
        assert!(lossy.stats.retransmissions > 0, "{kind}: loss was injected");
        assert_eq!(lossy.aborted(), 0);
        let mut seen = lossy.applied.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), lossy.applied.len(), "{kind}: an action was applied twice");
        same(&lossy, &clean, kind.as_str());
    }
}

#[test]
fn one_lost_observation_changes_nothing() {
    let clean = train(ScenarioKind::CentralMulti, 2, None);
    let mut dropped = false;
    let lossy = train(
        ScenarioKind::CentralMulti,
        2,
        Some(Box::new(move |p| {
            let hit = !dropped
                && frame_of(&p.payload)
                    .is_some_and(|f| f.msg_type == MsgType::ObsReward && f.episode == 1 && f.step == 3);
            dropped |= hit;
            hit
        })),
    );
    assert_eq!(lossy.stats.retransmissions, 1);
    same(&lossy, &clean, "one drop");
    let step = lossy.steps.iter().find(|s| s.episode == 1 && s.step == 3).unwrap();
    assert_eq!(step.retransmissions, 1);
}

#[test]
fn frames_per_step_follow_the_agent_layout() {
    for (kind, agents) in [
        (ScenarioKind::CentralSingle, 1usize),
        (ScenarioKind::CentralMulti, 4),
        (ScenarioKind::DistributedSingle, 2),
    ] {
        let counts: Rc<RefCell<BTreeMap<(MsgType, u32, u16), usize>>> = Rc::default();
        let c = counts.clone();
        let out = train(
            kind,
            2,
            Some(Box::new(move |p| {
                if let Some(f) = frame_of(&p.payload) {
                    *c.borrow_mut().entry((f.msg_type, f.episode, f.step)).or_default() += 1;
                }
                false
            })),
        );
        assert_eq!(out.stats.retransmissions, 0);
        let counts = counts.borrow();
        for ep in 0..2 {
            for step in 0..STEPS_PER_EPISODE {
                assert_eq!(counts[&(MsgType::ObsReward, ep, step)], agents, "{kind} obs");
                assert_eq!(counts[&(MsgType::Action, ep, step)], agents, "{kind} action");
            }
        }
    }
}
