//! Stop-and-wait endpoints.
//!
//! The gateway owns the wireless environment. Per step it sends each agent
//! an OBS_REWARD for that agent's APs, waits for every ACTION, installs the
//! actions and runs one window. Each agent link is an independent
//! stop-and-wait channel: one outstanding frame, retransmitted with the same
//! seq on timeout. Agents answer a repeated seq from their reply cache, and
//! the gateway ignores responses that do not match the outstanding seq, so
//! every (episode, step, agent) action is applied at most once.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::codec::{decode_actions, decode_obs_reward, encode_actions, encode_obs_reward, Frame, MsgType, ObsReward};
use crate::agents::{discretize, epsilon_for_episode, Mode, ObsBin, Policy, Transition};
use crate::network::Network;
use crate::routing::NodeId;
use crate::sim::{LogLevel, Micros};
use crate::topology::NodeIdx;
use crate::wireless::{splitmix64, ApId, ApObservation, MacConfig, Observation, WirelessEnv, SLOT_US};

/// Retransmissions allowed per frame before the episode is aborted.
pub const RETRY_MAX: u32 = 5;

/// `max(4 * srtt, repair_window)`.
pub fn timeout_policy(srtt_us: Micros, repair_window_us: Micros) -> Micros {
    (4 * srtt_us).max(repair_window_us)
}

/// Encoded frame bytes as carried by the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram(pub Vec<u8>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoTimer {
    Retransmit { link: usize, seq: u32 },
    WindowDone { episode: u32, step: u16 },
}

fn log_frame<P, T>(net: &mut Network<P, T>, dir: &str, f: &Frame) {
    if net.log().enabled(LogLevel::Trace) {
        net.log_event(
            LogLevel::Trace,
            "PROTO",
            &[&dir, &f.msg_type.as_str(), &f.seq, &f.episode, &f.step],
        );
    }
}

/// Where an agent lives and which APs it controls.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentRoute {
    pub agent_id: u16,
    pub address: NodeId,
    pub aps: Vec<ApId>,
}

#[derive(Debug, Clone)]
struct Outstanding {
    seq: u32,
    msg_type: MsgType,
    bytes: Vec<u8>,
    sent_at: Micros,
    retries: u32,
}

#[derive(Debug, Clone)]
struct Link {
    route: AgentRoute,
    next_seq: u32,
    out: Option<Outstanding>,
    srtt: Option<Micros>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Starting,
    Acting,
    Windowing,
    Ending,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProtoStats {
    pub frames_sent: u64,
    pub retransmissions: u64,
    pub duplicates: u64,
    pub aborted_episodes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub episode: u32,
    pub step: u16,
    pub reward: f64,
    pub throughput: f64,
    /// Time from sending the observation to applying the last action.
    pub delay_us: Micros,
    pub retransmissions: u32,
    pub completed_at: Micros,
    /// Per-AP statistics of the window this step ran.
    pub aps: Vec<ApObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: u32,
    pub rewards: Vec<f64>,
    pub throughputs: Vec<f64>,
    pub aborted: Option<String>,
    pub started_at: Micros,
    pub finished_at: Micros,
}

impl EpisodeRecord {
    /// Sum of step rewards; NaN for an aborted episode.
    pub fn return_value(&self) -> f64 {
        if self.aborted.is_some() {
            f64::NAN
        } else {
            self.rewards.iter().sum()
        }
    }

    pub fn mean_throughput(&self) -> f64 {
        if self.aborted.is_some() || self.throughputs.is_empty() {
            f64::NAN
        } else {
            self.throughputs.iter().sum::<f64>() / self.throughputs.len() as f64
        }
    }
}

pub struct GatewaySession {
    node: NodeIdx,
    env: WirelessEnv,
    seed: u64,
    steps_per_episode: u16,
    links: Vec<Link>,
    phase: Phase,
    episode: u32,
    step: u16,
    staged: BTreeMap<ApId, MacConfig>,
    replied: BTreeSet<usize>,
    obs: Observation,
    reward: f64,
    step_started: Micros,
    step_retx: u32,
    current: Option<EpisodeRecord>,
    finished: Vec<EpisodeRecord>,
    steps: Vec<StepRecord>,
    applied: Vec<(u32, u16, u16)>,
    stats: ProtoStats,
}

impl GatewaySession {
    pub fn new(node: NodeIdx, env: WirelessEnv, seed: u64, steps_per_episode: u16, routes: Vec<AgentRoute>) -> Self {
        Self {
            node,
            env,
            seed,
            steps_per_episode,
            links: routes
                .into_iter()
                .map(|route| Link {
                    route,
                    next_seq: 0,
                    out: None,
                    srtt: None,
                })
                .collect(),
            phase: Phase::Idle,
            episode: 0,
            step: 0,
            staged: BTreeMap::new(),
            replied: BTreeSet::new(),
            obs: Observation::default(),
            reward: 0.0,
            step_started: 0,
            step_retx: 0,
            current: None,
            finished: Vec::new(),
            steps: Vec::new(),
            applied: Vec::new(),
            stats: ProtoStats::default(),
        }
    }

    pub fn node(&self) -> NodeIdx {
        self.node
    }

    pub fn env(&self) -> &WirelessEnv {
        &self.env
    }

    pub fn stats(&self) -> ProtoStats {
        self.stats
    }

    pub fn routes(&self) -> impl Iterator<Item = &AgentRoute> {
        self.links.iter().map(|l| &l.route)
    }

    pub fn srtt(&self, link: usize) -> Option<Micros> {
        self.links[link].srtt
    }

    /// Every applied (episode, step, agent) in application order.
    pub fn applied(&self) -> &[(u32, u16, u16)] {
        &self.applied
    }

    pub fn step_records(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn take_step_records(&mut self) -> Vec<StepRecord> {
        std::mem::take(&mut self.steps)
    }

    pub fn is_busy(&self) -> bool {
        !matches!(self.phase, Phase::Idle | Phase::Finished)
    }

    pub fn take_finished(&mut self) -> Vec<EpisodeRecord> {
        std::mem::take(&mut self.finished)
    }

    pub fn start_episode<P, T>(&mut self, net: &mut Network<P, T>, episode: u32)
    where
        P: From<Datagram>,
        T: From<ProtoTimer>,
    {
        assert!(!self.is_busy(), "episode already running");
        self.episode = episode;
        self.step = 0;
        self.obs = self.env.reset(self.seed, episode as u64);
        self.reward = 0.0;
        self.current = Some(EpisodeRecord {
            episode,
            rewards: Vec::new(),
            throughputs: Vec::new(),
            aborted: None,
            started_at: net.now(),
            finished_at: net.now(),
        });
        self.phase = Phase::Starting;
        self.send_all(net, MsgType::EpisodeStart, vec![Vec::new(); self.links.len()]);
    }

    /// Abort the running episode, e.g. when the driver's deadline passes.
    pub fn abort<P, T>(&mut self, net: &mut Network<P, T>, cause: &str) {
        if !self.is_busy() {
            return;
        }
        for l in &mut self.links {
            l.out = None;
        }
        self.stats.aborted_episodes += 1;
        let ep = self.episode;
        net.log_event(LogLevel::Info, "PROTO_ABORT", &[&ep, &cause]);
        if let Some(mut rec) = self.current.take() {
            rec.aborted = Some(cause.to_string());
            rec.finished_at = net.now();
            self.finished.push(rec);
        }
        self.phase = Phase::Finished;
    }

    fn send_all<P, T>(&mut self, net: &mut Network<P, T>, msg_type: MsgType, payloads: Vec<Vec<u8>>)
    where
        P: From<Datagram>,
        T: From<ProtoTimer>,
    {
        self.replied.clear();
        self.step_started = net.now();
        self.step_retx = 0;
        for (i, p) in payloads.into_iter().enumerate() {
            self.send_new(net, i, msg_type, p);
        }
    }

    fn obs_payload(&self, route: &AgentRoute) -> Vec<u8> {
        encode_obs_reward(&ObsReward {
            observation: self.obs.subset(&route.aps),
            reward: self.reward,
        })
        .expect("window statistics fit the wire format")
    }

    fn send_new<P, T>(&mut self, net: &mut Network<P, T>, i: usize, msg_type: MsgType, payload: Vec<u8>)
    where
        P: From<Datagram>,
        T: From<ProtoTimer>,
    {
        let link = &mut self.links[i];
        let seq = link.next_seq;
        link.next_seq = link.next_seq.wrapping_add(1);
        let frame = Frame {
            msg_type,
            seq,
            episode: self.episode,
            step: self.step,
            agent_id: link.route.agent_id,
            payload,
        };
        let bytes = frame.encode().expect("payload fits");
        link.out = Some(Outstanding {
            seq,
            msg_type,
            bytes,
            sent_at: net.now(),
            retries: 0,
        });
        log_frame(net, "tx", &frame);
        self.transmit(net, i);
    }

    fn transmit<P, T>(&mut self, net: &mut Network<P, T>, i: usize)
    where
        P: From<Datagram>,
        T: From<ProtoTimer>,
    {
        let window = net.repair_window_us();
        let link = &mut self.links[i];
        let out = link.out.as_mut().expect("outstanding frame");
        out.sent_at = net.now();
        let seq = out.seq;
        let bytes = out.bytes.clone();
        let timeout = timeout_policy(link.srtt.unwrap_or(0), window);
        self.stats.frames_sent += 1;
        net.send(self.node, link.route.address, P::from(Datagram(bytes)));
        net.set_timer(timeout, T::from(ProtoTimer::Retransmit { link: i, seq }));
    }

    pub fn handle_timer<P, T>(&mut self, net: &mut Network<P, T>, timer: ProtoTimer)
    where
        P: From<Datagram>,
        T: From<ProtoTimer>,
    {
        match timer {
            ProtoTimer::Retransmit { link, seq } => {
                let Some(out) = self.links[link].out.as_mut() else {
                    return;
                };
                if out.seq != seq {
                    return;
                }
                if out.retries >= RETRY_MAX {
                    let id = self.links[link].route.agent_id;
                    let cause = format!("agent-{id}-unreachable-after-{RETRY_MAX}-retransmissions");
                    self.abort(net, &cause);
                    return;
                }
                out.retries += 1;
                self.stats.retransmissions += 1;
                self.step_retx += 1;
                if net.log().enabled(LogLevel::Trace) {
                    let (t, s) = (out.msg_type.as_str(), out.seq);
                    let (ep, st) = (self.episode, self.step);
                    net.log_event(LogLevel::Trace, "PROTO", &[&"retx", &t, &s, &ep, &st]);
                }
                self.transmit(net, link);
            }
            ProtoTimer::WindowDone { episode, step } => {
                if self.phase != Phase::Windowing || episode != self.episode || step != self.step {
                    return;
                }
                self.step += 1;
                if self.step >= self.steps_per_episode {
                    self.phase = Phase::Ending;
                    let payloads = self.obs_payloads();
                    self.send_all(net, MsgType::EpisodeEnd, payloads);
                } else {
                    self.phase = Phase::Acting;
                    self.send_observations(net);
                }
            }
        }
    }

    fn obs_payloads(&self) -> Vec<Vec<u8>> {
        self.links.iter().map(|l| self.obs_payload(&l.route)).collect()
    }

    fn send_observations<P, T>(&mut self, net: &mut Network<P, T>)
    where
        P: From<Datagram>,
        T: From<ProtoTimer>,
    {
        let payloads = self.obs_payloads();
        self.send_all(net, MsgType::ObsReward, payloads);
    }

    /// A frame from `from` arrived at the gateway.
    pub fn handle_frame<P, T>(&mut self, net: &mut Network<P, T>, from: NodeId, frame: Frame)
    where
        P: From<Datagram>,
        T: From<ProtoTimer>,
    {
        log_frame(net, "rx", &frame);
        let Some(i) = self
            .links
            .iter()
            .position(|l| l.route.agent_id == frame.agent_id && l.route.address == from)
        else {
            return;
        };
        let expected = match self.links[i].out.as_ref() {
            Some(out) if out.seq == frame.seq => out.msg_type,
            _ => {
                self.stats.duplicates += 1;
                return;
            }
        };
        let wanted = match expected {
            MsgType::ObsReward => MsgType::Action,
            _ => MsgType::Ack,
        };
        if frame.msg_type != wanted {
            return;
        }
        let out = self.links[i].out.take().expect("checked above");
        if out.retries == 0 {
            // Karn: only unambiguous samples.
            let sample = net.now() - out.sent_at;
            let link = &mut self.links[i];
            link.srtt = Some(match link.srtt {
                None => sample,
                Some(s) => (7 * s + sample) / 8,
            });
        }
        match self.phase {
            Phase::Starting => {
                self.replied.insert(i);
                if self.replied.len() == self.links.len() {
                    self.phase = Phase::Acting;
                    self.send_observations(net);
                }
            }
            Phase::Acting => {
                let aps = &self.links[i].route.aps;
                let actions = match decode_actions(&frame.payload) {
                    Ok(a) if a.len() == aps.len() && a.iter().zip(aps).all(|((ap, _), want)| ap == want) => a,
                    _ => {
                        self.abort(net, "malformed-action");
                        return;
                    }
                };
                self.staged.extend(actions);
                self.replied.insert(i);
                if self.replied.len() == self.links.len() {
                    self.run_window(net);
                }
            }
            Phase::Ending => {
                self.replied.insert(i);
                if self.replied.len() == self.links.len() {
                    let mut rec = self.current.take().expect("episode running");
                    rec.finished_at = net.now();
                    self.finished.push(rec);
                    self.phase = Phase::Finished;
                }
            }
            Phase::Idle | Phase::Windowing | Phase::Finished => {}
        }
    }

    fn run_window<P, T>(&mut self, net: &mut Network<P, T>)
    where
        T: From<ProtoTimer>,
    {
        let staged = std::mem::take(&mut self.staged);
        if let Err(e) = self.env.apply_actions(&staged) {
            let cause = format!("env-rejected-actions:{e}");
            self.abort(net, &cause.replace(' ', "-"));
            return;
        }
        for l in &self.links {
            self.applied.push((self.episode, self.step, l.route.agent_id));
        }
        let (obs, reward) = self.env.step_window();
        let throughput = obs.total_delivered() as f64 / obs.window_slots.max(1) as f64;
        let delay_us = net.now() - self.step_started;
        let (ep, step, retx) = (self.episode, self.step, self.step_retx);
        net.log_event(LogLevel::Info, "STEP", &[&ep, &step, &retx]);
        self.steps.push(StepRecord {
            episode: ep,
            step,
            reward,
            throughput,
            delay_us,
            retransmissions: retx,
            completed_at: net.now(),
            aps: obs.aps.clone(),
        });
        if let Some(rec) = self.current.as_mut() {
            rec.rewards.push(reward);
            rec.throughputs.push(throughput);
        }
        self.obs = obs;
        self.reward = reward;
        self.phase = Phase::Windowing;
        let window_us = obs_window_us(&self.obs);
        net.set_timer(window_us, T::from(ProtoTimer::WindowDone { episode: ep, step }));
    }
}

fn obs_window_us(obs: &Observation) -> Micros {
    obs.window_slots as Micros * SLOT_US
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AgentStats {
    pub frames_handled: u64,
    pub duplicates: u64,
    pub malformed: u64,
}

/// An RL agent's protocol endpoint on its RL node.
#[derive(Debug, Clone)]
pub struct AgentEndpoint {
    agent_id: u16,
    node: NodeIdx,
    gateway: NodeId,
    aps: Vec<ApId>,
    policy: Policy,
    mode: Mode,
    total_episodes: u32,
    rng: ChaCha8Rng,
    last_seq: Option<u32>,
    last_reply: Vec<u8>,
    prev: Option<(ObsBin, u32)>,
    episode_return: f64,
    returns: BTreeMap<u32, f64>,
    stats: AgentStats,
}

impl AgentEndpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        agent_id: u16,
        node: NodeIdx,
        gateway: NodeId,
        aps: Vec<ApId>,
        mut policy: Policy,
        mode: Mode,
        total_episodes: u32,
        seed: u64,
    ) -> Self {
        if mode == Mode::Infer {
            policy.freeze();
        }
        let rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(0xA6E7 + agent_id as u64)));
        Self {
            agent_id,
            node,
            gateway,
            aps,
            policy,
            mode,
            total_episodes,
            rng,
            last_seq: None,
            last_reply: Vec::new(),
            prev: None,
            episode_return: 0.0,
            returns: BTreeMap::new(),
            stats: AgentStats::default(),
        }
    }

    pub fn agent_id(&self) -> u16 {
        self.agent_id
    }

    pub fn node(&self) -> NodeIdx {
        self.node
    }

    pub fn aps(&self) -> &[ApId] {
        &self.aps
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn into_policy(self) -> Policy {
        self.policy
    }

    pub fn stats(&self) -> AgentStats {
        self.stats
    }

    /// Returns recorded at EPISODE_END, by episode.
    pub fn returns(&self) -> &BTreeMap<u32, f64> {
        &self.returns
    }

    fn reply<P, T>(&mut self, net: &mut Network<P, T>, request: &Frame, msg_type: MsgType, payload: Vec<u8>)
    where
        P: From<Datagram>,
    {
        let frame = Frame {
            msg_type,
            seq: request.seq,
            episode: request.episode,
            step: request.step,
            agent_id: self.agent_id,
            payload,
        };
        log_frame(net, "tx", &frame);
        self.last_seq = Some(request.seq);
        self.last_reply = frame.encode().expect("small payload");
        net.send(self.node, self.gateway, P::from(Datagram(self.last_reply.clone())));
    }

    fn learn(&mut self, obs: &ObsReward) -> ObsBin {
        let state = discretize(&obs.observation);
        if let Some((s, a)) = self.prev.take() {
            self.episode_return += obs.reward;
            if self.mode == Mode::Train {
                let t = Transition {
                    state: s,
                    action: a,
                    reward: obs.reward,
                    next: state.clone(),
                };
                self.policy.update(&t).expect("training policy is not frozen");
            }
        }
        state
    }

    pub fn handle_frame<P, T>(&mut self, net: &mut Network<P, T>, from: NodeId, frame: Frame)
    where
        P: From<Datagram>,
    {
        log_frame(net, "rx", &frame);
        if from != self.gateway {
            return;
        }
        match self.last_seq {
            Some(last) if last == frame.seq => {
                self.stats.duplicates += 1;
                let bytes = self.last_reply.clone();
                net.send(self.node, self.gateway, P::from(Datagram(bytes)));
                return;
            }
            Some(last) if frame.seq < last => return,
            _ => {}
        }
        self.stats.frames_handled += 1;
        match frame.msg_type {
            MsgType::EpisodeStart => {
                self.prev = None;
                self.episode_return = 0.0;
                if self.mode == Mode::Train {
                    self.policy
                        .set_epsilon(epsilon_for_episode(frame.episode, self.total_episodes));
                }
                self.reply(net, &frame, MsgType::Ack, Vec::new());
            }
            MsgType::ObsReward => {
                let Ok(obs) = decode_obs_reward(&frame.payload) else {
                    self.stats.malformed += 1;
                    return;
                };
                let state = self.learn(&obs);
                let action = self.policy.select_action(&state, self.mode, &mut self.rng);
                let configs = self
                    .policy
                    .action_space()
                    .decode(action)
                    .expect("policy yields valid actions");
                let pairs: Vec<(ApId, MacConfig)> = self.aps.iter().copied().zip(configs).collect();
                self.prev = Some((state, action));
                self.reply(net, &frame, MsgType::Action, encode_actions(&pairs));
            }
            MsgType::EpisodeEnd => {
                let Ok(obs) = decode_obs_reward(&frame.payload) else {
                    self.stats.malformed += 1;
                    return;
                };
                self.learn(&obs);
                self.returns.insert(frame.episode, self.episode_return);
                self.reply(net, &frame, MsgType::Ack, Vec::new());
            }
            MsgType::Action | MsgType::Ack => {}
        }
    }
}
