//! The per-node daemon: name service plus, on the gateway and RL nodes, the
//! agent/environment protocol endpoints.

use crate::dns::{DnsHost, DnsMessage, DnsTimer, NameService};
use crate::network::{Application, Delivery, Network};
use crate::protocol::codec::{Frame, MsgType};
use crate::protocol::session::{AgentEndpoint, Datagram, GatewaySession, ProtoTimer};
use crate::sim::LogLevel;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Dns(DnsMessage),
    Frame(Datagram),
}

impl From<DnsMessage> for Payload {
    fn from(m: DnsMessage) -> Self {
        Payload::Dns(m)
    }
}

impl From<Datagram> for Payload {
    fn from(d: Datagram) -> Self {
        Payload::Frame(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    Dns(DnsTimer),
    Proto(ProtoTimer),
}

impl From<DnsTimer> for Timer {
    fn from(t: DnsTimer) -> Self {
        Timer::Dns(t)
    }
}

impl From<ProtoTimer> for Timer {
    fn from(t: ProtoTimer) -> Self {
        Timer::Proto(t)
    }
}

pub type DaemonNet = Network<Payload, Timer>;

pub struct Daemon {
    pub dns: NameService,
    pub gateway: Option<GatewaySession>,
    pub agents: Vec<AgentEndpoint>,
    pub malformed_frames: u64,
}

impl Daemon {
    pub fn new(dns: NameService) -> Self {
        Self {
            dns,
            gateway: None,
            agents: Vec::new(),
            malformed_frames: 0,
        }
    }

    pub fn gateway_busy(&self) -> bool {
        self.gateway.as_ref().is_some_and(GatewaySession::is_busy)
    }
}

impl DnsHost for Daemon {
    fn dns(&self) -> &NameService {
        &self.dns
    }

    fn dns_mut(&mut self) -> &mut NameService {
        &mut self.dns
    }
}

impl Application<Payload, Timer> for Daemon {
    fn on_deliver(&mut self, net: &mut DaemonNet, d: Delivery<Payload>) {
        match d.payload {
            Payload::Dns(m) => self.dns.handle_delivery(net, d.at, d.src, m),
            Payload::Frame(Datagram(bytes)) => {
                let frame = match Frame::decode(&bytes) {
                    Ok(f) => f,
                    Err(e) => {
                        self.malformed_frames += 1;
                        let at = net.name(d.at).to_string();
                        net.log_event(LogLevel::Trace, "PROTO_BAD", &[&at, &e]);
                        return;
                    }
                };
                let from = net.id(d.src);
                match frame.msg_type {
                    MsgType::Action | MsgType::Ack => {
                        if let Some(gw) = self.gateway.as_mut().filter(|g| g.node() == d.at) {
                            gw.handle_frame(net, from, frame);
                        }
                    }
                    MsgType::ObsReward | MsgType::EpisodeStart | MsgType::EpisodeEnd => {
                        if let Some(agent) = self
                            .agents
                            .iter_mut()
                            .find(|a| a.agent_id() == frame.agent_id && a.node() == d.at)
                        {
                            agent.handle_frame(net, from, frame);
                        }
                    }
                }
            }
        }
    }

    fn on_timer(&mut self, net: &mut DaemonNet, timer: Timer) {
        match timer {
            Timer::Dns(t) => self.dns.handle_timer(net, t),
            Timer::Proto(t) => {
                if let Some(gw) = self.gateway.as_mut() {
                    gw.handle_timer(net, t);
                }
            }
        }
    }
}
