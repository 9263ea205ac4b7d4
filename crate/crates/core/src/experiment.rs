//! End-to-end scenario runs over the simulated network.
//!
//! [`deploy`] walks the start-up sequence (routing convergence, DNS
//! registration by every service node, discovery by the gateway). The
//! scenario loop then places agents on RL nodes and drives episodes through
//! the gateway session.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::agents::{assign_agents, AgentAssignment, AgentError, Hyperparams, Mode, Policy, ScenarioSpec};
use crate::daemon::{Daemon, DaemonNet};
use crate::dns::{dns_register, local_dns_frontend, DnsConfig, DnsError, NameService};
use crate::network::{NetError, Network};
use crate::protocol::session::{AgentEndpoint, AgentRoute, EpisodeRecord, GatewaySession, ProtoStats, StepRecord};
use crate::protocol::RETRY_MAX;
use crate::routing::{NodeId, RoutingConfig};
use crate::sim::{EventLog, LogLevel, Micros, MICROS_PER_MS, MICROS_PER_SEC};
use crate::topology::{NodeIdx, NodeRole, Topology};
use crate::wireless::{EnvConfig, WirelessEnv, STEPS_PER_EPISODE};

pub const GATEWAY_NAME: &str = "gateway.kira.internal";

/// DNS name of the `k`-th RL node (1-based, by node name order).
pub fn rl_agent_name(k: usize) -> String {
    format!("rlagent{k}.kira.internal")
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("bootstrap: {0}")]
    Bootstrap(#[from] NetError),
    #[error("convergence: routing did not converge")]
    NotConverged,
    #[error("topology has no gateway node")]
    NoGateway,
    #[error("dns-update: {0}")]
    Registration(DnsError),
    #[error("discovery: {0}")]
    Discovery(String),
    #[error("scenario: {0}")]
    Scenario(#[from] AgentError),
    #[error("failure schedule: {0}")]
    Schedule(String),
}

impl ExperimentError {
    /// The start-up phase the error belongs to.
    pub fn phase(&self) -> &'static str {
        match self {
            ExperimentError::Bootstrap(_) | ExperimentError::NoGateway => "bootstrap",
            ExperimentError::NotConverged => "convergence",
            ExperimentError::Registration(_) => "dns-update",
            ExperimentError::Discovery(_) => "discovery",
            ExperimentError::Scenario(_) | ExperimentError::Schedule(_) => "scenario",
        }
    }
}

/// One service registration and what the gateway learned about it.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolution {
    pub dns_name: String,
    pub node: String,
    pub result: Result<NodeId, DnsError>,
    pub latency_us: Micros,
}

pub struct Deployment {
    pub net: DaemonNet,
    pub daemon: Daemon,
    pub gateway: NodeIdx,
    /// RL-node registrations in name order, with the gateway's lookups.
    pub discovered: Vec<Resolution>,
}

impl Deployment {
    /// RL nodes the gateway resolved, in discovery order.
    pub fn rl_nodes(&self) -> Vec<String> {
        self.discovered
            .iter()
            .filter(|r| r.result.is_ok())
            .map(|r| r.node.clone())
            .collect()
    }

    pub fn address_of(&self, node: &str) -> Option<NodeId> {
        self.discovered
            .iter()
            .find(|r| r.node == node)
            .and_then(|r| r.result.as_ref().ok().copied())
    }

    pub fn now(&self) -> Micros {
        self.net.now()
    }

    pub fn log(&self) -> &EventLog {
        self.net.log()
    }

    /// Schedule link failures relative to the current time.
    pub fn schedule_failures(&mut self, spec: &ScenarioSpec) -> Result<(), ExperimentError> {
        let base = self.net.now();
        for f in &spec.failure_schedule {
            self.net
                .fail_link(&f.a, &f.b, base + f.at_us)
                .map_err(|e| ExperimentError::Schedule(e.to_string()))?;
        }
        Ok(())
    }
}

fn phase(net: &mut DaemonNet, name: &str) {
    net.log_event(LogLevel::Info, "PHASE", &[&name]);
}

/// Boot the network and run the start-up sequence: convergence, DNS updates
/// from the gateway and every RL node, then discovery of the RL nodes by the
/// gateway's local frontend. Unresolvable RL nodes are reported in
/// `discovered` rather than failing the deployment.
pub fn deploy(
    topo: Topology,
    routing: RoutingConfig,
    dns: DnsConfig,
    level: LogLevel,
) -> Result<Deployment, ExperimentError> {
    let gateway = topo
        .nodes_with_role(NodeRole::Gateway)
        .next()
        .ok_or(ExperimentError::NoGateway)?;
    let rl: Vec<NodeIdx> = topo.nodes_with_role(NodeRole::RlNode).collect();
    let n = topo.node_count();
    let mut net: DaemonNet = Network::new(topo, routing, level)?;
    let mut daemon = Daemon::new(NameService::new(n, dns));
    phase(&mut net, "bootstrap");
    let t = net.routing().convergence_time_us();
    net.run_until(t, &mut daemon);
    let converged = net.routing().is_converged();
    net.log_event(LogLevel::Info, "CONVERGED", &[&converged]);
    if !converged {
        return Err(ExperimentError::NotConverged);
    }

    phase(&mut net, "dns-update");
    let gw_id = net.id(gateway);
    dns_register(&mut net, &mut daemon, gateway, GATEWAY_NAME, gw_id).map_err(ExperimentError::Registration)?;
    for (k, &node) in rl.iter().enumerate() {
        let id = net.id(node);
        // A node cut off from the rest still stores its own record locally;
        // the gateway's lookup is what decides whether it was discovered.
        let _ = dns_register(&mut net, &mut daemon, node, &rl_agent_name(k + 1), id);
    }

    phase(&mut net, "discovery");
    let mut discovered = Vec::new();
    for (k, &node) in rl.iter().enumerate() {
        let dns_name = rl_agent_name(k + 1);
        let start = net.now();
        let result = local_dns_frontend(&mut net, &mut daemon, gateway, &dns_name).map(|a| a.address);
        discovered.push(Resolution {
            dns_name,
            node: net.name(node).to_string(),
            result,
            latency_us: net.now() - start,
        });
    }
    Ok(Deployment {
        net,
        daemon,
        gateway,
        discovered,
    })
}

/// Knobs the scenario loop needs beyond the spec itself.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub env: EnvConfig,
    pub steps_per_episode: u16,
    pub hyper: Hyperparams,
    /// Simulated-time budget per episode before it is aborted.
    pub episode_budget_us: Micros,
}

impl LoopConfig {
    pub fn new(env: EnvConfig) -> Self {
        let steps = STEPS_PER_EPISODE;
        Self {
            env,
            steps_per_episode: steps,
            hyper: Hyperparams::default(),
            episode_budget_us: steps as Micros * (RETRY_MAX as Micros + 2) * MICROS_PER_SEC,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeReturn {
    pub episode: u32,
    pub agent_id: u16,
    pub return_value: f64,
}

pub struct ScenarioOutcome {
    pub mode: Mode,
    pub episodes: Vec<EpisodeRecord>,
    pub returns: Vec<EpisodeReturn>,
    pub steps: Vec<StepRecord>,
    pub policies: Vec<(AgentAssignment, Policy)>,
    pub stats: ProtoStats,
    /// Every applied (episode, step, agent) action.
    pub applied: Vec<(u32, u16, u16)>,
}

impl ScenarioOutcome {
    pub fn mean_throughputs(&self) -> Vec<(u32, f64)> {
        self.episodes.iter().map(|e| (e.episode, e.mean_throughput())).collect()
    }

    pub fn aborted(&self) -> usize {
        self.episodes.iter().filter(|e| e.aborted.is_some()).count()
    }
}

/// Train fresh policies.
pub fn run_training(
    dep: &mut Deployment,
    spec: &ScenarioSpec,
    cfg: &LoopConfig,
) -> Result<ScenarioOutcome, ExperimentError> {
    run_scenario(dep, spec, cfg, Mode::Train, None)
}

/// Run frozen policies; they come back unchanged.
pub fn run_inference(
    dep: &mut Deployment,
    spec: &ScenarioSpec,
    cfg: &LoopConfig,
    policies: Vec<Policy>,
) -> Result<ScenarioOutcome, ExperimentError> {
    run_scenario(dep, spec, cfg, Mode::Infer, Some(policies))
}

fn run_scenario(
    dep: &mut Deployment,
    spec: &ScenarioSpec,
    cfg: &LoopConfig,
    mode: Mode,
    policies: Option<Vec<Policy>>,
) -> Result<ScenarioOutcome, ExperimentError> {
    let assignments = assign_agents(spec)?;
    if let Some(p) = &policies {
        let shapes_match = p.len() == assignments.len()
            && p.iter()
                .zip(&assignments)
                .all(|(p, a)| p.action_space() == &a.action_space);
        if !shapes_match {
            return Err(AgentError::InvalidScenario("policies do not match the scenario's agents".into()).into());
        }
    }
    let env = WirelessEnv::new(cfg.env.clone());
    let universe = env.ap_ids().to_vec();
    if universe != spec.ap_ids {
        return Err(AgentError::InvalidScenario(format!(
            "scenario APs {:?} differ from the environment's {:?}",
            spec.ap_ids, universe
        ))
        .into());
    }

    phase(&mut dep.net, "agent-setup");
    let mut routes = Vec::new();
    let mut agents = Vec::new();
    let mut gateway_by_node: BTreeMap<NodeIdx, NodeId> = BTreeMap::new();
    for (k, a) in assignments.iter().enumerate() {
        let node = dep
            .net
            .topology()
            .node_index(&a.rl_node)
            .ok_or_else(|| ExperimentError::Discovery(format!("unknown RL node {}", a.rl_node)))?;
        let address = dep
            .address_of(&a.rl_node)
            .ok_or_else(|| ExperimentError::Discovery(format!("{} was not discovered", a.rl_node)))?;
        // Each RL node looks up the gateway through its own frontend.
        let gw = match gateway_by_node.get(&node) {
            Some(id) => *id,
            None => {
                let id = local_dns_frontend(&mut dep.net, &mut dep.daemon, node, GATEWAY_NAME)
                    .map_err(|e| ExperimentError::Discovery(format!("{} cannot resolve the gateway: {e}", a.rl_node)))?
                    .address;
                gateway_by_node.insert(node, id);
                id
            }
        };
        let policy = match &policies {
            Some(p) => p[k].clone(),
            None => Policy::new(a.action_space.clone(), cfg.hyper),
        };
        agents.push(AgentEndpoint::new(
            a.agent_id,
            node,
            gw,
            a.aps.clone(),
            policy,
            mode,
            spec.episodes,
            spec.seed,
        ));
        routes.push(AgentRoute {
            agent_id: a.agent_id,
            address,
            aps: a.aps.clone(),
        });
    }
    dep.daemon.agents = agents;
    dep.daemon.gateway = Some(GatewaySession::new(
        dep.gateway,
        env,
        spec.seed,
        cfg.steps_per_episode,
        routes,
    ));
    dep.schedule_failures(spec)?;

    phase(&mut dep.net, "scenario");
    let mut episodes = Vec::with_capacity(spec.episodes as usize);
    let mut steps = Vec::new();
    for ep in 0..spec.episodes {
        let gw = dep.daemon.gateway.as_mut().expect("installed");
        gw.start_episode(&mut dep.net, ep);
        let deadline = dep.net.now() + cfg.episode_budget_us;
        dep.net.run_until_cond(&mut dep.daemon, deadline, |d| !d.gateway_busy());
        let gw = dep.daemon.gateway.as_mut().expect("installed");
        if gw.is_busy() {
            gw.abort(&mut dep.net, "episode-deadline");
        }
        episodes.extend(gw.take_finished());
        steps.extend(gw.take_step_records());
    }
    // Let in-flight acks and retransmission timers drain before the next run.
    let settle = dep.net.now() + MICROS_PER_MS;
    dep.net.run_until(settle, &mut dep.daemon);

    let gw = dep.daemon.gateway.take().expect("installed");
    let agents = std::mem::take(&mut dep.daemon.agents);
    let mut returns = Vec::new();
    for rec in &episodes {
        for a in &agents {
            let value = if rec.aborted.is_some() {
                f64::NAN
            } else {
                a.returns().get(&rec.episode).copied().unwrap_or(f64::NAN)
            };
            returns.push(EpisodeReturn {
                episode: rec.episode,
                agent_id: a.agent_id(),
                return_value: value,
            });
        }
    }
    let policies = assignments
        .into_iter()
        .zip(agents)
        .map(|(a, e)| (a, e.into_policy()))
        .collect();
    Ok(ScenarioOutcome {
        mode,
        episodes,
        returns,
        steps,
        policies,
        stats: gw.stats(),
        applied: gw.applied().to_vec(),
    })
}
