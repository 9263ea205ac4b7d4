//! Experiment driver behind the `autonet` binary: `run`, `compare` and
//! `discover`. Everything here is deterministic given its inputs; `compare`
//! only reads files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{policy_set_from_text, policy_set_to_text, LinkFailure, Mode, Policy, ScenarioKind, ScenarioSpec};
use crate::dns::{dns_query, DnsConfig, DnsError};
use crate::experiment::{
    deploy, run_inference, run_training, Deployment, EpisodeReturn, ExperimentError, LoopConfig, ScenarioOutcome,
    GATEWAY_NAME,
};
use crate::routing::{NodeId, RoutingConfig};
use crate::sim::{LogLevel, Micros, MICROS_PER_MS};
use crate::topology::{Topology, DEMO_TOPOLOGY};
use crate::wireless::{EnvConfig, EnvMode, WirelessEnv};

pub const TRAINING_CSV: &str = "training_returns.csv";
pub const INFERENCE_CSV: &str = "inference_throughput.csv";
pub const STEPS_CSV: &str = "steps.csv";
pub const EVENTS_LOG: &str = "events.log";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const POLICY_FILE: &str = "policy.txt";
pub const COMPARE_TXT: &str = "compare.txt";
pub const COMPARE_CSV: &str = "compare.csv";

pub const TRAINING_HEADER: &str = "scenario,seed,episode,agent_id,return";
pub const INFERENCE_HEADER: &str = "scenario,seed,episode,mean_throughput";
pub const STEPS_HEADER: &str = "episode,step,ap_id,delivered,collisions,queue_len,reward";

/// Frozen-policy episodes run after training so a train directory also
/// carries an inference throughput.
pub const EVAL_EPISODES: u32 = 20;
pub const SMOOTHING_WINDOW: usize = 10;
/// Episodes averaged for the summary's final return.
pub const SUMMARY_TAIL: usize = 10;
pub const DEFAULT_EPISODES: u32 = 300;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{phase}: {msg}")]
    Phase { phase: &'static str, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("compare: {0}")]
    Incompatible(String),
}

impl OrchestratorError {
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::Usage(_) => 2,
            _ => 1,
        }
    }
}

impl From<ExperimentError> for OrchestratorError {
    fn from(e: ExperimentError) -> Self {
        OrchestratorError::Phase {
            phase: e.phase(),
            msg: e.to_string(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String, OrchestratorError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, contents: &str) -> Result<(), OrchestratorError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Parse a `--fail` argument: `"t_ms a b"`, the time counted from the start
/// of the scenario loop.
pub fn parse_failure(s: &str) -> Result<LinkFailure, String> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    let [t, a, b] = parts.as_slice() else {
        return Err(format!("expected \"t_ms a b\", got {s:?}"));
    };
    let ms: u64 = t.parse().map_err(|_| format!("bad failure time {t:?}"))?;
    Ok(LinkFailure {
        at_us: ms * MICROS_PER_MS,
        a: a.to_string(),
        b: b.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub scenario: ScenarioKind,
    pub mode: Mode,
    pub episodes: u32,
    pub seed: u64,
    /// `None` uses the built-in demo topology.
    pub topology: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub policy: Option<PathBuf>,
    pub failures: Vec<LinkFailure>,
    pub env: EnvMode,
    pub log_level: LogLevel,
}

impl RunManifest {
    pub fn new(scenario: ScenarioKind, mode: Mode, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario,
            mode,
            episodes: DEFAULT_EPISODES,
            seed: 0,
            topology: None,
            out_dir: out_dir.into(),
            policy: None,
            failures: Vec::new(),
            env: EnvMode::Demo,
            log_level: LogLevel::Info,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        match (self.mode, &self.policy) {
            (Mode::Infer, None) => return Err(OrchestratorError::Usage("--mode infer requires --policy".into())),
            (Mode::Infer, Some(p)) if !p.is_file() => {
                return Err(OrchestratorError::Usage(format!(
                    "policy snapshot {} does not exist",
                    p.display()
                )))
            }
            _ => {}
        }
        if let Some(t) = &self.topology {
            if !t.is_file() {
                return Err(OrchestratorError::Usage(format!(
                    "topology {} does not exist",
                    t.display()
                )));
            }
        }
        Ok(())
    }
}

/// What `manifest.json` records about a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub scenario: String,
    pub mode: String,
    pub env: String,
    pub seed: u64,
    pub episodes: u32,
    pub eval_episodes: u32,
    pub topology: String,
    pub policy_in: Option<String>,
    pub failures: Vec<String>,
    pub agents: usize,
    pub rl_nodes: Vec<String>,
    pub aborted_episodes: usize,
    pub policy_sha256: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub scenario: ScenarioKind,
    pub mode: Mode,
    pub agents: usize,
    pub episodes: u32,
    pub aborted_episodes: usize,
    pub retransmissions: u64,
    /// Mean per-episode return over the last [`SUMMARY_TAIL`] training episodes.
    pub mean_return_tail: Option<f64>,
    pub mean_inference_throughput: f64,
    pub outcome_files: Vec<PathBuf>,
}

impl RunSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario {}", self.scenario);
        let _ = writeln!(s, "mode {}", self.mode.as_str());
        let _ = writeln!(s, "agents {}", self.agents);
        let _ = writeln!(s, "episodes {}", self.episodes);
        let _ = writeln!(s, "aborted_episodes {}", self.aborted_episodes);
        let _ = writeln!(s, "retransmissions {}", self.retransmissions);
        if let Some(r) = self.mean_return_tail {
            let _ = writeln!(s, "mean_return_last{SUMMARY_TAIL} {}", fmt_num(r));
        }
        let _ = writeln!(
            s,
            "mean_inference_throughput {}",
            fmt_num(self.mean_inference_throughput)
        );
        s
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.6}")
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Mean of the non-NaN values, NaN when there are none.
pub fn nan_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| !v.is_nan())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Per-episode return averaged over agents.
pub fn episode_curve(returns: &[EpisodeReturn]) -> Vec<(u32, f64)> {
    let mut by_ep: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for r in returns {
        by_ep.entry(r.episode).or_default().push(r.return_value);
    }
    by_ep.into_iter().map(|(ep, v)| (ep, nan_mean(v))).collect()
}

/// Trailing moving average; NaN entries are skipped rather than poisoning
/// the window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| nan_mean(values[i.saturating_sub(window - 1)..=i].iter().copied()))
        .collect()
}

fn tail_mean(curve: &[f64], n: usize) -> f64 {
    nan_mean(curve[curve.len().saturating_sub(n)..].iter().copied())
}

pub fn load_topology(path: Option<&Path>) -> Result<Topology, OrchestratorError> {
    let text = match path {
        Some(p) => read(p)?,
        None => DEMO_TOPOLOGY.to_string(),
    };
    Topology::parse(&text).map_err(|e| OrchestratorError::Phase {
        phase: "topology",
        msg: e.to_string(),
    })
}

fn scenario_spec(m: &RunManifest, dep: &Deployment, env: &EnvConfig, episodes: u32) -> ScenarioSpec {
    ScenarioSpec {
        kind: m.scenario,
        ap_ids: WirelessEnv::new(env.clone()).ap_ids().to_vec(),
        rl_node_names: dep.rl_nodes(),
        episodes,
        seed: m.seed,
        failure_schedule: m.failures.clone(),
    }
}

fn training_csv(kind: ScenarioKind, seed: u64, returns: &[EpisodeReturn]) -> String {
    let mut s = format!("{TRAINING_HEADER}\n");
    for r in returns {
        let _ = writeln!(
            s,
            "{kind},{seed},{},{},{}",
            r.episode,
            r.agent_id,
            fmt_num(r.return_value)
        );
    }
    s
}

fn inference_csv(kind: ScenarioKind, seed: u64, out: &ScenarioOutcome) -> String {
    let mut s = format!("{INFERENCE_HEADER}\n");
    for (ep, t) in out.mean_throughputs() {
        let _ = writeln!(s, "{kind},{seed},{ep},{}", fmt_num(t));
    }
    s
}

fn steps_csv(out: &ScenarioOutcome) -> String {
    let mut s = format!("{STEPS_HEADER}\n");
    for rec in &out.steps {
        for a in rec.aps.iter().filter(|a| a.active) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                rec.episode,
                rec.step,
                a.ap_id,
                a.delivered,
                a.collisions,
                a.queue_len,
                fmt_num(rec.reward)
            );
        }
    }
    s
}

fn load_policies(path: &Path, kind: ScenarioKind) -> Result<Vec<Policy>, OrchestratorError> {
    let text = read(path)?;
    let (snap_kind, entries) = policy_set_from_text(&text).map_err(|e| OrchestratorError::Phase {
        phase: "policy",
        msg: e.to_string(),
    })?;
    if snap_kind != kind {
        return Err(OrchestratorError::Phase {
            phase: "policy",
            msg: format!("snapshot was trained for {snap_kind}, not {kind}"),
        });
    }
    Ok(entries.into_iter().map(|(_, _, _, p)| p).collect())
}

fn policies_digest(policies: &[Policy]) -> String {
    let mut h = Sha256::new();
    for p in policies {
        h.update(p.digest());
    }
    hex(&h.finalize())
}

/// Boot, discover, run the scenario and write every artifact under
/// `m.out_dir`.
pub fn cmd_run(m: &RunManifest) -> Result<RunSummary, OrchestratorError> {
    m.validate()?;
    fs::create_dir_all(&m.out_dir).map_err(io_err(&m.out_dir))?;
    let topo = load_topology(m.topology.as_deref())?;
    let env = EnvConfig::for_mode(m.env);
    let cfg = LoopConfig::new(env.clone());
    let loaded = match (&m.mode, &m.policy) {
        (Mode::Infer, Some(p)) => Some(load_policies(p, m.scenario)?),
        _ => None,
    };

    let mut dep = deploy(topo, RoutingConfig::default(), DnsConfig::default(), m.log_level)?;
    let spec = scenario_spec(m, &dep, &env, m.episodes);
    let mut files = Vec::new();
    let (main, evaluation, final_policies) = match loaded {
        None => {
            let trained = run_training(&mut dep, &spec, &cfg)?;
            let policies: Vec<Policy> = trained.policies.iter().map(|(_, p)| p.clone()).collect();
            let mut eval_spec = spec.clone();
            eval_spec.episodes = EVAL_EPISODES;
            eval_spec.failure_schedule.clear();
            let eval = run_inference(&mut dep, &eval_spec, &cfg, policies.clone())?;
            (trained, eval, policies)
        }
        Some(mut policies) => {
            policies.iter_mut().for_each(Policy::freeze);
            let before = policies_digest(&policies);
            let out = run_inference(&mut dep, &spec, &cfg, policies.clone())?;
            let after: Vec<Policy> = out.policies.iter().map(|(_, p)| p.clone()).collect();
            if policies_digest(&after) != before {
                return Err(OrchestratorError::Phase {
                    phase: "scenario",
                    msg: "policy changed during inference".into(),
                });
            }
            let eval_view = ScenarioOutcome {
                mode: out.mode,
                episodes: out.episodes.clone(),
                returns: out.returns.clone(),
                steps: Vec::new(),
                policies: Vec::new(),
                stats: out.stats,
                applied: Vec::new(),
            };
            (out, eval_view, policies)
        }
    };

    let put = |name: &str, contents: &str, files: &mut Vec<String>| -> Result<(), OrchestratorError> {
        write(&m.out_dir.join(name), contents)?;
        files.push(name.to_string());
        Ok(())
    };
    let curve: Vec<f64> = episode_curve(&main.returns).into_iter().map(|(_, v)| v).collect();
    let mean_return_tail = (m.mode == Mode::Train).then(|| tail_mean(&curve, SUMMARY_TAIL));
    if m.mode == Mode::Train {
        put(
            TRAINING_CSV,
            &training_csv(m.scenario, m.seed, &main.returns),
            &mut files,
        )?;
        put(POLICY_FILE, &policy_set_to_text(m.scenario, &main.policies), &mut files)?;
    }
    put(
        INFERENCE_CSV,
        &inference_csv(m.scenario, m.seed, &evaluation),
        &mut files,
    )?;
    put(STEPS_CSV, &steps_csv(&main), &mut files)?;
    put(EVENTS_LOG, &dep.log().render(), &mut files)?;

    let summary = RunSummary {
        scenario: m.scenario,
        mode: m.mode,
        agents: main.policies.len(),
        episodes: m.episodes,
        aborted_episodes: main.aborted(),
        retransmissions: main.stats.retransmissions,
        mean_return_tail,
        mean_inference_throughput: nan_mean(evaluation.mean_throughputs().into_iter().map(|(_, t)| t)),
        outcome_files: Vec::new(),
    };
    put(SUMMARY_TXT, &summary.to_text(), &mut files)?;

    files.push(MANIFEST_JSON.to_string());
    let record = ManifestRecord {
        scenario: m.scenario.to_string(),
        mode: m.mode.as_str().to_string(),
        env: m.env.as_str().to_string(),
        seed: m.seed,
        episodes: m.episodes,
        eval_episodes: if m.mode == Mode::Train { EVAL_EPISODES } else { 0 },
        topology: m
            .topology
            .as_ref()
            .map_or_else(|| "builtin:demo".to_string(), |p| p.display().to_string()),
        policy_in: m.policy.as_ref().map(|p| p.display().to_string()),
        failures: m
            .failures
            .iter()
            .map(|f| format!("{} {} {}", f.at_us / MICROS_PER_MS, f.a, f.b))
            .collect(),
        agents: summary.agents,
        rl_nodes: dep.rl_nodes(),
        aborted_episodes: summary.aborted_episodes,
        policy_sha256: policies_digest(&final_policies),
        files: files.clone(),
    };
    let json = serde_json::to_string_pretty(&record).expect("manifest serializes");
    write(&m.out_dir.join(MANIFEST_JSON), &(json + "\n"))?;

    Ok(RunSummary {
        outcome_files: files.iter().map(|f| m.out_dir.join(f)).collect(),
        ..summary
    })
}

/// A completed run directory as `compare` sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub dir: PathBuf,
    pub manifest: ManifestRecord,
    /// Per-episode return averaged over agents; empty for infer-only runs.
    pub curve: Vec<(u32, f64)>,
    pub inference: Vec<(u32, f64)>,
}

fn parse_num(field: &str) -> Option<f64> {
    if field == "NaN" {
        Some(f64::NAN)
    } else {
        field.parse().ok()
    }
}

fn read_csv(path: &Path, header: &str) -> Result<Vec<Vec<String>>, OrchestratorError> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(OrchestratorError::Incompatible(format!(
            "{} does not start with {header:?}",
            path.display()
        )));
    }
    let width = header.split(',').count();
    lines
        .enumerate()
        .map(|(i, l)| {
            let row: Vec<String> = l.split(',').map(str::to_string).collect();
            if row.len() == width {
                Ok(row)
            } else {
                Err(OrchestratorError::Incompatible(format!(
                    "{} line {}: expected {width} fields",
                    path.display(),
                    i + 2
                )))
            }
        })
        .collect()
}

fn bad_row(path: &Path) -> OrchestratorError {
    OrchestratorError::Incompatible(format!("{}: malformed row", path.display()))
}

pub fn load_run(dir: &Path) -> Result<RunData, OrchestratorError> {
    let mpath = dir.join(MANIFEST_JSON);
    let manifest: ManifestRecord = serde_json::from_str(&read(&mpath)?)
        .map_err(|e| OrchestratorError::Incompatible(format!("{}: {e}", mpath.display())))?;

    let tpath = dir.join(TRAINING_CSV);
    let mut returns = Vec::new();
    if tpath.is_file() {
        for row in read_csv(&tpath, TRAINING_HEADER)? {
            returns.push(EpisodeReturn {
                episode: row[2].parse().map_err(|_| bad_row(&tpath))?,
                agent_id: row[3].parse().map_err(|_| bad_row(&tpath))?,
                return_value: parse_num(&row[4]).ok_or_else(|| bad_row(&tpath))?,
            });
        }
    }
    let ipath = dir.join(INFERENCE_CSV);
    let inference = read_csv(&ipath, INFERENCE_HEADER)?
        .into_iter()
        .map(|row| {
            Ok((
                row[2].parse().map_err(|_| bad_row(&ipath))?,
                parse_num(&row[3]).ok_or_else(|| bad_row(&ipath))?,
            ))
        })
        .collect::<Result<Vec<_>, OrchestratorError>>()?;
    Ok(RunData {
        dir: dir.to_path_buf(),
        manifest,
        curve: episode_curve(&returns),
        inference,
    })
}

/// Learning curves (smoothed) and inference throughput, one column per run.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub episodes: Vec<u32>,
    /// `smoothed[run][row]`, aligned with `episodes`; NaN where a run has no
    /// value.
    pub smoothed: Vec<Vec<f64>>,
    pub final_return: Vec<f64>,
    pub inference: Vec<f64>,
    pub warnings: Vec<String>,
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        "-".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = format!("metric,episode,{}\n", self.labels.join(","));
        let row = |metric: &str, ep: &str, vals: &mut dyn Iterator<Item = f64>| {
            let v: Vec<String> = vals.map(fmt_num).collect();
            format!("{metric},{ep},{}\n", v.join(","))
        };
        for (i, ep) in self.episodes.iter().enumerate() {
            s += &row(
                "return_smoothed",
                &ep.to_string(),
                &mut self.smoothed.iter().map(|c| c[i]),
            );
        }
        s += &row(
            &format!("return_last{SUMMARY_TAIL}"),
            "",
            &mut self.final_return.iter().copied(),
        );
        s += &row("inference_mean_throughput", "", &mut self.inference.iter().copied());
        s
    }

    /// Every tenth episode plus the last, then the summary rows.
    pub fn to_text(&self) -> String {
        let width = self.labels.iter().map(String::len).max().unwrap_or(0).max(10);
        let mut s = String::new();
        let _ = write!(s, "{:<26}", "episode");
        for l in &self.labels {
            let _ = write!(s, " {l:>width$}");
        }
        s.push('\n');
        let last = self.episodes.len().saturating_sub(1);
        for (i, ep) in self.episodes.iter().enumerate() {
            if i % SMOOTHING_WINDOW != SMOOTHING_WINDOW - 1 && i != last {
                continue;
            }
            let _ = write!(s, "{ep:<26}");
            for c in &self.smoothed {
                let _ = write!(s, " {:>width$}", cell(c[i]));
            }
            s.push('\n');
        }
        for (name, vals) in [
            (format!("return_last{SUMMARY_TAIL}"), &self.final_return),
            ("inference_mean_throughput".to_string(), &self.inference),
        ] {
            let _ = write!(s, "{name:<26}");
            for v in vals {
                let _ = write!(s, " {:>width$}", cell(*v));
            }
            s.push('\n');
        }
        s
    }
}

/// Compare two or more run directories. Runs from different environment
/// modes are rejected; differing seeds only warn. With `out`, the table is
/// also written there as text and CSV.
pub fn cmd_compare(dirs: &[PathBuf], out: Option<&Path>) -> Result<Comparison, OrchestratorError> {
    if dirs.len() < 2 {
        return Err(OrchestratorError::Usage(
            "compare needs at least two run directories".into(),
        ));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let env = &runs[0].manifest.env;
    if let Some(r) = runs.iter().find(|r| &r.manifest.env != env) {
        return Err(OrchestratorError::Incompatible(format!(
            "{} ran env {:?} but {} ran {env:?}",
            r.dir.display(),
            r.manifest.env,
            runs[0].dir.display()
        )));
    }
    let mut warnings = Vec::new();
    let seed = runs[0].manifest.seed;
    if runs.iter().any(|r| r.manifest.seed != seed) {
        let seeds: Vec<String> = runs.iter().map(|r| r.manifest.seed.to_string()).collect();
        warnings.push(format!("runs use different seeds ({})", seeds.join(", ")));
    }

    let mut labels: Vec<String> = Vec::new();
    for r in &runs {
        let base = r.manifest.scenario.clone();
        let label = if runs.iter().filter(|o| o.manifest.scenario == base).count() > 1 {
            let name = r
                .dir
                .file_name()
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            format!("{base}@{name}")
        } else {
            base
        };
        labels.push(label);
    }

    let mut episodes: Vec<u32> = runs.iter().flat_map(|r| r.curve.iter().map(|(e, _)| *e)).collect();
    episodes.sort_unstable();
    episodes.dedup();
    let smoothed = runs
        .iter()
        .map(|r| {
            let values: Vec<f64> = r.curve.iter().map(|(_, v)| *v).collect();
            let by_ep: BTreeMap<u32, f64> = r
                .curve
                .iter()
                .map(|(e, _)| *e)
                .zip(smooth(&values, SMOOTHING_WINDOW))
                .collect();
            episodes
                .iter()
                .map(|e| by_ep.get(e).copied().unwrap_or(f64::NAN))
                .collect()
        })
        .collect();
    let final_return = runs
        .iter()
        .map(|r| tail_mean(&r.curve.iter().map(|(_, v)| *v).collect::<Vec<_>>(), SUMMARY_TAIL))
        .collect();
    let inference = runs
        .iter()
        .map(|r| nan_mean(r.inference.iter().map(|(_, t)| *t)))
        .collect();
    let cmp = Comparison {
        labels,
        episodes,
        smoothed,
        final_return,
        inference,
        warnings,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write(&dir.join(COMPARE_TXT), &cmp.to_text())?;
        write(&dir.join(COMPARE_CSV), &cmp.to_csv())?;
    }
    Ok(cmp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoverRow {
    pub name: String,
    pub node: String,
    pub result: Result<NodeId, DnsError>,
    pub latency_us: Micros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoverReport {
    pub rows: Vec<DiscoverRow>,
}

impl DiscoverReport {
    pub fn all_resolved(&self) -> bool {
        self.rows.iter().all(|r| r.result.is_ok())
    }

    pub fn row(&self, name: &str) -> Option<&DiscoverRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<26} {:<10} {:<40} {:>10}\n", "NAME", "NODE", "ADDRESS", "LATENCY_US");
        for r in &self.rows {
            let addr = match &r.result {
                Ok(id) => id.to_ipv6().to_string(),
                Err(e) => format!("FAILED ({})", e.tag()),
            };
            let _ = writeln!(s, "{:<26} {:<10} {:<40} {:>10}", r.name, r.node, addr, r.latency_us);
        }
        s
    }
}

/// Boot the topology, let every service node register, and resolve every
/// registered name from the gateway.
pub fn cmd_discover(topology: Option<&Path>, level: LogLevel) -> Result<DiscoverReport, OrchestratorError> {
    if let Some(t) = topology.filter(|t| !t.is_file()) {
        return Err(OrchestratorError::Usage(format!(
            "topology {} does not exist",
            t.display()
        )));
    }
    let topo = load_topology(topology)?;
    let mut dep = deploy(topo, RoutingConfig::default(), DnsConfig::default(), level)?;
    let gw_node = dep.net.name(dep.gateway).to_string();
    let start = dep.now();
    let result = dns_query(&mut dep.net, &mut dep.daemon, dep.gateway, GATEWAY_NAME).map(|a| a.address);
    let mut rows = vec![DiscoverRow {
        name: GATEWAY_NAME.to_string(),
        node: gw_node,
        result,
        latency_us: dep.now() - start,
    }];
    rows.extend(dep.discovered.iter().map(|r| DiscoverRow {
        name: r.dns_name.clone(),
        node: r.node.clone(),
        result: r.result.clone(),
        latency_us: r.latency_us,
    }));
    Ok(DiscoverReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_argument() {
        let f = parse_failure("250 r1 r2").unwrap();
        assert_eq!(f.at_us, 250_000);
        assert_eq!((f.a.as_str(), f.b.as_str()), ("r1", "r2"));
        assert!(parse_failure("r1 r2").is_err());
        assert!(parse_failure("x r1 r2").is_err());
    }

    #[test]
    fn smoothing_skips_nan() {
        let v = [1.0, f64::NAN, 3.0, 5.0];
        let s = smooth(&v, 2);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 1.0);
        assert_eq!(s[2], 3.0);
        assert_eq!(s[3], 4.0);
        assert!(smooth(&[f64::NAN], 10)[0].is_nan());
    }

    #[test]
    fn infer_without_policy_is_usage() {
        let m = RunManifest::new(ScenarioKind::CentralMulti, Mode::Infer, "/nonexistent");
        let e = m.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn discover_demo() {
        let r = cmd_discover(None, LogLevel::Info).unwrap();
        assert!(r.all_resolved(), "{}", r.to_text());
        assert_eq!(r.rows.len(), 3);
        assert_eq!(cmd_discover(None, LogLevel::Info).unwrap().to_text(), r.to_text());
    }
}
