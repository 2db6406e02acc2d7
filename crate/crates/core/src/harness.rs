//! Scenario runner: wires a publisher, the relay and a set of subscribers
//! over the simulated network, runs to completion and checks the outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::StrobeConfig;
use crate::client::{
    predict_latency_bound, AnalyzerPath, LatencyModel, PublisherClient, ReceiveRecord, ScheduledUpdate, SentApproval,
    Stall, SubscriberClient, SubscriberConfig,
};
use crate::media::{MediaError, SourceConfig};
use crate::relay::{RelayConfig, RelayLogEvent, RelayNode, Role};
use crate::transport::{EndpointId, Link, SessionId, SimNetwork, TransportError};
use crate::wire::{CategorySet, CategoryType};

/// Slack allowed on top of the predicted bound.
pub const BOUND_SLACK_MS: u64 = 2;
/// Allowed difference in plain-subscriber latency with and without gating.
pub const ISOLATION_SLACK_MS: u64 = 2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("filter categories without an analyzer: {}", fmt_uncovered(.0))]
    Uncovered(Vec<(String, CategoryType)>),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("virtual time cap of {cap_ms} ms exceeded")]
    Timeout { cap_ms: u64, partial: Box<Report> },
}

fn fmt_uncovered(list: &[(String, CategoryType)]) -> String {
    list.iter()
        .map(|(client, c)| format!("{client}: {c}"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DelaySpec {
    Fixed(u64),
    /// Drawn uniformly from `[min, max]` with the scenario seed.
    Range { min: u64, max: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LinkSpec {
    Delay(DelaySpec),
    Detailed {
        delay_ms: DelaySpec,
        #[serde(default)]
        jitter_ms: u64,
    },
}

impl Default for LinkSpec {
    fn default() -> Self {
        LinkSpec::Delay(DelaySpec::Fixed(0))
    }
}

impl LinkSpec {
    fn parts(self) -> (DelaySpec, u64) {
        match self {
            LinkSpec::Delay(d) => (d, 0),
            LinkSpec::Detailed { delay_ms, jitter_ms } => (delay_ms, jitter_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub name: String,
    #[serde(default)]
    pub analyze: CategorySet,
    #[serde(default)]
    pub filter: CategorySet,
    #[serde(default)]
    pub strobe: StrobeConfig,
    #[serde(default)]
    pub analysis_delay_ms: u64,
    #[serde(default)]
    pub updates: Vec<ScheduledUpdate>,
    #[serde(default = "one")]
    pub startup_groups: usize,
    /// Relay to client.
    #[serde(default)]
    pub downlink: LinkSpec,
    /// Client to relay.
    #[serde(default)]
    pub uplink: LinkSpec,
}

fn one() -> usize {
    1
}

fn default_track() -> String {
    "camera".into()
}

fn default_max_time() -> u64 {
    crate::transport::sim::DEFAULT_MAX_TIME_MS
}

fn default_start() -> u64 {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub min: u64,
    pub max: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_track")]
    pub track: String,
    /// When the publisher sends its first frame.
    #[serde(default = "default_start")]
    pub start_ms: u64,
    #[serde(default = "default_max_time")]
    pub max_time_ms: u64,
    pub source: SourceConfig,
    #[serde(default)]
    pub relay: RelayConfig,
    #[serde(default)]
    pub publisher_link: LinkSpec,
    pub clients: Vec<ClientSpec>,
    /// Expected per-group added latency of each filtered client over its
    /// reference analyzer.
    #[serde(default)]
    pub expected_added_latency_ms: Option<Band>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut problems = Vec::new();
        if let Err(MediaError::InvalidConfig(p)) = self.source.validate() {
            problems.extend(p);
        }
        if self.relay.retention == 0 {
            problems.push("relay.retention must be at least 1".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.clients {
            if !names.insert(c.name.as_str()) {
                problems.push(format!("duplicate client name {:?}", c.name));
            }
            if !c.analyze.is_empty() && !c.filter.is_empty() {
                problems.push(format!("{}: ANALYZE and FILTER are both set", c.name));
            }
            for u in &c.updates {
                if !u.analyze.is_empty() && !u.filter.is_empty() {
                    problems.push(format!("{}: update at {} ms sets both ANALYZE and FILTER", c.name, u.at_ms));
                }
            }
            if let Err(e) = c.strobe.validate() {
                problems.push(format!("{}: {e}", c.name));
            }
        }
        let links = std::iter::once(("publisher_link", self.publisher_link))
            .chain(self.clients.iter().flat_map(|c| [(c.name.as_str(), c.downlink), (c.name.as_str(), c.uplink)]));
        for (who, l) in links {
            if let (DelaySpec::Range { min, max }, _) = l.parts() {
                if min > max {
                    problems.push(format!("{who}: delay range {min}..{max} is empty"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(HarnessError::Invalid(problems));
        }
        let uncovered = uncovered_filters(&self.clients);
        if !uncovered.is_empty() {
            return Err(HarnessError::Uncovered(uncovered));
        }
        Ok(())
    }

    /// The same scenario with only plain subscribers left.
    pub fn plain_only(&self) -> Scenario {
        let mut s = self.clone();
        s.clients.retain(is_plain);
        s.expected_added_latency_ms = None;
        s
    }
}

fn is_plain(c: &ClientSpec) -> bool {
    c.analyze.is_empty() && c.filter.is_empty() && c.updates.is_empty()
}

/// Every (client, category) pair whose FILTER category no client ever
/// ANALYZEs.
pub fn uncovered_filters(clients: &[ClientSpec]) -> Vec<(String, CategoryType)> {
    let analyzed: BTreeSet<CategoryType> = clients
        .iter()
        .flat_map(|c| c.analyze.iter().chain(c.updates.iter().flat_map(|u| u.analyze.iter())))
        .collect();
    let mut out = Vec::new();
    for c in clients {
        let wanted: BTreeSet<CategoryType> = c
            .filter
            .iter()
            .chain(c.updates.iter().flat_map(|u| u.filter.iter()))
            .collect();
        for cat in wanted {
            if !analyzed.contains(&cat) {
                out.push((c.name.clone(), cat));
            }
        }
    }
    out
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, HarnessError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scenario::from_json(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedLink {
    pub delay_ms: u64,
    pub jitter_ms: u64,
}

impl ResolvedLink {
    fn worst(self) -> u64 {
        self.delay_ms + self.jitter_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedLinks {
    pub publisher: ResolvedLink,
    /// Per client: (downlink, uplink).
    pub clients: BTreeMap<String, (ResolvedLink, ResolvedLink)>,
}

/// Draws link delays: publisher first, then each client's downlink and
/// uplink in scenario order.
pub fn resolve_links(scenario: &Scenario) -> ResolvedLinks {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut draw = |spec: LinkSpec| {
        let (d, jitter_ms) = spec.parts();
        let delay_ms = match d {
            DelaySpec::Fixed(v) => v,
            DelaySpec::Range { min, max } => rng.random_range(min..=max),
        };
        ResolvedLink { delay_ms, jitter_ms }
    };
    let publisher = draw(scenario.publisher_link);
    let clients = scenario
        .clients
        .iter()
        .map(|c| (c.name.clone(), (draw(c.downlink), draw(c.uplink))))
        .collect();
    ResolvedLinks { publisher, clients }
}

/// Timeline of one group across the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub group_id: u64,
    pub publish_start_ms: u64,
    pub publish_end_ms: u64,
    pub relay_ingest_ms: Option<u64>,
    pub relay_complete_ms: Option<u64>,
    pub approve_recv_ms: BTreeMap<CategoryType, u64>,
    /// Per client: time the first object arrived.
    pub first_recv_ms: BTreeMap<String, u64>,
    /// Per client: time the group stream finished.
    pub recv_complete_ms: BTreeMap<String, u64>,
    /// The source schedule puts a strobe of at least 10 Hz in this group.
    pub strobe_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub name: String,
    pub role: Role,
    pub analyze: CategorySet,
    pub filter: CategorySet,
    pub subscribed: bool,
    pub delivered: Vec<u64>,
    pub skipped: Vec<u64>,
    pub stalls: Vec<Stall>,
    pub approvals_sent: Vec<SentApproval>,
    /// Largest `recv_complete - publish_start` over delivered groups.
    pub max_latency_ms: Option<u64>,
    pub realtime_ok: bool,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub client: String,
    pub model: LatencyModel,
    pub predicted_ms: u64,
    pub max_observed_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddedLatency {
    pub client: String,
    pub reference: String,
    /// Per delivered group: filtered first arrival minus reference first arrival.
    pub per_group_ms: BTreeMap<u64, i64>,
    pub min_ms: Option<i64>,
    pub max_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: u64,
    pub session: Option<u32>,
    pub event: String,
    pub group: Option<u64>,
    pub categories: Vec<CategoryType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl From<&RelayLogEvent> for LogRecord {
    fn from(e: &RelayLogEvent) -> Self {
        LogRecord {
            ts: e.ts,
            session: e.session,
            event: e.event.to_string(),
            group: e.group,
            categories: e.categories.clone(),
            detail: e.detail.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub final_time_ms: u64,
    pub links: ResolvedLinks,
    /// Relay session id of each client.
    pub sessions: BTreeMap<String, u32>,
    pub groups: Vec<GroupRecord>,
    pub clients: Vec<ClientSummary>,
    pub bounds: Vec<BoundCheck>,
    pub added_latency: Vec<AddedLatency>,
    pub checks: Vec<Check>,
    pub relay_log: Vec<LogRecord>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn client(&self, name: &str) -> Option<&ClientSummary> {
        self.clients.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))
    }
}

/// Groups that contain at least two flash onsets of a strobe window whose
/// realized rate is 10 Hz or more and whose amplitude exceeds the default
/// per-pixel change threshold.
pub fn strobe_ground_truth(source: &SourceConfig) -> BTreeSet<u64> {
    let fpg = source.frames_per_group();
    let min_step = u32::from(StrobeConfig::default().pixel_delta_threshold);
    let mut risky = BTreeSet::new();
    let mut amplitude = Vec::new();
    let mut first = 0u64;
    for seg in &source.segments {
        let frames = seg.duration_ms * u64::from(source.fps) / 1000;
        if let crate::media::Pattern::Strobe { low, high, .. } = seg.pattern {
            amplitude.push((first, u32::from(high).saturating_sub(u32::from(low))));
        }
        first += frames;
    }
    for w in source.strobe_windows() {
        let realized_hz = f64::from(source.fps) / (2.0 * w.half_period_frames as f64);
        let amp = amplitude
            .iter()
            .find(|(f, _)| *f == w.first_frame)
            .map_or(0, |(_, a)| *a);
        if realized_hz < 10.0 || amp <= min_step {
            continue;
        }
        let mut per_group: BTreeMap<u64, usize> = BTreeMap::new();
        for &k in &w.onset_frames {
            *per_group.entry(k / fpg).or_default() += 1;
        }
        risky.extend(per_group.into_iter().filter(|&(_, n)| n >= 2).map(|(g, _)| g));
    }
    risky
}

enum Node {
    Relay,
    Publisher,
    Client(usize),
}

pub fn run_scenario(scenario: &Scenario) -> Result<Report, HarnessError> {
    scenario.validate()?;
    let links = resolve_links(scenario);
    let mut report = run_resolved(scenario, &links)?;
    let has_plain = scenario.clients.iter().any(is_plain);
    let has_gating = scenario.clients.iter().any(|c| !is_plain(c));
    if has_plain && has_gating {
        let plain = scenario.plain_only();
        let mut plain_links = links.clone();
        plain_links.clients.retain(|name, _| plain.clients.iter().any(|c| &c.name == name));
        let baseline = run_resolved(&plain, &plain_links)?;
        report.checks.push(isolation_check(&report, &baseline));
    }
    Ok(report)
}

fn latency_of(groups: &[GroupRecord], client: &str) -> BTreeMap<u64, u64> {
    groups
        .iter()
        .filter_map(|g| g.recv_complete_ms.get(client).map(|t| (g.group_id, t - g.publish_start_ms)))
        .collect()
}

fn isolation_check(with: &Report, without: &Report) -> Check {
    let mut worst = 0u64;
    let mut mismatched = Vec::new();
    for c in &without.clients {
        let a = latency_of(&with.groups, &c.name);
        let b = latency_of(&without.groups, &c.name);
        if a.keys().ne(b.keys()) {
            mismatched.push(c.name.clone());
        }
        for (g, lb) in &b {
            if let Some(la) = a.get(g) {
                worst = worst.max(la.abs_diff(*lb));
            }
        }
    }
    Check {
        name: "isolation".into(),
        passed: mismatched.is_empty() && worst <= ISOLATION_SLACK_MS,
        detail: if mismatched.is_empty() {
            format!("plain latency differs by at most {worst} ms with gating clients attached")
        } else {
            format!("plain clients saw different groups: {}", mismatched.join(", "))
        },
    }
}

/// Jitter seed salt for a client's links. Keyed by name so that dropping
/// other clients leaves this client's jitter sequence unchanged.
fn name_salt(name: &str) -> u64 {
    // FNV-1a, forced odd so the uplink salt never equals the publisher's 0.
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3));
    h << 1 | 1
}

fn run_resolved(scenario: &Scenario, links: &ResolvedLinks) -> Result<Report, HarnessError> {
    let mut net = SimNetwork::new().with_max_time(scenario.max_time_ms).with_tracing(false);
    let relay_ep = net.add_endpoint("relay");
    let pub_ep = net.add_endpoint("publisher");
    let link = |r: ResolvedLink, salt: u64| Link {
        one_way_delay_ms: r.delay_ms,
        jitter_ms: r.jitter_ms,
        seed: scenario.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(salt),
    };
    let pub_session = net.connect(pub_ep, relay_ep, link(links.publisher, 0))?;
    let mut relay = RelayNode::new(relay_ep, scenario.relay.clone());
    relay.add_publisher(pub_session, scenario.track.clone());
    let mut publisher = PublisherClient::new(pub_ep, pub_session, &scenario.source, scenario.start_ms)?;
    let mut nodes: BTreeMap<EndpointId, Node> = BTreeMap::new();
    nodes.insert(relay_ep, Node::Relay);
    nodes.insert(pub_ep, Node::Publisher);
    let mut subs = Vec::new();
    let mut sessions = BTreeMap::new();
    for (i, c) in scenario.clients.iter().enumerate() {
        let ep = net.add_endpoint(c.name.clone());
        let (down, up) = links.clients[&c.name];
        let salt = name_salt(&c.name);
        let session: SessionId = net.connect_asymmetric(ep, relay_ep, link(up, salt), link(down, salt.wrapping_add(1)))?;
        sessions.insert(c.name.clone(), session.0);
        let mut cfg = SubscriberConfig::new(c.name.clone(), scenario.track.clone(), scenario.source.gop_duration_ms);
        cfg.subscribe_id = i as u64 + 1;
        cfg.analyze = c.analyze.clone();
        cfg.filter = c.filter.clone();
        cfg.strobe = c.strobe.clone();
        cfg.analysis_delay_ms = c.analysis_delay_ms;
        cfg.updates = c.updates.clone();
        cfg.startup_groups = c.startup_groups;
        subs.push(SubscriberClient::new(ep, session, cfg));
        nodes.insert(ep, Node::Client(i));
    }

    for s in &mut subs {
        s.start(&mut net)?;
    }
    publisher.start(&mut net)?;
    let outcome = loop {
        let ev = match net.next_event() {
            Ok(Some(ev)) => ev,
            Ok(None) => break Ok(()),
            Err(e) => break Err(e),
        };
        let step = match nodes[&ev.endpoint] {
            Node::Relay => relay.handle_event(&mut net, &ev),
            Node::Publisher => publisher.handle_event(&mut net, &ev),
            Node::Client(i) => subs[i].handle_event(&mut net, &ev),
        };
        if let Err(e) = step {
            break Err(e);
        }
    };
    let report = build_report(scenario, links, &net, &relay, &publisher, &subs, &sessions);
    match outcome {
        Ok(()) => Ok(report),
        Err(TransportError::Timeout { cap_ms, .. }) => Err(HarnessError::Timeout {
            cap_ms,
            partial: Box::new(report),
        }),
        Err(e) => Err(e.into()),
    }
}

fn build_report(
    scenario: &Scenario,
    links: &ResolvedLinks,
    net: &SimNetwork,
    relay: &RelayNode,
    publisher: &PublisherClient,
    subs: &[SubscriberClient],
    sessions: &BTreeMap<String, u32>,
) -> Report {
    let truth = strobe_ground_truth(&scenario.source);
    let sub_reports: Vec<_> = subs.iter().map(SubscriberClient::report).collect();
    let mut groups = Vec::new();
    for p in publisher.published() {
        let times = relay.group_times(&scenario.track, p.group_id);
        let mut rec = GroupRecord {
            group_id: p.group_id,
            publish_start_ms: p.start_ms,
            publish_end_ms: p.end_ms,
            relay_ingest_ms: times.map(|t| t.ingest_ms),
            relay_complete_ms: times.and_then(|t| t.complete_ms),
            approve_recv_ms: times.map(|t| t.approve_recv_ms.clone()).unwrap_or_default(),
            first_recv_ms: BTreeMap::new(),
            recv_complete_ms: BTreeMap::new(),
            strobe_ground_truth: truth.contains(&p.group_id),
        };
        for r in &sub_reports {
            if let Some(g) = r.groups.iter().find(|g| g.group_id == p.group_id) {
                rec.first_recv_ms.insert(r.name.clone(), g.first_recv_ms);
                if let (Some(t), false) = (g.complete_ms, g.reset) {
                    rec.recv_complete_ms.insert(r.name.clone(), t);
                }
            }
        }
        groups.push(rec);
    }

    let mut clients = Vec::new();
    for (spec, r) in scenario.clients.iter().zip(&sub_reports) {
        let state = relay.relay().session(SessionId(sessions[&spec.name]));
        let delivered: Vec<u64> = r.groups.iter().filter(is_delivered).map(|g| g.group_id).collect();
        let lat = latency_of(&groups, &spec.name);
        clients.push(ClientSummary {
            name: spec.name.clone(),
            role: state.map_or(Role::Plain, |s| s.role()),
            analyze: state.map_or_else(|| spec.analyze.clone(), |s| s.analyze.clone()),
            filter: state.map_or_else(|| spec.filter.clone(), |s| s.filter.clone()),
            subscribed: r.subscribed,
            delivered,
            skipped: state.map(|s| s.skipped.clone()).unwrap_or_default(),
            stalls: r.playback.stalls.clone(),
            approvals_sent: r.approvals_sent.clone(),
            max_latency_ms: lat.values().max().copied(),
            realtime_ok: r.realtime_ok,
            errors: r.errors.clone(),
        });
    }

    let relay_log: Vec<LogRecord> = relay.relay().log().iter().map(LogRecord::from).collect();
    let mut report = Report {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        final_time_ms: net.now_ms(),
        links: links.clone(),
        sessions: sessions.clone(),
        groups,
        clients,
        bounds: Vec::new(),
        added_latency: Vec::new(),
        checks: Vec::new(),
        relay_log,
    };
    add_checks(scenario, &mut report, &truth);
    report
}

fn is_delivered(r: &&ReceiveRecord) -> bool {
    r.complete_ms.is_some() && !r.reset
}

/// The worst-case latency model of every client that starts out filtering,
/// built from the scenario's resolved links. Link jitter is added to each
/// delay term.
pub fn latency_models<'a>(scenario: &'a Scenario, links: &ResolvedLinks) -> Vec<(&'a ClientSpec, LatencyModel)> {
    let paths: Vec<AnalyzerPath> = scenario
        .clients
        .iter()
        .filter(|c| !c.analyze.is_empty())
        .map(|a| {
            let (down, up) = links.clients[&a.name];
            AnalyzerPath {
                name: a.name.clone(),
                categories: a.analyze.clone(),
                r_ms: down.worst(),
                f_ms: up.worst(),
                analysis_ms: a.analysis_delay_ms,
            }
        })
        .collect();
    scenario
        .clients
        .iter()
        .filter(|c| !c.filter.is_empty())
        .map(|spec| {
            let analysis_time_ms = paths
                .iter()
                .filter(|p| p.categories.iter().any(|c| spec.filter.contains(c)))
                .map(|p| p.analysis_ms)
                .max()
                .unwrap_or(0);
            let model = LatencyModel {
                p_ms: links.publisher.worst(),
                analyzers: paths.clone(),
                r_y_ms: links.clients[&spec.name].0.worst(),
                categories: spec.filter.clone(),
                max_g_ms: scenario.source.gop_duration_ms,
                analysis_time_ms,
            };
            (spec, model)
        })
        .collect()
}

fn add_checks(scenario: &Scenario, report: &mut Report, truth: &BTreeSet<u64>) {
    let mut checks = Vec::new();
    for c in &report.clients {
        checks.push(Check {
            name: format!("subscribed:{}", c.name),
            passed: c.subscribed,
            detail: if c.subscribed { "SUBSCRIBE_OK received" } else { "no SUBSCRIBE_OK" }.into(),
        });
        if !c.errors.is_empty() {
            checks.push(Check {
                name: format!("errors:{}", c.name),
                passed: false,
                detail: c.errors.join("; "),
            });
        }
    }
    for spec in scenario.clients.iter().filter(|c| !c.analyze.is_empty() || c.updates.iter().any(|u| !u.analyze.is_empty())) {
        let c = report.client(&spec.name).expect("summary per client");
        checks.push(Check {
            name: format!("realtime:{}", c.name),
            passed: c.realtime_ok,
            detail: format!(
                "analysis of each group finishes within {} ms (configured delay {} ms)",
                scenario.source.gop_duration_ms, spec.analysis_delay_ms
            ),
        });
    }

    checks.extend(safety_checks(scenario, report, truth));

    let analyzers: Vec<&ClientSpec> = scenario.clients.iter().filter(|c| !c.analyze.is_empty()).collect();
    for (spec, model) in latency_models(scenario, &report.links) {
        let observed = report.client(&spec.name).and_then(|c| c.max_latency_ms);
        match predict_latency_bound(&model) {
            Ok(predicted) => {
                let passed = observed.is_none_or(|o| o <= predicted + BOUND_SLACK_MS);
                checks.push(Check {
                    name: format!("bound:{}", spec.name),
                    passed,
                    detail: match observed {
                        Some(o) => format!("max latency {o} ms, bound {predicted} ms + {BOUND_SLACK_MS} ms slack"),
                        None => format!("no groups delivered; bound {predicted} ms"),
                    },
                });
                report.bounds.push(BoundCheck {
                    client: spec.name.clone(),
                    model,
                    predicted_ms: predicted,
                    max_observed_ms: observed,
                });
            }
            Err(e) => checks.push(Check {
                name: format!("bound:{}", spec.name),
                passed: true,
                detail: format!("not applicable: {e}"),
            }),
        }

        let Some(reference) = analyzers
            .iter()
            .find(|a| a.analyze.iter().any(|c| spec.filter.contains(c)))
        else {
            continue;
        };
        let per_group: BTreeMap<u64, i64> = report
            .groups
            .iter()
            .filter(|g| g.recv_complete_ms.contains_key(&spec.name))
            .filter_map(|g| {
                let f = *g.first_recv_ms.get(&spec.name)?;
                let a = *g.first_recv_ms.get(&reference.name)?;
                Some((g.group_id, f as i64 - a as i64))
            })
            .collect();
        let added = AddedLatency {
            client: spec.name.clone(),
            reference: reference.name.clone(),
            min_ms: per_group.values().min().copied(),
            max_ms: per_group.values().max().copied(),
            per_group_ms: per_group,
        };
        if let Some(band) = scenario.expected_added_latency_ms {
            let inside = added
                .per_group_ms
                .values()
                .all(|&d| d >= band.min as i64 && d <= band.max as i64);
            checks.push(Check {
                name: format!("added_latency:{}", spec.name),
                passed: inside && !added.per_group_ms.is_empty(),
                detail: format!(
                    "added latency vs {} in [{}, {}] ms over {} groups (band [{}, {}] ms)",
                    reference.name,
                    added.min_ms.unwrap_or(0),
                    added.max_ms.unwrap_or(0),
                    added.per_group_ms.len(),
                    band.min,
                    band.max
                ),
            });
        }
        report.added_latency.push(added);
    }
    report.checks.extend(checks);
}

/// Replays the relay log: every delivery to a filtering session must follow
/// approvals of all its filter categories, and no group the source schedule
/// marks as strobing may reach a session filtering STROBE.
fn safety_checks(scenario: &Scenario, report: &Report, truth: &BTreeSet<u64>) -> Vec<Check> {
    let names: BTreeMap<u32, &str> = report.sessions.iter().map(|(n, s)| (*s, n.as_str())).collect();
    let mut approved: BTreeMap<u64, BTreeSet<CategoryType>> = BTreeMap::new();
    let mut filters: BTreeMap<u32, BTreeSet<CategoryType>> = BTreeMap::new();
    let mut violations: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    let mut ever_filtered: BTreeSet<u32> = BTreeSet::new();
    for e in &report.relay_log {
        match (e.event.as_str(), e.session) {
            ("subscribe" | "subscribe_update", Some(s)) => {
                let f: BTreeSet<_> = if e.detail.as_deref() == Some("filterer") {
                    e.categories.iter().copied().collect()
                } else {
                    BTreeSet::new()
                };
                if !f.is_empty() {
                    ever_filtered.insert(s);
                }
                filters.insert(s, f);
            }
            ("approve", _) => {
                if let Some(g) = e.group {
                    approved.entry(g).or_default().extend(e.categories.iter().copied());
                }
            }
            ("deliver", Some(s)) => {
                let (Some(g), Some(f)) = (e.group, filters.get(&s)) else {
                    continue;
                };
                if f.is_empty() {
                    continue;
                }
                let have = approved.get(&g).cloned().unwrap_or_default();
                let missing: Vec<_> = f.difference(&have).collect();
                if !missing.is_empty() {
                    violations
                        .entry(s)
                        .or_default()
                        .push(format!("group {g} delivered without {missing:?}"));
                }
                if f.contains(&CategoryType::STROBE) && truth.contains(&g) {
                    violations
                        .entry(s)
                        .or_default()
                        .push(format!("group {g} contains a strobe"));
                }
            }
            _ => {}
        }
    }
    scenario
        .clients
        .iter()
        .filter_map(|c| {
            let s = report.sessions[&c.name];
            if !ever_filtered.contains(&s) {
                return None;
            }
            let v = violations.remove(&s).unwrap_or_default();
            Some(Check {
                name: format!("safety:{}", names[&s]),
                passed: v.is_empty(),
                detail: if v.is_empty() {
                    "every delivery followed approval of all filter categories".into()
                } else {
                    v.join("; ")
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
    Text,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            "text" => Ok(Format::Text),
            other => Err(format!("unknown format {other:?} (json, csv, text)")),
        }
    }
}

/// One row per (group, client).
pub fn render_csv(report: &Report) -> String {
    let mut out = String::from(
        "group_id,client,status,publish_start_ms,publish_end_ms,relay_ingest_ms,relay_complete_ms,first_recv_ms,recv_complete_ms,latency_ms\n",
    );
    let opt = |v: Option<u64>| v.map(|v| v.to_string()).unwrap_or_default();
    for g in &report.groups {
        for c in &report.clients {
            let status = if c.delivered.contains(&g.group_id) {
                "delivered"
            } else if c.skipped.contains(&g.group_id) {
                "skipped"
            } else {
                "missing"
            };
            let complete = g.recv_complete_ms.get(&c.name).copied();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                g.group_id,
                c.name,
                status,
                g.publish_start_ms,
                g.publish_end_ms,
                opt(g.relay_ingest_ms),
                opt(g.relay_complete_ms),
                opt(g.first_recv_ms.get(&c.name).copied()),
                opt(complete),
                opt(complete.map(|t| t - g.publish_start_ms)),
            );
        }
    }
    out
}

fn fmt_ids(ids: &[u64]) -> String {
    if ids.is_empty() {
        return "-".into();
    }
    ids.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scenario {} (seed {})", report.scenario, report.seed);
    let _ = writeln!(out, "groups published: {}", report.groups.len());
    let _ = writeln!(out, "virtual time: {} ms", report.final_time_ms);
    for c in &report.clients {
        let _ = writeln!(
            out,
            "client {} [{:?}] delivered {} skipped {} stalls {} max latency {}",
            c.name,
            c.role,
            fmt_ids(&c.delivered),
            fmt_ids(&c.skipped),
            c.stalls.len(),
            c.max_latency_ms.map_or("-".into(), |v| format!("{v} ms")),
        );
    }
    for b in &report.bounds {
        let _ = writeln!(
            out,
            "bound {}: predicted {} ms, observed max {}",
            b.client,
            b.predicted_ms,
            b.max_observed_ms.map_or("-".into(), |v| format!("{v} ms")),
        );
    }
    for a in &report.added_latency {
        let _ = writeln!(
            out,
            "added latency {} vs {}: min {} max {}",
            a.client,
            a.reference,
            a.min_ms.map_or("-".into(), |v| format!("{v} ms")),
            a.max_ms.map_or("-".into(), |v| format!("{v} ms")),
        );
    }
    for c in &report.checks {
        let _ = writeln!(out, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let _ = writeln!(out, "{}", if report.passed() { "ALL CHECKS PASSED" } else { "CHECKS FAILED" });
    out
}

pub fn render(report: &Report, format: Format) -> String {
    match format {
        Format::Json => report.to_json(),
        Format::Csv => render_csv(report),
        Format::Text => render_text(report),
    }
}

/// Writes `report.json`, `groups.csv` or `summary.txt` under `dir`.
pub fn report_render(report: &Report, format: Format, dir: impl AsRef<Path>) -> Result<PathBuf, HarnessError> {
    let dir = dir.as_ref();
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| HarnessError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let file = match format {
        Format::Json => "report.json",
        Format::Csv => "groups.csv",
        Format::Text => "summary.txt",
    };
    let path = dir.join(file);
    std::fs::write(&path, render(report, format)).map_err(io(&path))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::PatternSegment;

    fn cats(c: &[CategoryType]) -> CategorySet {
        CategorySet::new(c.to_vec()).unwrap()
    }

    fn client(name: &str) -> ClientSpec {
        ClientSpec {
            name: name.into(),
            analyze: CategorySet::empty(),
            filter: CategorySet::empty(),
            strobe: StrobeConfig::default(),
            analysis_delay_ms: 0,
            updates: Vec::new(),
            startup_groups: 1,
            downlink: LinkSpec::default(),
            uplink: LinkSpec::default(),
        }
    }

    fn scenario(clients: Vec<ClientSpec>, segments: Vec<PatternSegment>) -> Scenario {
        Scenario {
            name: "t".into(),
            seed: 3,
            track: "camera".into(),
            start_ms: 100,
            max_time_ms: 600_000,
            source: SourceConfig {
                width: 16,
                height: 16,
                fps: 30,
                gop_duration_ms: 1000,
                segments,
            },
            relay: RelayConfig::default(),
            publisher_link: LinkSpec::default(),
            clients,
            expected_added_latency_ms: None,
        }
    }

    #[test]
    fn minimal_scenario_is_valid_and_runs() {
        let s = scenario(vec![client("viewer")], vec![PatternSegment::constant(90, 2000)]);
        let r = run_scenario(&s).unwrap();
        assert!(r.passed(), "{}", render_text(&r));
        assert_eq!(r.client("viewer").unwrap().delivered, [0, 1]);
        assert_eq!(r.client("viewer").unwrap().max_latency_ms, Some(1000));
    }

    #[test]
    fn uncovered_filter_is_a_load_error() {
        let mut f = client("f");
        f.filter = cats(&[CategoryType::SMOKING]);
        let mut a = client("a");
        a.analyze = cats(&[CategoryType::STROBE]);
        let s = scenario(vec![a, f], vec![PatternSegment::constant(90, 1000)]);
        match s.validate() {
            Err(HarnessError::Uncovered(list)) => assert_eq!(list, [("f".to_string(), CategoryType::SMOKING)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_schema_defaults() {
        let text = r#"{
            "name": "min",
            "source": {"width": 8, "height": 8, "fps": 10, "gop_duration_ms": 1000,
                       "segments": [{"kind": "constant", "level": 5, "duration_ms": 1000}]},
            "clients": [{"name": "v"}, {"name": "a", "analyze": ["STROBE"], "downlink": {"delay_ms": {"min": 1, "max": 9}, "jitter_ms": 2}}]
        }"#;
        let s = Scenario::from_json(text).unwrap();
        assert_eq!(s.relay.retention, 64);
        assert_eq!(s.clients[0].downlink, LinkSpec::Delay(DelaySpec::Fixed(0)));
        assert_eq!(s.clients[1].strobe, StrobeConfig::default());
        let links = resolve_links(&s);
        let (down, _) = links.clients["a"];
        assert!((1..=9).contains(&down.delay_ms));
        assert_eq!(down.jitter_ms, 2);
        assert_eq!(resolve_links(&s), links);
        assert!(matches!(
            Scenario::from_json(r#"{"name": "x", "bogus": 1}"#),
            Err(HarnessError::Parse(_))
        ));
    }

    #[test]
    fn ground_truth_marks_only_fast_strobes() {
        let s = scenario(
            vec![],
            vec![
                PatternSegment::constant(128, 1000),
                PatternSegment::strobe(16, 240, 15.0, 1000),
                PatternSegment::strobe(16, 240, 5.0, 1000),
                PatternSegment::strobe(100, 110, 15.0, 1000),
            ],
        );
        assert_eq!(strobe_ground_truth(&s.source), BTreeSet::from([1]));
    }

    #[test]
    fn renders_agree_on_verdicts() {
        let mut a = client("a");
        a.analyze = cats(&[CategoryType::STROBE]);
        let mut f = client("f");
        f.filter = cats(&[CategoryType::STROBE]);
        let s = scenario(vec![a, f, client("v")], vec![PatternSegment::constant(90, 3000)]);
        let r = run_scenario(&s).unwrap();
        let back = Report::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(render_text(&back), render_text(&r));
        let csv = render_csv(&r);
        assert_eq!(csv.lines().count(), 1 + 3 * 3);
        assert!(r.checks.iter().any(|c| c.name == "isolation" && c.passed));
    }

    #[test]
    fn timeout_returns_partial_report() {
        let mut s = scenario(vec![client("v")], vec![PatternSegment::constant(90, 5000)]);
        s.max_time_ms = 2500;
        match run_scenario(&s) {
            Err(HarnessError::Timeout { cap_ms, partial }) => {
                assert_eq!(cap_ms, 2500);
                assert_eq!(partial.client("v").unwrap().delivered, [0, 1]);
            }
            other => panic!("{other:?}"),
        }
    }
}
