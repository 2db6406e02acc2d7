//! Endpoint roles: a paced publisher and a subscriber that can act as plain
//! viewer, analyzer or filterer, plus the worst-case latency model.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{DetectorRegistry, GroupAnalyzer, StrobeConfig, Verdict};
use crate::media::{self, Group, MediaError, SourceConfig};
use crate::transport::framing::{self, GroupHeader, StreamItem, StreamParser};
use crate::transport::{EndpointId, NetEvent, NetEventKind, SessionId, SimNetwork, StreamId, TransportError};
use crate::wire::{self, Approve, CategorySet, CategoryType, ControlMessage, Parameter, Subscribe, SubscribeUpdate};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LatencyError {
    #[error("filter category set is empty")]
    EmptyCategories,
    #[error("no analyzer covers {0:?}")]
    Uncovered(Vec<CategoryType>),
}

/// One analyzer's path through the relay, in milliseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerPath {
    pub name: String,
    pub categories: CategorySet,
    /// Relay to analyzer.
    pub r_ms: u64,
    /// Analyzer to relay (APPROVE).
    pub f_ms: u64,
    #[serde(default)]
    pub analysis_ms: u64,
}

/// Inputs of the worst-case delivery bound for one filtering subscriber.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Publisher to relay.
    pub p_ms: u64,
    pub analyzers: Vec<AnalyzerPath>,
    /// Relay to the filtering subscriber.
    pub r_y_ms: u64,
    /// The subscriber's FILTER categories.
    pub categories: CategorySet,
    /// Longest group duration.
    pub max_g_ms: u64,
    /// Explicit compute term, added on top when non-zero.
    #[serde(default)]
    pub analysis_time_ms: u64,
}

/// `p + max R(x) + max F(x) + R(y) + maxG + analysis_time`, with `x` over
/// the analyzers covering at least one filter category.
pub fn predict_latency_bound(model: &LatencyModel) -> Result<u64, LatencyError> {
    if model.categories.is_empty() {
        return Err(LatencyError::EmptyCategories);
    }
    let uncovered: Vec<_> = model
        .categories
        .iter()
        .filter(|c| !model.analyzers.iter().any(|a| a.categories.contains(*c)))
        .collect();
    if !uncovered.is_empty() {
        return Err(LatencyError::Uncovered(uncovered));
    }
    let covering = || {
        model
            .analyzers
            .iter()
            .filter(|a| a.categories.iter().any(|c| model.categories.contains(c)))
    };
    let max_r = covering().map(|a| a.r_ms).max().unwrap_or(0);
    let max_f = covering().map(|a| a.f_ms).max().unwrap_or(0);
    Ok(model.p_ms + max_r + max_f + model.r_y_ms + model.max_g_ms + model.analysis_time_ms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PublishedGroup {
    pub group_id: u64,
    pub start_ms: u64,
    pub end_ms: u64,
}

/// Sends frame `k` of group `g` at `epoch + g*G + k*1000/fps` and finishes
/// the group stream at the group boundary.
#[derive(Debug)]
pub struct PublisherClient {
    endpoint: EndpointId,
    session: SessionId,
    epoch_ms: u64,
    gop_ms: u64,
    groups: Vec<Group>,
    cursor: (usize, usize),
    stream: Option<StreamId>,
    published: Vec<PublishedGroup>,
    stopped: bool,
}

const PUBLISH_TOKEN: u64 = 0;

impl PublisherClient {
    pub fn new(endpoint: EndpointId, session: SessionId, source: &SourceConfig, epoch_ms: u64) -> Result<Self, MediaError> {
        let groups = media::generate_groups(source)?;
        Ok(PublisherClient {
            endpoint,
            session,
            epoch_ms,
            gop_ms: source.gop_duration_ms,
            groups,
            cursor: (0, 0),
            stream: None,
            published: Vec::new(),
            stopped: false,
        })
    }

    pub fn endpoint(&self) -> EndpointId {
        self.endpoint
    }

    pub fn published(&self) -> &[PublishedGroup] {
        &self.published
    }

    pub fn is_done(&self) -> bool {
        self.stopped || self.cursor.0 >= self.groups.len()
    }

    fn next_due(&self) -> Option<u64> {
        let (g, k) = self.cursor;
        let group = self.groups.get(g)?;
        let base = self.epoch_ms + g as u64 * self.gop_ms;
        Some(match group.frames.get(k) {
            Some(_) => base + group.frames[k].capture_ts - group.frames[0].capture_ts,
            None => base + self.gop_ms,
        })
    }

    pub fn start(&mut self, net: &mut SimNetwork) -> Result<(), TransportError> {
        self.schedule(net)
    }

    fn schedule(&mut self, net: &mut SimNetwork) -> Result<(), TransportError> {
        match self.next_due() {
            Some(at) if !self.stopped => net.set_timer(self.endpoint, at, PUBLISH_TOKEN),
            _ => Ok(()),
        }
    }

    pub fn handle_event(&mut self, net: &mut SimNetwork, ev: &NetEvent) -> Result<(), TransportError> {
        match ev.kind {
            NetEventKind::Timer { token: PUBLISH_TOKEN } if !self.stopped => {
                // Everything due at this instant goes out together.
                while self.next_due() == Some(ev.at_ms) {
                    if let Err(e) = self.step(net, ev.at_ms) {
                        if e == TransportError::Disconnected {
                            self.stopped = true;
                            return Ok(());
                        }
                        return Err(e);
                    }
                }
                self.schedule(net)
            }
            NetEventKind::Closed { session } if session == self.session => {
                self.stopped = true;
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn step(&mut self, net: &mut SimNetwork, now: u64) -> Result<(), TransportError> {
        let (g, k) = self.cursor;
        let group = &self.groups[g];
        match group.frames.get(k) {
            Some(frame) => {
                let mut bytes = Vec::new();
                if k == 0 {
                    let s = net.open_stream(self.session, self.endpoint)?;
                    self.stream = Some(s);
                    bytes = framing::encode_group_header(GroupHeader {
                        group_id: group.group_id,
                        frame_count: group.frames.len() as u64,
                    })
                    .expect("header fits");
                    self.published.push(PublishedGroup {
                        group_id: group.group_id,
                        start_ms: now,
                        end_ms: now,
                    });
                }
                let payload = media::encode_frame_payload(frame).expect("generated frames are valid");
                bytes.extend(framing::encode_object(&payload).expect("object fits"));
                net.send(self.stream.expect("opened on first frame"), &bytes)?;
                self.cursor.1 += 1;
            }
            None => {
                if let Some(s) = self.stream.take() {
                    net.finish(s)?;
                }
                if let Some(p) = self.published.last_mut() {
                    p.end_ms = now;
                }
                self.cursor = (g + 1, 0);
            }
        }
        Ok(())
    }
}

/// A parameter change sent at a given time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduledUpdate {
    pub at_ms: u64,
    #[serde(default)]
    pub analyze: CategorySet,
    #[serde(default)]
    pub filter: CategorySet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubscriberConfig {
    pub name: String,
    pub track: String,
    pub subscribe_id: u64,
    pub analyze: CategorySet,
    pub filter: CategorySet,
    pub strobe: StrobeConfig,
    /// Virtual processing time between group completion and APPROVE.
    pub analysis_delay_ms: u64,
    pub updates: Vec<ScheduledUpdate>,
    /// Groups buffered before playback starts.
    pub startup_groups: usize,
    pub gop_ms: u64,
}

impl SubscriberConfig {
    pub fn new(name: impl Into<String>, track: impl Into<String>, gop_ms: u64) -> Self {
        SubscriberConfig {
            name: name.into(),
            track: track.into(),
            subscribe_id: 1,
            analyze: CategorySet::empty(),
            filter: CategorySet::empty(),
            strobe: StrobeConfig::default(),
            analysis_delay_ms: 0,
            updates: Vec::new(),
            startup_groups: 1,
            gop_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiveRecord {
    pub group_id: u64,
    pub first_recv_ms: u64,
    pub complete_ms: Option<u64>,
    pub objects: u64,
    pub reset: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentApproval {
    pub group_id: u64,
    pub categories: CategorySet,
    pub at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stall {
    /// Group that was due but not buffered.
    pub waiting_after: u64,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlaybackState {
    pub start_ms: Option<u64>,
    /// (group id, play start) in play order.
    pub played: Vec<(u64, u64)>,
    pub stalls: Vec<Stall>,
}

/// Plays complete groups in id order at real-time cadence once
/// `startup_groups` are buffered. A stall runs from the moment the next group
/// was due until it is complete. Missing ids are simply passed over.
pub fn compute_playback(records: &[ReceiveRecord], gop_ms: u64, startup_groups: usize) -> PlaybackState {
    let mut ready: Vec<(u64, u64)> = records
        .iter()
        .filter_map(|r| r.complete_ms.filter(|_| !r.reset).map(|t| (r.group_id, t)))
        .collect();
    ready.sort_unstable();
    let mut state = PlaybackState::default();
    let need = startup_groups.max(1);
    if ready.len() < need {
        return state;
    }
    let t0 = ready[..need].iter().map(|&(_, t)| t).max().expect("non-empty");
    state.start_ms = Some(t0);
    let mut prev: Option<(u64, u64)> = None;
    for &(g, t) in &ready {
        let start = match prev {
            None => t0,
            Some((pg, ps)) => {
                let due = ps + gop_ms;
                if t > due {
                    state.stalls.push(Stall {
                        waiting_after: pg,
                        start_ms: due,
                        end_ms: t,
                    });
                }
                due.max(t)
            }
        };
        state.played.push((g, start));
        prev = Some((g, start));
    }
    state
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubscriberReport {
    pub name: String,
    pub subscribed: bool,
    pub groups: Vec<ReceiveRecord>,
    pub verdicts: Vec<Verdict>,
    pub approvals_sent: Vec<SentApproval>,
    pub approvals_seen: Vec<SentApproval>,
    pub playback: PlaybackState,
    /// Every group's analysis finished within one group duration.
    pub realtime_ok: bool,
    pub errors: Vec<String>,
}

#[derive(Debug)]
enum Pending {
    Approve(Approve),
    Update(usize),
}

/// A subscriber; its role follows its current ANALYZE/FILTER sets.
#[derive(Debug)]
pub struct SubscriberClient {
    cfg: SubscriberConfig,
    endpoint: EndpointId,
    session: SessionId,
    registry: DetectorRegistry,
    control: Option<StreamId>,
    parsers: HashMap<StreamId, StreamParser>,
    stream_group: HashMap<StreamId, u64>,
    records: BTreeMap<u64, ReceiveRecord>,
    analyzer: Option<GroupAnalyzer>,
    /// Groups whose stream opened while analysis was active.
    analyzed: BTreeMap<u64, Vec<media::LuminanceFrame>>,
    active: Option<u64>,
    done_groups: BTreeMap<u64, bool>,
    compute: BTreeMap<u64, Duration>,
    verdicts: Vec<Verdict>,
    sent: Vec<SentApproval>,
    seen: Vec<SentApproval>,
    timers: BTreeMap<u64, Pending>,
    next_token: u64,
    subscribed: bool,
    errors: Vec<String>,
}

impl SubscriberClient {
    pub fn new(endpoint: EndpointId, session: SessionId, cfg: SubscriberConfig) -> Self {
        let registry = DetectorRegistry::with_defaults(cfg.strobe.clone());
        SubscriberClient {
            cfg,
            endpoint,
            session,
            registry,
            control: None,
            parsers: HashMap::new(),
            stream_group: HashMap::new(),
            records: BTreeMap::new(),
            analyzer: None,
            analyzed: BTreeMap::new(),
            active: None,
            done_groups: BTreeMap::new(),
            compute: BTreeMap::new(),
            verdicts: Vec::new(),
            sent: Vec::new(),
            seen: Vec::new(),
            timers: BTreeMap::new(),
            next_token: 1,
            subscribed: false,
            errors: Vec::new(),
        }
    }

    pub fn config(&self) -> &SubscriberConfig {
        &self.cfg
    }

    pub fn endpoint(&self) -> EndpointId {
        self.endpoint
    }

    pub fn records(&self) -> impl Iterator<Item = &ReceiveRecord> {
        self.records.values()
    }

    fn params(analyze: &CategorySet, filter: &CategorySet) -> Vec<Parameter> {
        let mut p = Vec::new();
        if !analyze.is_empty() {
            p.push(Parameter::Analyze(analyze.clone()));
        }
        if !filter.is_empty() {
            p.push(Parameter::Filter(filter.clone()));
        }
        p
    }

    fn set_analysis(&mut self, analyze: &CategorySet) {
        self.analyzer = if analyze.is_empty() {
            None
        } else {
            match GroupAnalyzer::new(&self.registry, analyze) {
                Ok(a) => Some(a),
                Err(e) => {
                    self.errors.push(format!("analyzer setup: {e}"));
                    None
                }
            }
        };
    }

    fn timer(&mut self, net: &mut SimNetwork, at: u64, what: Pending) -> Result<(), TransportError> {
        let token = self.next_token;
        self.next_token += 1;
        self.timers.insert(token, what);
        net.set_timer(self.endpoint, at, token)
    }

    fn send_control(&mut self, net: &mut SimNetwork, msg: &ControlMessage) -> Result<(), TransportError> {
        let stream = match self.control {
            Some(s) => s,
            None => {
                let s = net.open_stream(self.session, self.endpoint)?;
                net.send(s, &framing::control_stream_preamble())?;
                self.control = Some(s);
                s
            }
        };
        net.send(stream, &wire::encode_message(msg).expect("client messages are in range"))
    }

    /// Sends SUBSCRIBE and arms the update schedule.
    pub fn start(&mut self, net: &mut SimNetwork) -> Result<(), TransportError> {
        let analyze = self.cfg.analyze.clone();
        self.set_analysis(&analyze);
        let msg = ControlMessage::Subscribe(Subscribe {
            subscribe_id: self.cfg.subscribe_id,
            track_name: self.cfg.track.clone(),
            priority: 0,
            parameters: Self::params(&self.cfg.analyze, &self.cfg.filter),
        });
        self.send_control(net, &msg)?;
        for i in 0..self.cfg.updates.len() {
            let at = self.cfg.updates[i].at_ms;
            self.timer(net, at, Pending::Update(i))?;
        }
        Ok(())
    }

    pub fn handle_event(&mut self, net: &mut SimNetwork, ev: &NetEvent) -> Result<(), TransportError> {
        let now = ev.at_ms;
        let result = match &ev.kind {
            NetEventKind::Data { stream, bytes } => {
                self.parsers.entry(*stream).or_default().push(bytes);
                loop {
                    let item = match self.parsers.get_mut(stream).expect("inserted").next_item() {
                        Ok(Some(item)) => item,
                        Ok(None) => break Ok(()),
                        Err(e) => {
                            self.errors.push(format!("stream {}: {e}", stream.0));
                            self.parsers.remove(stream);
                            break Ok(());
                        }
                    };
                    self.on_item(now, *stream, item);
                }
            }
            NetEventKind::Finished { stream } => {
                self.parsers.remove(stream);
                if let Some(g) = self.stream_group.remove(stream) {
                    let r = self.records.get_mut(&g).expect("recorded on header");
                    r.complete_ms = Some(now);
                    self.finish_analysis(net, now, g, true)
                } else {
                    Ok(())
                }
            }
            NetEventKind::Reset { stream } => {
                self.parsers.remove(stream);
                if let Some(g) = self.stream_group.remove(stream) {
                    self.records.get_mut(&g).expect("recorded on header").reset = true;
                    self.finish_analysis(net, now, g, false)
                } else {
                    Ok(())
                }
            }
            NetEventKind::Timer { token } => match self.timers.remove(token) {
                Some(Pending::Approve(a)) => {
                    let msg = ControlMessage::Approve(a.clone());
                    self.sent.push(SentApproval {
                        group_id: a.group_id,
                        categories: a.categories,
                        at_ms: now,
                    });
                    self.send_control(net, &msg)
                }
                Some(Pending::Update(i)) => {
                    let upd = self.cfg.updates[i].clone();
                    self.set_analysis(&upd.analyze);
                    let msg = ControlMessage::SubscribeUpdate(SubscribeUpdate {
                        subscribe_id: self.cfg.subscribe_id,
                        parameters: Self::params(&upd.analyze, &upd.filter),
                    });
                    self.send_control(net, &msg)
                }
                None => Ok(()),
            },
            NetEventKind::Closed { .. } => Ok(()),
        };
        match result {
            Err(TransportError::Disconnected) => Ok(()),
            other => other,
        }
    }

    fn on_item(&mut self, now: u64, stream: StreamId, item: StreamItem) {
        match item {
            StreamItem::Control(ControlMessage::SubscribeOk { subscribe_id }) if subscribe_id == self.cfg.subscribe_id => {
                self.subscribed = true;
            }
            StreamItem::Control(ControlMessage::Approve(a)) => self.seen.push(SentApproval {
                group_id: a.group_id,
                categories: a.categories,
                at_ms: now,
            }),
            StreamItem::Control(other) => self.errors.push(format!("unexpected {}", other.name())),
            StreamItem::GroupHeader(h) => {
                self.stream_group.insert(stream, h.group_id);
                self.records.insert(
                    h.group_id,
                    ReceiveRecord {
                        group_id: h.group_id,
                        first_recv_ms: now,
                        complete_ms: None,
                        objects: 0,
                        reset: false,
                    },
                );
                if self.analyzer.is_some() {
                    self.analyzed.insert(h.group_id, Vec::new());
                    if self.active.is_none() {
                        self.active = Some(h.group_id);
                    }
                }
            }
            StreamItem::Object(payload) => {
                let Some(&g) = self.stream_group.get(&stream) else {
                    return;
                };
                self.records.get_mut(&g).expect("recorded on header").objects += 1;
                if !self.analyzed.contains_key(&g) {
                    return;
                }
                match media::decode_frame_payload(&payload) {
                    Ok(frame) => {
                        if self.active == Some(g) {
                            self.observe(g, &frame);
                        } else {
                            self.analyzed.get_mut(&g).expect("checked").push(frame);
                        }
                    }
                    Err(e) => self.errors.push(format!("group {g}: bad object: {e}")),
                }
            }
        }
    }

    fn observe(&mut self, g: u64, frame: &media::LuminanceFrame) {
        if let Some(a) = self.analyzer.as_mut() {
            let t = Instant::now();
            a.observe_frame(frame);
            *self.compute.entry(g).or_default() += t.elapsed();
        }
    }

    /// Closes group `g` for analysis and any later groups that already
    /// finished while waiting their turn.
    fn finish_analysis(&mut self, net: &mut SimNetwork, now: u64, g: u64, complete: bool) -> Result<(), TransportError> {
        if !self.analyzed.contains_key(&g) {
            return Ok(());
        }
        self.done_groups.insert(g, complete);
        while let Some(active) = self.active {
            let Some(complete) = self.done_groups.remove(&active) else {
                break;
            };
            self.analyzed.remove(&active);
            if let Some(a) = self.analyzer.as_mut() {
                let t = Instant::now();
                let verdict = a.finish_group(active);
                *self.compute.entry(active).or_default() += t.elapsed();
                if complete {
                    if !verdict.approved.is_empty() {
                        let approve = Approve {
                            subscribe_id: self.cfg.subscribe_id,
                            group_id: active,
                            categories: verdict.approved.clone(),
                        };
                        self.timer(net, now + self.cfg.analysis_delay_ms, Pending::Approve(approve))?;
                    }
                    self.verdicts.push(verdict);
                }
            }
            self.active = self.analyzed.keys().next().copied();
            if let Some(next) = self.active {
                let backlog = std::mem::take(self.analyzed.get_mut(&next).expect("present"));
                for frame in &backlog {
                    self.observe(next, frame);
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> SubscriberReport {
        let groups: Vec<ReceiveRecord> = self.records.values().cloned().collect();
        let budget = Duration::from_millis(self.cfg.gop_ms);
        let realtime_ok = self.cfg.analysis_delay_ms < self.cfg.gop_ms && self.compute.values().all(|d| *d < budget);
        SubscriberReport {
            name: self.cfg.name.clone(),
            subscribed: self.subscribed,
            playback: compute_playback(&groups, self.cfg.gop_ms, self.cfg.startup_groups),
            groups,
            verdicts: self.verdicts.clone(),
            approvals_sent: self.sent.clone(),
            approvals_seen: self.seen.clone(),
            realtime_ok,
            errors: self.errors.clone(),
        }
    }
}
