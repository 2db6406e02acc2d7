//! Relay session coordinator.
//!
//! [`Relay`] is a pure state machine: subscriptions, group ingest and
//! approvals go in, [`RelayAction`]s come out. [`RelayNode`] drives it over a
//! [`SimNetwork`], caching group objects and writing one stream per
//! delivered group.
//!
//! Gating: a session with FILTER categories receives group `N` only once
//! every one of those categories is approved for `N`. When `N` becomes
//! deliverable, every earlier undelivered group is skipped for good and
//! the subscriber is never told.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::transport::framing::{self, GroupHeader, StreamItem, StreamParser};
use crate::transport::{EndpointId, NetEvent, NetEventKind, SessionId, SimNetwork, StreamId, TransportError};
use crate::wire::{self, Approve, CategorySet, CategoryType, ControlMessage, Parameter};

pub const DEFAULT_RETENTION: usize = 64;
pub const DEFAULT_STALL_ALARM_MS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelayConfig {
    /// Groups kept in the approval ledger and object cache per track.
    pub retention: usize,
    /// A filtered session waiting this long on one group raises a log alarm.
    pub stall_alarm_ms: u64,
    /// Categories an analyzer may ask to ANALYZE.
    pub analyze_capabilities: CategorySet,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig {
            retention: DEFAULT_RETENTION,
            stall_alarm_ms: DEFAULT_STALL_ALARM_MS,
            analyze_capabilities: [CategoryType::STROBE, CategoryType::SMOKING, CategoryType::ALCOHOL]
                .into_iter()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RejectReason {
    #[error("ANALYZE and FILTER are both non-empty")]
    AnalyzeAndFilter,
    #[error("{0} carries an empty category set")]
    EmptyCategorySet(&'static str),
    #[error("no detector capability for {0}")]
    NoCapability(CategoryType),
    #[error("session already holds subscription {0}")]
    DuplicateSubscription(u64),
    #[error("no subscription {0} on this session")]
    UnknownSubscription(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelayError {
    #[error("subscription rejected: {0}")]
    Rejected(#[from] RejectReason),
    #[error("unknown session {0}")]
    UnknownSession(u32),
    #[error("track {track}: group {got} does not follow {expected_after}")]
    NonConsecutiveGroup {
        track: String,
        expected_after: u64,
        got: u64,
    },
    #[error("session {session} is not an analyzer for {category}")]
    Unauthorized { session: u32, category: CategoryType },
    #[error("APPROVE names subscription {got}, session holds {held}")]
    SubscriptionMismatch { got: u64, held: u64 },
    #[error("APPROVE for group {group} which has not been ingested")]
    FutureGroup { group: u64 },
    #[error("{0} is not accepted from a subscriber")]
    UnexpectedMessage(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Plain,
    Analyzer,
    Filterer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionState {
    pub session_id: u32,
    pub subscribe_id: u64,
    pub track: String,
    pub analyze: CategorySet,
    pub filter: CategorySet,
    /// `None` until the session has seen its first group.
    pub next_deliver: Option<u64>,
    pub delivered: Vec<u64>,
    pub skipped: Vec<u64>,
    #[serde(skip)]
    stall_alarmed: Option<u64>,
}

impl SessionState {
    pub fn role(&self) -> Role {
        if !self.filter.is_empty() {
            Role::Filterer
        } else if !self.analyze.is_empty() {
            Role::Analyzer
        } else {
            Role::Plain
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ApprovalMark {
    pub session: u32,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct GroupApprovals {
    pub ingest_ms: u64,
    /// First approver per category.
    pub approved: BTreeMap<CategoryType, ApprovalMark>,
}

/// Per-track record of approved categories for the most recent groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApprovalLedger {
    retention: usize,
    groups: BTreeMap<u64, GroupApprovals>,
}

impl ApprovalLedger {
    pub fn new(retention: usize) -> Self {
        ApprovalLedger {
            retention: retention.max(1),
            groups: BTreeMap::new(),
        }
    }

    pub fn get(&self, group: u64) -> Option<&GroupApprovals> {
        self.groups.get(&group)
    }

    pub fn oldest(&self) -> Option<u64> {
        self.groups.keys().next().copied()
    }

    pub fn newest(&self) -> Option<u64> {
        self.groups.keys().next_back().copied()
    }

    pub fn approved_categories(&self, group: u64) -> CategorySet {
        self.groups
            .get(&group)
            .map(|g| g.approved.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Whether every category in `required` is approved for `group`.
    /// Evicted and unknown groups are never approved.
    pub fn is_approved(&self, group: u64, required: &CategorySet) -> bool {
        self.groups
            .get(&group)
            .is_some_and(|g| required.iter().all(|c| g.approved.contains_key(&c)))
    }

    fn insert(&mut self, group: u64, ingest_ms: u64) -> Vec<u64> {
        self.groups.insert(
            group,
            GroupApprovals {
                ingest_ms,
                approved: BTreeMap::new(),
            },
        );
        let mut evicted = Vec::new();
        while self.groups.len() > self.retention {
            let (g, _) = self.groups.pop_first().expect("non-empty");
            evicted.push(g);
        }
        evicted
    }

    /// Returns the categories that were not yet approved.
    fn record(&mut self, group: u64, categories: &CategorySet, mark: ApprovalMark) -> Vec<CategoryType> {
        let Some(entry) = self.groups.get_mut(&group) else {
            return Vec::new();
        };
        categories
            .iter()
            .filter(|c| {
                if entry.approved.contains_key(c) {
                    false
                } else {
                    entry.approved.insert(*c, mark);
                    true
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct TrackState {
    last: Option<u64>,
    ledger: ApprovalLedger,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RelayAction {
    Control { session: SessionId, msg: ControlMessage },
    Deliver { session: SessionId, track: String, group_id: u64 },
}

/// One structured log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayLogEvent {
    pub ts: u64,
    pub session: Option<u32>,
    pub event: &'static str,
    pub group: Option<u64>,
    pub categories: Vec<CategoryType>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl RelayLogEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log events serialize")
    }
}

#[derive(Debug)]
pub struct Relay {
    cfg: RelayConfig,
    tracks: BTreeMap<String, TrackState>,
    sessions: BTreeMap<SessionId, SessionState>,
    log: Vec<RelayLogEvent>,
}

struct Sets {
    analyze: CategorySet,
    filter: CategorySet,
}

impl Relay {
    pub fn new(cfg: RelayConfig) -> Self {
        Relay {
            cfg,
            tracks: BTreeMap::new(),
            sessions: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &RelayConfig {
        &self.cfg
    }

    pub fn session(&self, id: SessionId) -> Option<&SessionState> {
        self.sessions.get(&id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionState> {
        self.sessions.values()
    }

    pub fn ledger(&self, track: &str) -> Option<&ApprovalLedger> {
        self.tracks.get(track).map(|t| &t.ledger)
    }

    pub fn last_ingested(&self, track: &str) -> Option<u64> {
        self.tracks.get(track).and_then(|t| t.last)
    }

    pub fn log(&self) -> &[RelayLogEvent] {
        &self.log
    }

    /// Ingested groups the session has neither received nor skipped yet.
    pub fn pending(&self, id: SessionId) -> Vec<u64> {
        let Some(s) = self.sessions.get(&id) else {
            return Vec::new();
        };
        match (s.next_deliver, self.last_ingested(&s.track)) {
            (Some(nd), Some(last)) if nd <= last => (nd..=last).collect(),
            _ => Vec::new(),
        }
    }

    fn emit(&mut self, ts: u64, session: Option<SessionId>, event: &'static str, group: Option<u64>, categories: Vec<CategoryType>) {
        self.emit_detail(ts, session, event, group, categories, None);
    }

    fn emit_detail(
        &mut self,
        ts: u64,
        session: Option<SessionId>,
        event: &'static str,
        group: Option<u64>,
        categories: Vec<CategoryType>,
        detail: Option<String>,
    ) {
        let ev = RelayLogEvent {
            ts,
            session: session.map(|s| s.0),
            event,
            group,
            categories,
            detail,
        };
        tracing::debug!(target: "moqgate::relay", "{}", ev.to_json_line());
        self.log.push(ev);
    }

    fn reject(&mut self, now: u64, session: SessionId, reason: RejectReason) -> RelayError {
        self.emit_detail(now, Some(session), "subscribe_rejected", None, Vec::new(), Some(reason.to_string()));
        RelayError::Rejected(reason)
    }

    fn parse_sets(&self, params: &[Parameter]) -> Result<Sets, RejectReason> {
        let mut sets = Sets {
            analyze: CategorySet::empty(),
            filter: CategorySet::empty(),
        };
        for p in params {
            match p {
                Parameter::Analyze(c) if c.is_empty() => return Err(RejectReason::EmptyCategorySet("ANALYZE")),
                Parameter::Filter(c) if c.is_empty() => return Err(RejectReason::EmptyCategorySet("FILTER")),
                Parameter::Analyze(c) => sets.analyze = c.clone(),
                Parameter::Filter(c) => sets.filter = c.clone(),
                Parameter::Unknown { .. } => {}
            }
        }
        if !sets.analyze.is_empty() && !sets.filter.is_empty() {
            return Err(RejectReason::AnalyzeAndFilter);
        }
        if let Some(c) = sets
            .analyze
            .iter()
            .find(|c| !self.cfg.analyze_capabilities.contains(*c))
        {
            return Err(RejectReason::NoCapability(c));
        }
        Ok(sets)
    }

    /// Dispatches a control message received from a subscriber session.
    pub fn handle_control(&mut self, now: u64, session: SessionId, msg: &ControlMessage) -> Result<Vec<RelayAction>, RelayError> {
        match msg {
            ControlMessage::Subscribe(_) | ControlMessage::SubscribeUpdate(_) => self.handle_subscribe(now, session, msg),
            ControlMessage::Approve(a) => self.handle_approve(now, session, a),
            ControlMessage::SubscribeOk { .. } => Err(RelayError::UnexpectedMessage("SUBSCRIBE_OK")),
        }
    }

    pub fn handle_subscribe(&mut self, now: u64, session: SessionId, msg: &ControlMessage) -> Result<Vec<RelayAction>, RelayError> {
        match msg {
            ControlMessage::Subscribe(sub) => {
                if let Some(existing) = self.sessions.get(&session) {
                    let held = existing.subscribe_id;
                    return Err(self.reject(now, session, RejectReason::DuplicateSubscription(held)));
                }
                let sets = self.parse_sets(&sub.parameters).map_err(|r| self.reject(now, session, r))?;
                let last = self.last_ingested(&sub.track_name);
                let state = SessionState {
                    session_id: session.0,
                    subscribe_id: sub.subscribe_id,
                    track: sub.track_name.clone(),
                    analyze: sets.analyze,
                    filter: sets.filter,
                    next_deliver: last,
                    delivered: Vec::new(),
                    skipped: Vec::new(),
                    stall_alarmed: None,
                };
                let cats: Vec<_> = state.analyze.iter().chain(state.filter.iter()).collect();
                let role = state.role();
                self.sessions.insert(session, state);
                self.emit_detail(now, Some(session), "subscribe", None, cats, Some(format!("{role:?}").to_lowercase()));
                let mut actions = vec![RelayAction::Control {
                    session,
                    msg: ControlMessage::SubscribeOk {
                        subscribe_id: sub.subscribe_id,
                    },
                }];
                match (role, last) {
                    (Role::Filterer, _) => actions.extend(self.gate_evaluate(now, session)),
                    // Join at the live edge: the group in progress is sent right away.
                    (_, Some(g)) => actions.push(self.deliver(now, session, g)),
                    (_, None) => {}
                }
                Ok(actions)
            }
            ControlMessage::SubscribeUpdate(upd) => {
                let held = match self.sessions.get(&session) {
                    Some(s) if s.subscribe_id == upd.subscribe_id => s.subscribe_id,
                    _ => return Err(self.reject(now, session, RejectReason::UnknownSubscription(upd.subscribe_id))),
                };
                let sets = self.parse_sets(&upd.parameters).map_err(|r| self.reject(now, session, r))?;
                let s = self.sessions.get_mut(&session).expect("checked above");
                let was_filtered = !s.filter.is_empty();
                s.analyze = sets.analyze;
                s.filter = sets.filter;
                let cats: Vec<_> = s.analyze.iter().chain(s.filter.iter()).collect();
                let role = s.role();
                self.emit_detail(now, Some(session), "subscribe_update", None, cats, Some(format!("{role:?}").to_lowercase()));
                let mut actions = vec![RelayAction::Control {
                    session,
                    msg: ControlMessage::SubscribeOk { subscribe_id: held },
                }];
                if role == Role::Filterer {
                    actions.extend(self.gate_evaluate(now, session));
                } else if was_filtered {
                    for g in self.pending(session) {
                        if self.ledger(&self.sessions[&session].track).is_some_and(|l| l.get(g).is_some()) {
                            actions.push(self.deliver(now, session, g));
                        } else {
                            self.skip(now, session, g);
                        }
                    }
                }
                Ok(actions)
            }
            other => Err(RelayError::UnexpectedMessage(other.name())),
        }
    }

    fn deliver(&mut self, now: u64, session: SessionId, group_id: u64) -> RelayAction {
        let s = self.sessions.get_mut(&session).expect("session exists");
        debug_assert!(s.next_deliver.is_none_or(|nd| group_id >= nd));
        s.delivered.push(group_id);
        s.next_deliver = Some(group_id + 1);
        let track = s.track.clone();
        self.emit(now, Some(session), "deliver", Some(group_id), Vec::new());
        RelayAction::Deliver {
            session,
            track,
            group_id,
        }
    }

    fn skip(&mut self, now: u64, session: SessionId, group_id: u64) {
        let s = self.sessions.get_mut(&session).expect("session exists");
        s.skipped.push(group_id);
        s.next_deliver = Some(group_id + 1);
        self.emit(now, Some(session), "skip", Some(group_id), Vec::new());
    }

    /// Registers group `group_id` of `track` (called when its first bytes
    /// reach the relay) and delivers it to every session without FILTER.
    pub fn ingest_group(&mut self, now: u64, track: &str, group_id: u64) -> Result<Vec<RelayAction>, RelayError> {
        let retention = self.cfg.retention;
        let t = self.tracks.entry(track.to_string()).or_insert_with(|| TrackState {
            last: None,
            ledger: ApprovalLedger::new(retention),
        });
        if let Some(last) = t.last {
            if last.checked_add(1) != Some(group_id) {
                let err = RelayError::NonConsecutiveGroup {
                    track: track.to_string(),
                    expected_after: last,
                    got: group_id,
                };
                self.emit_detail(now, None, "protocol_error", Some(group_id), Vec::new(), Some(err.to_string()));
                return Err(err);
            }
        }
        t.last = Some(group_id);
        let evicted = t.ledger.insert(group_id, now);
        self.emit(now, None, "ingest", Some(group_id), Vec::new());
        for g in evicted {
            self.emit(now, None, "evict", Some(g), Vec::new());
        }
        let ids: Vec<SessionId> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.track == track)
            .map(|(id, _)| *id)
            .collect();
        let mut actions = Vec::new();
        for id in ids {
            let s = self.sessions.get_mut(&id).expect("listed above");
            if s.filter.is_empty() {
                actions.push(self.deliver(now, id, group_id));
            } else if s.next_deliver.is_none() {
                s.next_deliver = Some(group_id);
            }
        }
        Ok(actions)
    }

    pub fn handle_approve(&mut self, now: u64, session: SessionId, msg: &Approve) -> Result<Vec<RelayAction>, RelayError> {
        let s = self
            .sessions
            .get(&session)
            .ok_or(RelayError::UnknownSession(session.0))?;
        let err = if s.subscribe_id != msg.subscribe_id {
            Some(RelayError::SubscriptionMismatch {
                got: msg.subscribe_id,
                held: s.subscribe_id,
            })
        } else {
            msg.categories
                .iter()
                .find(|c| !s.analyze.contains(*c))
                .map(|category| RelayError::Unauthorized {
                    session: session.0,
                    category,
                })
        };
        let track = s.track.clone();
        if let Some(err) = err {
            self.emit_detail(
                now,
                Some(session),
                "protocol_error",
                Some(msg.group_id),
                msg.categories.iter().collect(),
                Some(err.to_string()),
            );
            return Err(err);
        }
        let Some(t) = self.tracks.get_mut(&track) else {
            return Err(RelayError::FutureGroup { group: msg.group_id });
        };
        if t.last.is_none_or(|last| msg.group_id > last) {
            return Err(RelayError::FutureGroup { group: msg.group_id });
        }
        if t.ledger.get(msg.group_id).is_none() {
            self.emit(now, Some(session), "approve_evicted", Some(msg.group_id), msg.categories.iter().collect());
            return Ok(Vec::new());
        }
        let added = t.ledger.record(
            msg.group_id,
            &msg.categories,
            ApprovalMark {
                session: session.0,
                at_ms: now,
            },
        );
        if added.is_empty() {
            self.emit(now, Some(session), "approve_duplicate", Some(msg.group_id), msg.categories.iter().collect());
            return Ok(Vec::new());
        }
        self.emit(now, Some(session), "approve", Some(msg.group_id), added.clone());
        let added = CategorySet::collect_unique(added);
        let mut actions = Vec::new();
        let peers: Vec<(SessionId, u64, bool)> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.track == track)
            .map(|(id, s)| (*id, s.subscribe_id, !s.filter.is_empty()))
            .collect();
        for &(id, subscribe_id, _) in &peers {
            actions.push(RelayAction::Control {
                session: id,
                msg: ControlMessage::Approve(Approve {
                    subscribe_id,
                    group_id: msg.group_id,
                    categories: added.clone(),
                }),
            });
        }
        for (id, _, filtered) in peers {
            if filtered {
                actions.extend(self.gate_evaluate(now, id));
            }
        }
        Ok(actions)
    }

    /// Delivers, in order, every group the session can now receive, skipping
    /// the undelivered groups in front of each.
    pub fn gate_evaluate(&mut self, now: u64, session: SessionId) -> Vec<RelayAction> {
        let mut actions = Vec::new();
        loop {
            let Some(s) = self.sessions.get(&session) else {
                return actions;
            };
            if s.filter.is_empty() {
                return actions;
            }
            let Some(t) = self.tracks.get(&s.track) else {
                return actions;
            };
            let (Some(nd), Some(last)) = (s.next_deliver, t.last) else {
                return actions;
            };
            let from = t.ledger.oldest().map_or(nd, |o| o.max(nd));
            let Some(n) = (from..=last).find(|&g| t.ledger.is_approved(g, &s.filter)) else {
                return actions;
            };
            for g in nd..n {
                self.skip(now, session, g);
            }
            actions.push(self.deliver(now, session, n));
        }
    }

    /// Logs an alarm for each filtered session that has waited at least the
    /// configured time on its oldest pending group. Never skips.
    pub fn check_stalls(&mut self, now: u64) -> usize {
        let threshold = self.cfg.stall_alarm_ms;
        let mut alarms = Vec::new();
        for (id, s) in &self.sessions {
            if s.filter.is_empty() {
                continue;
            }
            let Some(t) = self.tracks.get(&s.track) else {
                continue;
            };
            let (Some(nd), Some(last)) = (s.next_deliver, t.last) else {
                continue;
            };
            if nd > last {
                continue;
            }
            let waiting = t.ledger.oldest().map_or(nd, |o| o.max(nd));
            let Some(entry) = t.ledger.get(waiting) else {
                continue;
            };
            if now.saturating_sub(entry.ingest_ms) >= threshold && s.stall_alarmed != Some(waiting) {
                alarms.push((*id, waiting));
            }
        }
        for &(id, g) in &alarms {
            self.sessions.get_mut(&id).expect("listed").stall_alarmed = Some(g);
            self.emit(now, Some(id), "stall_alarm", Some(g), Vec::new());
        }
        alarms.len()
    }

    pub fn remove_session(&mut self, now: u64, session: SessionId) -> Option<SessionState> {
        let s = self.sessions.remove(&session)?;
        self.emit(now, Some(session), "session_closed", None, Vec::new());
        Some(s)
    }
}

/// Relay-side timestamps for one group.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GroupTimes {
    pub ingest_ms: u64,
    pub complete_ms: Option<u64>,
    /// First accepted APPROVE arrival per category.
    pub approve_recv_ms: BTreeMap<CategoryType, u64>,
}

#[derive(Debug, Default)]
struct CachedGroup {
    frame_count: u64,
    objects: Vec<Vec<u8>>,
    complete: bool,
    aborted: bool,
    /// Outbound streams still receiving this group live.
    attached: Vec<StreamId>,
    publisher: Option<SessionId>,
}

/// Runs a [`Relay`] on one endpoint of a [`SimNetwork`].
#[derive(Debug)]
pub struct RelayNode {
    endpoint: EndpointId,
    relay: Relay,
    publishers: BTreeMap<SessionId, String>,
    parsers: HashMap<StreamId, StreamParser>,
    inbound: HashMap<StreamId, (String, u64)>,
    cache: BTreeMap<(String, u64), CachedGroup>,
    control_out: BTreeMap<SessionId, StreamId>,
    times: BTreeMap<(String, u64), GroupTimes>,
}

impl RelayNode {
    pub fn new(endpoint: EndpointId, cfg: RelayConfig) -> Self {
        RelayNode {
            endpoint,
            relay: Relay::new(cfg),
            publishers: BTreeMap::new(),
            parsers: HashMap::new(),
            inbound: HashMap::new(),
            cache: BTreeMap::new(),
            control_out: BTreeMap::new(),
            times: BTreeMap::new(),
        }
    }

    pub fn endpoint(&self) -> EndpointId {
        self.endpoint
    }

    pub fn relay(&self) -> &Relay {
        &self.relay
    }

    /// Group streams arriving on `session` belong to `track`.
    pub fn add_publisher(&mut self, session: SessionId, track: impl Into<String>) {
        self.publishers.insert(session, track.into());
    }

    pub fn group_times(&self, track: &str, group: u64) -> Option<&GroupTimes> {
        self.times.get(&(track.to_string(), group))
    }

    pub fn handle_event(&mut self, net: &mut SimNetwork, ev: &NetEvent) -> Result<(), TransportError> {
        debug_assert_eq!(ev.endpoint, self.endpoint);
        let now = ev.at_ms;
        match &ev.kind {
            NetEventKind::Data { stream, bytes } => {
                let session = net.session_of(*stream)?;
                let parser = self.parsers.entry(*stream).or_default();
                parser.push(bytes);
                loop {
                    let item = match self.parsers.get_mut(stream).expect("inserted").next_item() {
                        Ok(Some(item)) => item,
                        Ok(None) => break,
                        Err(e) => {
                            self.relay
                                .emit_detail(now, Some(session), "stream_error", None, Vec::new(), Some(e.to_string()));
                            self.parsers.remove(stream);
                            break;
                        }
                    };
                    self.on_item(net, now, session, *stream, item)?;
                }
            }
            NetEventKind::Finished { stream } => {
                self.parsers.remove(stream);
                if let Some(key) = self.inbound.remove(stream) {
                    self.complete_group(net, now, key)?;
                }
            }
            NetEventKind::Reset { stream } => {
                self.parsers.remove(stream);
                if let Some(key) = self.inbound.remove(stream) {
                    self.abort_group(net, key)?;
                }
            }
            NetEventKind::Closed { session } => {
                if self.publishers.contains_key(session) {
                    let open: Vec<_> = self
                        .cache
                        .iter()
                        .filter(|(_, c)| c.publisher == Some(*session) && !c.complete)
                        .map(|(k, _)| k.clone())
                        .collect();
                    for key in open {
                        self.abort_group(net, key)?;
                    }
                } else {
                    self.relay.remove_session(now, *session);
                    self.control_out.remove(session);
                }
            }
            NetEventKind::Timer { .. } => {}
        }
        self.relay.check_stalls(now);
        Ok(())
    }

    fn on_item(&mut self, net: &mut SimNetwork, now: u64, session: SessionId, stream: StreamId, item: StreamItem) -> Result<(), TransportError> {
        match item {
            StreamItem::Control(msg) => {
                if let ControlMessage::Approve(a) = &msg {
                    let track = self.relay.session(session).map(|s| s.track.clone());
                    let result = self.relay.handle_control(now, session, &msg);
                    if let (Ok(_), Some(track)) = (&result, track) {
                        if let Some(t) = self.times.get_mut(&(track, a.group_id)) {
                            for c in a.categories.iter() {
                                t.approve_recv_ms.entry(c).or_insert(now);
                            }
                        }
                    }
                    return self.apply_result(net, now, session, result);
                }
                let result = self.relay.handle_control(now, session, &msg);
                self.apply_result(net, now, session, result)
            }
            StreamItem::GroupHeader(h) => {
                let Some(track) = self.publishers.get(&session).cloned() else {
                    self.relay.emit_detail(
                        now,
                        Some(session),
                        "stream_error",
                        Some(h.group_id),
                        Vec::new(),
                        Some("group stream from a non-publisher".into()),
                    );
                    return Ok(());
                };
                let key = (track.clone(), h.group_id);
                self.cache.insert(
                    key.clone(),
                    CachedGroup {
                        frame_count: h.frame_count,
                        publisher: Some(session),
                        ..CachedGroup::default()
                    },
                );
                self.inbound.insert(stream, key.clone());
                self.times.insert(
                    key,
                    GroupTimes {
                        ingest_ms: now,
                        ..GroupTimes::default()
                    },
                );
                let result = self.relay.ingest_group(now, &track, h.group_id);
                self.evict_cache(&track);
                self.apply_result(net, now, session, result)
            }
            StreamItem::Object(payload) => {
                let Some(key) = self.inbound.get(&stream) else {
                    return Ok(());
                };
                let c = self.cache.get_mut(key).expect("cached on header");
                let bytes = framing::encode_object(&payload).expect("object length fits");
                c.objects.push(payload);
                for out in c.attached.clone() {
                    Self::send_or_drop(net, out, &bytes)?;
                }
                Ok(())
            }
        }
    }

    fn apply_result(
        &mut self,
        net: &mut SimNetwork,
        now: u64,
        session: SessionId,
        result: Result<Vec<RelayAction>, RelayError>,
    ) -> Result<(), TransportError> {
        match result {
            Ok(actions) => self.apply(net, actions),
            Err(e) => {
                tracing::warn!(session = session.0, at_ms = now, error = %e, "relay rejected input");
                Ok(())
            }
        }
    }

    fn evict_cache(&mut self, track: &str) {
        let Some(oldest) = self.relay.ledger(track).and_then(ApprovalLedger::oldest) else {
            return;
        };
        self.cache.retain(|(t, g), _| t != track || *g >= oldest);
    }

    fn send_or_drop(net: &mut SimNetwork, stream: StreamId, bytes: &[u8]) -> Result<(), TransportError> {
        match net.send(stream, bytes) {
            Err(TransportError::Disconnected) => Ok(()),
            other => other,
        }
    }

    fn control_stream(&mut self, net: &mut SimNetwork, session: SessionId) -> Result<StreamId, TransportError> {
        if let Some(s) = self.control_out.get(&session) {
            return Ok(*s);
        }
        let s = net.open_stream(session, self.endpoint)?;
        net.send(s, &framing::control_stream_preamble())?;
        self.control_out.insert(session, s);
        Ok(s)
    }

    fn apply(&mut self, net: &mut SimNetwork, actions: Vec<RelayAction>) -> Result<(), TransportError> {
        for action in actions {
            match action {
                RelayAction::Control { session, msg } => {
                    if net.is_closed(session) {
                        continue;
                    }
                    let s = self.control_stream(net, session)?;
                    let bytes = wire::encode_message(&msg).expect("relay messages are in range");
                    Self::send_or_drop(net, s, &bytes)?;
                }
                RelayAction::Deliver {
                    session,
                    track,
                    group_id,
                } => {
                    if net.is_closed(session) {
                        continue;
                    }
                    let Some(c) = self.cache.get_mut(&(track, group_id)) else {
                        continue;
                    };
                    let out = net.open_stream(session, self.endpoint)?;
                    let mut bytes = framing::encode_group_header(GroupHeader {
                        group_id,
                        frame_count: c.frame_count,
                    })
                    .expect("group header fits");
                    for o in &c.objects {
                        bytes.extend(framing::encode_object(o).expect("object length fits"));
                    }
                    net.send(out, &bytes)?;
                    if c.aborted {
                        net.reset(out)?;
                    } else if c.complete {
                        net.finish(out)?;
                    } else {
                        c.attached.push(out);
                    }
                }
            }
        }
        Ok(())
    }

    fn complete_group(&mut self, net: &mut SimNetwork, now: u64, key: (String, u64)) -> Result<(), TransportError> {
        if let Some(t) = self.times.get_mut(&key) {
            t.complete_ms = Some(now);
        }
        let Some(c) = self.cache.get_mut(&key) else {
            return Ok(());
        };
        c.complete = true;
        for out in std::mem::take(&mut c.attached) {
            match net.finish(out) {
                Err(TransportError::Disconnected) => {}
                other => other?,
            }
        }
        self.relay.emit(now, None, "complete", Some(key.1), Vec::new());
        Ok(())
    }

    fn abort_group(&mut self, net: &mut SimNetwork, key: (String, u64)) -> Result<(), TransportError> {
        let Some(c) = self.cache.get_mut(&key) else {
            return Ok(());
        };
        c.aborted = true;
        for out in std::mem::take(&mut c.attached) {
            match net.reset(out) {
                Err(TransportError::Disconnected) => {}
                other => other?,
            }
        }
        let now = net.now_ms();
        self.relay.emit(now, None, "abort", Some(key.1), Vec::new());
        Ok(())
    }
}
