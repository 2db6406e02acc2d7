//! Deterministic discrete-event network.
//!
//! Events are processed in `(time, sequence)` order on a [`VirtualClock`].
//! Streams are reliable and ordered; distinct streams carry no mutual
//! ordering guarantee. With zero jitter a chunk sent at `t` arrives at
//! exactly `t + one_way_delay_ms`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TransportError;

/// Virtual-time cap used when none is configured.
pub const DEFAULT_MAX_TIME_MS: u64 = 600_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct EndpointId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct SessionId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct StreamId(pub u32);

/// Monotone millisecond clock; only the event loop moves it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now_ms: u64,
}

impl VirtualClock {
    pub fn starting_at(now_ms: u64) -> Self {
        VirtualClock { now_ms }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    fn advance_to(&mut self, t: u64) {
        debug_assert!(t >= self.now_ms, "clock moved backwards: {} -> {t}", self.now_ms);
        self.now_ms = self.now_ms.max(t);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Link {
    pub one_way_delay_ms: u64,
    /// Half-width of the uniform jitter added to each chunk.
    #[serde(default)]
    pub jitter_ms: u64,
    #[serde(default)]
    pub seed: u64,
}

impl Link {
    pub fn fixed(one_way_delay_ms: u64) -> Self {
        Link {
            one_way_delay_ms,
            jitter_ms: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetEventKind {
    /// First chunk of a stream the endpoint has not seen before is also reported as `Data`.
    Data { stream: StreamId, bytes: Vec<u8> },
    /// The sender finished the stream; no more data follows.
    Finished { stream: StreamId },
    /// The sender abandoned the stream.
    Reset { stream: StreamId },
    Timer { token: u64 },
    Closed { session: SessionId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetEvent {
    pub at_ms: u64,
    pub endpoint: EndpointId,
    pub kind: NetEventKind,
}

/// Outcome of a pull-style [`SimNetwork::receive`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Received {
    Data(Vec<u8>),
    /// Nothing buffered yet.
    Pending,
    /// Sender finished and every chunk has been read.
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub at_ms: u64,
    pub seq: u64,
    pub endpoint: EndpointId,
    pub what: String,
}

struct Direction {
    delay_ms: u64,
    jitter_ms: u64,
    rng: ChaCha8Rng,
}

impl Direction {
    fn new(link: Link, salt: u64) -> Self {
        Direction {
            delay_ms: link.one_way_delay_ms,
            jitter_ms: link.jitter_ms,
            rng: ChaCha8Rng::seed_from_u64(link.seed ^ salt),
        }
    }

    fn sample_delay(&mut self) -> u64 {
        if self.jitter_ms == 0 {
            return self.delay_ms;
        }
        let j = self.jitter_ms as i64;
        let offset = self.rng.random_range(-j..=j);
        (self.delay_ms as i64 + offset).max(0) as u64
    }
}

struct SessionSlot {
    a: EndpointId,
    b: EndpointId,
    a_to_b: Direction,
    b_to_a: Direction,
    closed: bool,
}

struct StreamSlot {
    session: SessionId,
    from: EndpointId,
    to: EndpointId,
    last_arrival: u64,
    send_closed: bool,
    inbox: VecDeque<Vec<u8>>,
    remote_finished: bool,
    reset: bool,
}

enum Pending {
    Data { stream: StreamId, bytes: Vec<u8> },
    Finished { stream: StreamId },
    Reset { stream: StreamId },
    Timer { token: u64 },
    Closed { session: SessionId },
}

struct Scheduled {
    at: u64,
    seq: u64,
    endpoint: EndpointId,
    what: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Scheduled {}

impl Ord for Scheduled {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub struct SimNetwork {
    clock: VirtualClock,
    max_time_ms: u64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    endpoints: Vec<String>,
    sessions: Vec<SessionSlot>,
    streams: Vec<StreamSlot>,
    trace: Vec<TraceEntry>,
    tracing: bool,
}

impl Default for SimNetwork {
    fn default() -> Self {
        Self::new()
    }
}

impl SimNetwork {
    pub fn new() -> Self {
        SimNetwork {
            clock: VirtualClock::default(),
            max_time_ms: DEFAULT_MAX_TIME_MS,
            seq: 0,
            queue: BinaryHeap::new(),
            endpoints: Vec::new(),
            sessions: Vec::new(),
            streams: Vec::new(),
            trace: Vec::new(),
            tracing: true,
        }
    }

    /// Sets the livelock guard: events scheduled later than this fail with
    /// [`TransportError::Timeout`].
    pub fn with_max_time(mut self, max_time_ms: u64) -> Self {
        self.max_time_ms = max_time_ms;
        self
    }

    pub fn with_tracing(mut self, enabled: bool) -> Self {
        self.tracing = enabled;
        self
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn clock(&self) -> VirtualClock {
        self.clock
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn add_endpoint(&mut self, name: impl Into<String>) -> EndpointId {
        self.endpoints.push(name.into());
        EndpointId(self.endpoints.len() as u32 - 1)
    }

    pub fn endpoint_name(&self, id: EndpointId) -> Option<&str> {
        self.endpoints.get(id.0 as usize).map(String::as_str)
    }

    fn check_endpoint(&self, id: EndpointId) -> Result<(), TransportError> {
        if (id.0 as usize) < self.endpoints.len() {
            Ok(())
        } else {
            Err(TransportError::UnknownEndpoint(id.0))
        }
    }

    pub fn connect(&mut self, a: EndpointId, b: EndpointId, link: Link) -> Result<SessionId, TransportError> {
        self.connect_asymmetric(a, b, link, link)
    }

    /// Connects with independent per-direction links.
    pub fn connect_asymmetric(
        &mut self,
        a: EndpointId,
        b: EndpointId,
        a_to_b: Link,
        b_to_a: Link,
    ) -> Result<SessionId, TransportError> {
        self.check_endpoint(a)?;
        self.check_endpoint(b)?;
        let id = SessionId(self.sessions.len() as u32);
        let salt = u64::from(id.0) << 1;
        self.sessions.push(SessionSlot {
            a,
            b,
            a_to_b: Direction::new(a_to_b, salt),
            b_to_a: Direction::new(b_to_a, salt | 1),
            closed: false,
        });
        Ok(id)
    }

    fn session(&self, id: SessionId) -> Result<&SessionSlot, TransportError> {
        self.sessions
            .get(id.0 as usize)
            .ok_or(TransportError::UnknownSession(id.0))
    }

    fn stream(&self, id: StreamId) -> Result<&StreamSlot, TransportError> {
        self.streams
            .get(id.0 as usize)
            .ok_or(TransportError::UnknownStream(id.0))
    }

    /// The endpoint at the other end of `session` from `me`.
    pub fn peer(&self, session: SessionId, me: EndpointId) -> Result<EndpointId, TransportError> {
        let s = self.session(session)?;
        if s.a == me {
            Ok(s.b)
        } else if s.b == me {
            Ok(s.a)
        } else {
            Err(TransportError::NotOnSession)
        }
    }

    pub fn session_of(&self, stream: StreamId) -> Result<SessionId, TransportError> {
        Ok(self.stream(stream)?.session)
    }

    pub fn is_closed(&self, session: SessionId) -> bool {
        self.session(session).map(|s| s.closed).unwrap_or(true)
    }

    /// Opens a unidirectional stream from `from` to the other end of `session`.
    pub fn open_stream(&mut self, session: SessionId, from: EndpointId) -> Result<StreamId, TransportError> {
        let s = self.session(session)?;
        if s.closed {
            return Err(TransportError::Disconnected);
        }
        let to = self.peer(session, from)?;
        self.streams.push(StreamSlot {
            session,
            from,
            to,
            last_arrival: 0,
            send_closed: false,
            inbox: VecDeque::new(),
            remote_finished: false,
            reset: false,
        });
        Ok(StreamId(self.streams.len() as u32 - 1))
    }

    fn arrival(&mut self, stream: StreamId) -> Result<(u64, EndpointId), TransportError> {
        let slot = self.stream(stream)?;
        let (session, from, to) = (slot.session, slot.from, slot.to);
        if slot.send_closed {
            return Err(TransportError::StreamClosed(stream.0));
        }
        let now = self.clock.now_ms();
        let sess = &mut self.sessions[session.0 as usize];
        if sess.closed {
            return Err(TransportError::Disconnected);
        }
        let dir = if sess.a == from {
            &mut sess.a_to_b
        } else {
            &mut sess.b_to_a
        };
        let at = now + dir.sample_delay();
        let slot = &mut self.streams[stream.0 as usize];
        let at = at.max(slot.last_arrival);
        slot.last_arrival = at;
        Ok((at, to))
    }

    fn schedule(&mut self, at: u64, endpoint: EndpointId, what: Pending) {
        self.seq += 1;
        self.queue.push(Scheduled {
            at,
            seq: self.seq,
            endpoint,
            what,
        });
    }

    pub fn send(&mut self, stream: StreamId, bytes: &[u8]) -> Result<(), TransportError> {
        let (at, to) = self.arrival(stream)?;
        self.schedule(
            at,
            to,
            Pending::Data {
                stream,
                bytes: bytes.to_vec(),
            },
        );
        Ok(())
    }

    /// Ends the stream after all previously sent data.
    pub fn finish(&mut self, stream: StreamId) -> Result<(), TransportError> {
        let (at, to) = self.arrival(stream)?;
        self.streams[stream.0 as usize].send_closed = true;
        self.schedule(at, to, Pending::Finished { stream });
        Ok(())
    }

    /// Abandons the stream; the receiver learns of it after the link delay.
    pub fn reset(&mut self, stream: StreamId) -> Result<(), TransportError> {
        let (at, to) = self.arrival(stream)?;
        self.streams[stream.0 as usize].send_closed = true;
        self.schedule(at, to, Pending::Reset { stream });
        Ok(())
    }

    /// Closes the session. Data still in flight is dropped and both ends are
    /// notified at the current time.
    pub fn close_session(&mut self, session: SessionId) -> Result<(), TransportError> {
        let now = self.clock.now_ms();
        let s = self
            .sessions
            .get_mut(session.0 as usize)
            .ok_or(TransportError::UnknownSession(session.0))?;
        if s.closed {
            return Ok(());
        }
        s.closed = true;
        let (a, b) = (s.a, s.b);
        self.schedule(now, a, Pending::Closed { session });
        self.schedule(now, b, Pending::Closed { session });
        Ok(())
    }

    pub fn set_timer(&mut self, endpoint: EndpointId, at_ms: u64, token: u64) -> Result<(), TransportError> {
        self.check_endpoint(endpoint)?;
        let at = at_ms.max(self.clock.now_ms());
        self.schedule(at, endpoint, Pending::Timer { token });
        Ok(())
    }

    /// Pops the next event, advancing the clock to it.
    pub fn next_event(&mut self) -> Result<Option<NetEvent>, TransportError> {
        loop {
            let Some(top) = self.queue.peek() else {
                return Ok(None);
            };
            if top.at > self.max_time_ms {
                return Err(TransportError::Timeout {
                    at_ms: top.at,
                    cap_ms: self.max_time_ms,
                });
            }
            let ev = self.queue.pop().expect("peeked");
            self.clock.advance_to(ev.at);
            let kind = match ev.what {
                Pending::Data { stream, bytes } => NetEventKind::Data { stream, bytes },
                Pending::Finished { stream } => NetEventKind::Finished { stream },
                Pending::Reset { stream } => NetEventKind::Reset { stream },
                Pending::Timer { token } => NetEventKind::Timer { token },
                Pending::Closed { session } => NetEventKind::Closed { session },
            };
            if let NetEventKind::Data { stream, .. }
            | NetEventKind::Finished { stream }
            | NetEventKind::Reset { stream } = &kind
            {
                let session = self.streams[stream.0 as usize].session;
                if self.sessions[session.0 as usize].closed {
                    continue;
                }
            }
            if self.tracing {
                let what = match &kind {
                    NetEventKind::Data { stream, bytes } => {
                        format!("data s{} {}B {:016x}", stream.0, bytes.len(), fnv1a(bytes))
                    }
                    NetEventKind::Finished { stream } => format!("fin s{}", stream.0),
                    NetEventKind::Reset { stream } => format!("reset s{}", stream.0),
                    NetEventKind::Timer { token } => format!("timer {token}"),
                    NetEventKind::Closed { session } => format!("closed c{}", session.0),
                };
                self.trace.push(TraceEntry {
                    at_ms: ev.at,
                    seq: ev.seq,
                    endpoint: ev.endpoint,
                    what,
                });
            }
            return Ok(Some(NetEvent {
                at_ms: ev.at,
                endpoint: ev.endpoint,
                kind,
            }));
        }
    }

    /// Drains the queue, buffering stream data for [`SimNetwork::receive`].
    /// Returns the final clock value.
    pub fn run_until_idle(&mut self) -> Result<u64, TransportError> {
        while let Some(ev) = self.next_event()? {
            self.buffer(ev);
        }
        Ok(self.clock.now_ms())
    }

    /// Stores an event's stream payload so it can be pulled with [`SimNetwork::receive`].
    pub fn buffer(&mut self, ev: NetEvent) {
        match ev.kind {
            NetEventKind::Data { stream, bytes } => {
                self.streams[stream.0 as usize].inbox.push_back(bytes)
            }
            NetEventKind::Finished { stream } => {
                self.streams[stream.0 as usize].remote_finished = true
            }
            NetEventKind::Reset { stream } => self.streams[stream.0 as usize].reset = true,
            NetEventKind::Timer { .. } | NetEventKind::Closed { .. } => {}
        }
    }

    /// Pulls the next buffered chunk of `stream`.
    pub fn receive(&mut self, stream: StreamId) -> Result<Received, TransportError> {
        let session = self.stream(stream)?.session;
        if self.sessions[session.0 as usize].closed {
            return Err(TransportError::Disconnected);
        }
        let slot = &mut self.streams[stream.0 as usize];
        if slot.reset {
            return Err(TransportError::StreamReset(stream.0));
        }
        Ok(match slot.inbox.pop_front() {
            Some(bytes) => Received::Data(bytes),
            None if slot.remote_finished => Received::Finished,
            None => Received::Pending,
        })
    }

    /// Streams with buffered data waiting at `endpoint`, in id order.
    pub fn streams_with_data(&self, endpoint: EndpointId) -> Vec<StreamId> {
        self.streams
            .iter()
            .enumerate()
            .filter(|(_, s)| s.to == endpoint && !s.inbox.is_empty())
            .map(|(i, _)| StreamId(i as u32))
            .collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(link: Link) -> (SimNetwork, EndpointId, EndpointId, SessionId) {
        let mut net = SimNetwork::new();
        let a = net.add_endpoint("a");
        let b = net.add_endpoint("b");
        let s = net.connect(a, b, link).unwrap();
        (net, a, b, s)
    }

    fn arrivals(net: &mut SimNetwork) -> Vec<(u64, Vec<u8>)> {
        let mut out = Vec::new();
        while let Some(ev) = net.next_event().unwrap() {
            if let NetEventKind::Data { bytes, .. } = ev.kind {
                out.push((ev.at_ms, bytes));
            }
        }
        out
    }

    #[test]
    fn empty_network_returns_start_time() {
        let mut net = SimNetwork::new();
        assert_eq!(net.run_until_idle().unwrap(), 0);
    }

    #[test]
    fn zero_delay_delivers_at_send_time() {
        let (mut net, a, _b, s) = pair(Link::fixed(0));
        net.set_timer(a, 5, 0).unwrap();
        let ev = net.next_event().unwrap().unwrap();
        assert_eq!(ev.at_ms, 5);
        let st = net.open_stream(s, a).unwrap();
        net.send(st, &[1]).unwrap();
        assert_eq!(arrivals(&mut net), vec![(5, vec![1])]);
    }

    #[test]
    fn fixed_delay() {
        let (mut net, a, _b, s) = pair(Link::fixed(10));
        let st = net.open_stream(s, a).unwrap();
        net.send(st, &[1]).unwrap();
        assert_eq!(net.run_until_idle().unwrap(), 10);
    }

    #[test]
    fn jitter_is_bounded_and_replayable() {
        let run = |seed| {
            let (mut net, a, _b, s) = pair(Link {
                one_way_delay_ms: 10,
                jitter_ms: 2,
                seed,
            });
            let mut times = Vec::new();
            for _ in 0..50 {
                let st = net.open_stream(s, a).unwrap();
                net.send(st, &[0]).unwrap();
            }
            while let Some(ev) = net.next_event().unwrap() {
                times.push(ev.at_ms);
            }
            times
        };
        let first = run(7);
        assert!(first.iter().all(|t| (8..=12).contains(t)), "{first:?}");
        assert!(first.iter().any(|&t| t != 10));
        assert_eq!(first, run(7));
    }

    #[test]
    fn per_stream_order_survives_jitter() {
        let (mut net, a, b, s) = pair(Link {
            one_way_delay_ms: 5,
            jitter_ms: 5,
            seed: 3,
        });
        let st = net.open_stream(s, a).unwrap();
        for i in 0..100u8 {
            net.send(st, &[i]).unwrap();
        }
        net.finish(st).unwrap();
        net.run_until_idle().unwrap();
        let mut got = Vec::new();
        while let Received::Data(bytes) = net.receive(st).unwrap() {
            got.extend(bytes);
        }
        assert_eq!(got, (0..100).collect::<Vec<u8>>());
        assert_eq!(net.receive(st).unwrap(), Received::Finished);
        assert_eq!(net.streams_with_data(b), vec![]);
    }

    #[test]
    fn chunks_arrive_in_order() {
        let (mut net, a, _b, s) = pair(Link::fixed(1));
        let st = net.open_stream(s, a).unwrap();
        net.send(st, &[1, 2, 3]).unwrap();
        net.send(st, &[4]).unwrap();
        net.run_until_idle().unwrap();
        assert_eq!(net.receive(st).unwrap(), Received::Data(vec![1, 2, 3]));
        assert_eq!(net.receive(st).unwrap(), Received::Data(vec![4]));
        assert_eq!(net.receive(st).unwrap(), Received::Pending);
    }

    #[test]
    fn close_disconnects() {
        let (mut net, a, b, s) = pair(Link::fixed(10));
        let st = net.open_stream(s, a).unwrap();
        net.send(st, &[1]).unwrap();
        net.close_session(s).unwrap();
        let mut closed = Vec::new();
        while let Some(ev) = net.next_event().unwrap() {
            match ev.kind {
                NetEventKind::Closed { .. } => closed.push(ev.endpoint),
                other => panic!("in-flight data should be dropped, got {other:?}"),
            }
        }
        assert_eq!(closed, vec![a, b]);
        assert_eq!(net.receive(st), Err(TransportError::Disconnected));
        assert_eq!(net.send(st, &[2]), Err(TransportError::Disconnected));
        assert_eq!(net.open_stream(s, b), Err(TransportError::Disconnected));
    }

    #[test]
    fn unknown_endpoint_rejected() {
        let mut net = SimNetwork::new();
        let a = net.add_endpoint("a");
        assert_eq!(
            net.connect(a, EndpointId(9), Link::fixed(0)),
            Err(TransportError::UnknownEndpoint(9))
        );
    }

    #[test]
    fn time_cap_enforced() {
        let mut net = SimNetwork::new().with_max_time(100);
        let a = net.add_endpoint("a");
        net.set_timer(a, 50, 1).unwrap();
        net.set_timer(a, 150, 2).unwrap();
        assert_eq!(
            net.run_until_idle(),
            Err(TransportError::Timeout {
                at_ms: 150,
                cap_ms: 100
            })
        );
        assert_eq!(net.now_ms(), 50);
    }

    #[test]
    fn same_time_events_keep_schedule_order() {
        let mut net = SimNetwork::new();
        let a = net.add_endpoint("a");
        for token in 0..5 {
            net.set_timer(a, 10, token).unwrap();
        }
        let mut tokens = Vec::new();
        while let Some(NetEvent {
            kind: NetEventKind::Timer { token },
            ..
        }) = net.next_event().unwrap()
        {
            tokens.push(token);
        }
        assert_eq!(tokens, [0, 1, 2, 3, 4]);
    }
}
