//! The relay state machine driven over the TCP backend: one thread plays the
//! relay, the test thread plays a filtering subscriber.

use std::collections::HashMap;
use std::net::TcpListener;
use std::thread;

use moqgate_core::relay::{Relay, RelayAction, RelayConfig};
use moqgate_core::transport::framing::{
    control_stream_preamble, encode_group_header, GroupHeader, StreamItem, StreamKind, StreamParser,
};
use moqgate_core::transport::sim::SessionId;
use moqgate_core::transport::socket::{SocketConnection, SocketEvent};
use moqgate_core::wire::{encode_message, Approve, CategorySet, CategoryType, ControlMessage, Parameter, Subscribe};

fn strobe() -> CategorySet {
    CategorySet::new(vec![CategoryType::STROBE]).unwrap()
}

#[test]
fn subscribe_and_approval_over_tcp() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();

    let relay_thread = thread::spawn(move || {
        let mut conn = SocketConnection::accept(&listener).unwrap();
        let mut relay = Relay::new(RelayConfig::default());
        // Two groups exist before anyone subscribes; group 1 is the live edge.
        relay.ingest_group(0, "cam", 0).unwrap();
        relay.ingest_group(0, "cam", 1).unwrap();
        let reply = conn.open_stream();
        conn.send(reply, &control_stream_preamble()).unwrap();
        let mut parsers: HashMap<_, StreamParser> = HashMap::new();
        let mut handled = 0;
        while handled < 2 {
            let SocketEvent::Data { stream, bytes } = conn.recv().unwrap() else {
                continue;
            };
            let parser = parsers.entry(stream).or_default();
            parser.push(&bytes);
            while let Some(item) = parser.next_item().unwrap() {
                let StreamItem::Control(msg) = item else { panic!("control stream only") };
                let session = SessionId(if matches!(msg, ControlMessage::Approve(_)) { 2 } else { 1 });
                handled += 1;
                if session.0 == 2 {
                    // The analyzer is simulated in-process; it subscribed before the approval.
                    let sub = ControlMessage::Subscribe(Subscribe {
                        subscribe_id: 9,
                        track_name: "cam".into(),
                        priority: 0,
                        parameters: vec![Parameter::Analyze(strobe())],
                    });
                    relay.handle_control(1, session, &sub).unwrap();
                }
                for action in relay.handle_control(1, session, &msg).unwrap() {
                    match action {
                        RelayAction::Control { session: SessionId(1), msg } => {
                            conn.send(reply, &encode_message(&msg).unwrap()).unwrap();
                        }
                        RelayAction::Deliver { session: SessionId(1), group_id, .. } => {
                            let g = conn.open_stream();
                            let header = encode_group_header(GroupHeader { group_id, frame_count: 0 }).unwrap();
                            conn.send(g, &header).unwrap();
                            conn.finish(g).unwrap();
                        }
                        _ => {}
                    }
                }
            }
        }
        conn.finish(reply).unwrap();
        relay.session(SessionId(1)).unwrap().delivered.clone()
    });

    let mut client = SocketConnection::connect(addr).unwrap();
    let ctrl = client.open_stream();
    let mut out = control_stream_preamble();
    let subscribe = ControlMessage::Subscribe(Subscribe {
        subscribe_id: 1,
        track_name: "cam".into(),
        priority: 0,
        parameters: vec![Parameter::Filter(strobe())],
    });
    out.extend(encode_message(&subscribe).unwrap());
    client.send(ctrl, &out).unwrap();
    // Sent on the filterer's connection for brevity; the relay thread
    // attributes APPROVE to the analyzer session.
    let approve = ControlMessage::Approve(Approve {
        subscribe_id: 9,
        group_id: 1,
        categories: strobe(),
    });
    client.send(ctrl, &encode_message(&approve).unwrap()).unwrap();

    let mut parsers: HashMap<_, StreamParser> = HashMap::new();
    let mut seen = Vec::new();
    let mut groups = Vec::new();
    loop {
        match client.recv().unwrap() {
            SocketEvent::Data { stream, bytes } => {
                let parser = parsers.entry(stream).or_default();
                parser.push(&bytes);
                while let Some(item) = parser.next_item().unwrap() {
                    match item {
                        StreamItem::Control(msg) => seen.push(msg),
                        StreamItem::GroupHeader(h) => groups.push(h.group_id),
                        StreamItem::Object(_) => panic!("no objects were sent"),
                    }
                }
            }
            SocketEvent::Finished { stream } => {
                if parsers.get(&stream).and_then(StreamParser::kind) == Some(StreamKind::Control) {
                    break;
                }
            }
            SocketEvent::Reset { .. } => panic!("reset"),
        }
    }
    let delivered = relay_thread.join().unwrap();
    assert_eq!(delivered, vec![1]);
    assert_eq!(groups, vec![1]);
    assert_eq!(
        seen,
        vec![
            ControlMessage::SubscribeOk { subscribe_id: 1 },
            ControlMessage::Approve(Approve {
                subscribe_id: 1,
                group_id: 1,
                categories: strobe(),
            }),
        ]
    );
}
