use moqgate_core::wire::{
    decode_message, decode_varint, encode_message, encode_varint, Approve, CategorySet, CategoryType,
    ControlMessage, Parameter, Subscribe, SubscribeUpdate, WireError,
};
use proptest::collection::{btree_set, vec};
use proptest::prelude::*;

const MAX: u64 = (1 << 62) - 1;

fn varint() -> impl Strategy<Value = u64> {
    prop_oneof![0..64u64, 64..16384u64, 16384..(1u64 << 30), (1u64 << 30)..=MAX]
}

fn categories(min: usize) -> impl Strategy<Value = CategorySet> {
    btree_set(prop_oneof![1..=3u64, varint()], min..6)
        .prop_shuffle_set()
        .prop_map(|codes| CategorySet::new(codes.into_iter().map(CategoryType).collect()).unwrap())
}

// BTreeSet iteration is sorted; shuffle so encodings with any order are exercised.
trait ShuffleSet {
    fn prop_shuffle_set(self) -> BoxedStrategy<Vec<u64>>;
}

impl<S: Strategy<Value = std::collections::BTreeSet<u64>> + 'static> ShuffleSet for S {
    fn prop_shuffle_set(self) -> BoxedStrategy<Vec<u64>> {
        self.prop_map(|s| s.into_iter().collect::<Vec<_>>()).prop_shuffle().boxed()
    }
}

fn parameter() -> impl Strategy<Value = Parameter> {
    prop_oneof![
        categories(0).prop_map(Parameter::Analyze),
        categories(0).prop_map(Parameter::Filter),
        (varint().prop_filter("typed", |t| *t != 5 && *t != 6), vec(any::<u8>(), 0..32))
            .prop_map(|(param_type, payload)| Parameter::Unknown { param_type, payload }),
    ]
}

fn message() -> impl Strategy<Value = ControlMessage> {
    prop_oneof![
        (varint(), ".{0,20}", varint(), vec(parameter(), 0..4)).prop_map(|(id, name, prio, params)| {
            ControlMessage::Subscribe(Subscribe {
                subscribe_id: id,
                track_name: name,
                priority: prio,
                parameters: params,
            })
        }),
        (varint(), vec(parameter(), 0..4)).prop_map(|(id, params)| {
            ControlMessage::SubscribeUpdate(SubscribeUpdate {
                subscribe_id: id,
                parameters: params,
            })
        }),
        varint().prop_map(|subscribe_id| ControlMessage::SubscribeOk { subscribe_id }),
        (varint(), varint(), categories(1)).prop_map(|(s, g, c)| {
            ControlMessage::Approve(Approve {
                subscribe_id: s,
                group_id: g,
                categories: c,
            })
        }),
    ]
}

proptest! {
    #[test]
    fn varint_round_trip(v in varint()) {
        let bytes = encode_varint(v).unwrap();
        let expected_len = match v {
            0..=63 => 1,
            64..=16383 => 2,
            16384..=1_073_741_823 => 4,
            _ => 8,
        };
        prop_assert_eq!(bytes.len(), expected_len);
        prop_assert_eq!(decode_varint(&bytes).unwrap(), (v, expected_len));
    }

    #[test]
    fn varint_above_range_rejected(v in (MAX + 1)..=u64::MAX) {
        prop_assert_eq!(encode_varint(v), Err(WireError::VarIntRange(v)));
    }

    #[test]
    fn message_round_trip(msg in message()) {
        let bytes = encode_message(&msg).unwrap();
        let (back, n) = decode_message(&bytes).unwrap();
        prop_assert_eq!(back, msg);
        prop_assert_eq!(n, bytes.len());
    }

    #[test]
    fn concatenated_messages_decode_in_sequence(msgs in vec(message(), 1..5)) {
        let mut stream = Vec::new();
        for m in &msgs {
            stream.extend(encode_message(m).unwrap());
        }
        let mut pos = 0;
        for m in &msgs {
            let (back, n) = decode_message(&stream[pos..]).unwrap();
            prop_assert_eq!(&back, m);
            pos += n;
        }
        prop_assert_eq!(pos, stream.len());
    }

    #[test]
    fn every_strict_prefix_is_incomplete(msg in message()) {
        let bytes = encode_message(&msg).unwrap();
        for cut in 0..bytes.len() {
            prop_assert!(
                matches!(decode_message(&bytes[..cut]), Err(WireError::Incomplete { .. })),
                "prefix of {} bytes", cut
            );
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in vec(any::<u8>(), 0..64)) {
        let _ = decode_message(&bytes);
        let _ = decode_varint(&bytes);
    }

    #[test]
    fn flipped_length_byte_is_detected(msg in message(), delta in 1u8..3) {
        let mut bytes = encode_message(&msg).unwrap();
        // The Length follows a one- or two-byte Type; only single-byte Lengths are perturbed.
        let at = if bytes[0] & 0xc0 == 0 { 1 } else { 2 };
        prop_assume!(bytes[at] & 0xc0 == 0 && bytes[at] >= delta);
        bytes[at] -= delta;
        prop_assert!(decode_message(&bytes).is_err());
    }
}
