use moqgate_core::media::{
    decode_frame_payload, encode_frame_payload, generate_groups, strobe_half_period_frames, LuminanceFrame, MediaError,
    PatternSegment, SourceConfig,
};
use proptest::collection::vec;
use proptest::prelude::*;

fn frame() -> impl Strategy<Value = LuminanceFrame> {
    (1u32..24, 1u32..24, any::<u32>(), 0u64..(1 << 40)).prop_flat_map(|(w, h, idx, ts)| {
        vec(any::<u8>(), (w * h) as usize)
            .prop_map(move |pixels| LuminanceFrame::new(w, h, idx, ts, pixels).unwrap())
    })
}

fn segment(fps: u32) -> impl Strategy<Value = PatternSegment> {
    let duration = (1u64..=10).prop_map(|k| k * 200);
    prop_oneof![
        (any::<u8>(), duration.clone()).prop_map(|(l, d)| PatternSegment::constant(l, d)),
        (any::<u8>(), any::<u8>(), duration.clone()).prop_map(|(a, b, d)| PatternSegment::ramp(a, b, d)),
        // flash rate as a tenth-step fraction of the Nyquist limit fps/2
        (0u8..250, 1u8..=5, 1u32..=10, duration).prop_map(move |(low, gap, tenths, d)| {
            let hz = f64::from(fps) / 2.0 * f64::from(tenths) / 10.0;
            PatternSegment::strobe(low, low.saturating_add(gap * 5).max(low + 1), hz, d)
        }),
    ]
}

proptest! {
    #[test]
    fn frame_payload_round_trip(f in frame()) {
        let bytes = encode_frame_payload(&f).unwrap();
        prop_assert_eq!(decode_frame_payload(&bytes).unwrap(), f);
    }

    #[test]
    fn truncated_payload_is_incomplete(f in frame(), cut in 0usize..1000) {
        let bytes = encode_frame_payload(&f).unwrap();
        let cut = cut % bytes.len();
        let is_incomplete = matches!(decode_frame_payload(&bytes[..cut]), Err(MediaError::Incomplete { .. }));
        prop_assert!(is_incomplete);
    }

    #[test]
    fn groups_cover_the_schedule(
        (fps, segments) in prop::sample::select(vec![10u32, 30, 60]).prop_flat_map(|fps| (Just(fps), vec(segment(fps), 1..5)))
    ) {
        let cfg = SourceConfig { width: 8, height: 8, fps, gop_duration_ms: 1000, segments };
        let groups = generate_groups(&cfg).unwrap();
        prop_assert_eq!(groups.len() as u64, cfg.group_count());
        let frames: Vec<&LuminanceFrame> = groups.iter().flat_map(|g| &g.frames).collect();
        prop_assert_eq!(frames.len() as u64, cfg.total_frames());
        for (k, f) in frames.iter().enumerate() {
            prop_assert_eq!(f.capture_ts, k as u64 * 1000 / u64::from(fps));
        }
        for (i, g) in groups.iter().enumerate() {
            prop_assert_eq!(g.group_id, i as u64);
            let indices: Vec<u32> = g.frames.iter().map(|f| f.frame_index).collect();
            prop_assert_eq!(indices, (0..g.frames.len() as u32).collect::<Vec<_>>());
        }
    }

    #[test]
    fn strobe_half_period_is_nearest(fps in 1u32..=120, hz_tenths in 1u32..=600) {
        let hz = f64::from(hz_tenths) / 10.0;
        prop_assume!(hz <= f64::from(fps) / 2.0);
        let half = strobe_half_period_frames(fps, hz);
        let exact = f64::from(fps) / (2.0 * hz);
        prop_assert!(half >= 1);
        // Closest integer, the lower one on a tie.
        prop_assert!((half as f64 - exact).abs() <= 0.5 + 1e-9);
        if half > 1 {
            prop_assert!(((half - 1) as f64 - exact).abs() > 0.5 - 1e-9);
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = SourceConfig {
        width: 4,
        height: 4,
        fps: 30,
        gop_duration_ms: 1000,
        segments: vec![PatternSegment::strobe(16, 240, 12.0, 2000), PatternSegment::ramp(0, 255, 1000)],
    };
    assert_eq!(generate_groups(&cfg).unwrap(), generate_groups(&cfg).unwrap());
}
