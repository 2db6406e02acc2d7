//! Fixed workloads shared by the benchmarks.

use moqgate_core::harness::Scenario;
use moqgate_core::wire::{Approve, CategorySet, CategoryType, ControlMessage, Parameter, Subscribe};
use moqgate_core::{PatternSegment, SourceConfig};

pub fn control_messages() -> Vec<ControlMessage> {
    let both = CategorySet::new(vec![CategoryType::STROBE, CategoryType::SMOKING]).expect("distinct");
    vec![
        ControlMessage::Subscribe(Subscribe {
            subscribe_id: 1,
            track_name: "camera".into(),
            priority: 0,
            parameters: vec![Parameter::Filter(both.clone())],
        }),
        ControlMessage::Subscribe(Subscribe {
            subscribe_id: 2,
            track_name: "camera".into(),
            priority: 128,
            parameters: vec![Parameter::Analyze(both.clone())],
        }),
        ControlMessage::SubscribeOk { subscribe_id: 2 },
        ControlMessage::Approve(Approve {
            subscribe_id: 2,
            group_id: 70_000,
            categories: both,
        }),
    ]
}

/// One second of 640x480 video at 30 fps holding a 15 Hz strobe.
pub fn strobe_source() -> SourceConfig {
    SourceConfig {
        width: 640,
        height: 480,
        fps: 30,
        gop_duration_ms: 1000,
        segments: vec![PatternSegment::strobe(16, 240, 15.0, 1000)],
    }
}

/// Ten one-second groups delivered to one analyzer, one filterer and one
/// plain viewer over zero-delay links.
pub fn small_scenario() -> Scenario {
    Scenario::from_json(
        r#"{
        "name": "bench", "seed": 1,
        "source": {"width": 32, "height": 32, "fps": 30, "gop_duration_ms": 1000,
                   "segments": [{"kind": "constant", "level": 120, "duration_ms": 4000},
                                {"kind": "strobe", "low": 16, "high": 240, "flash_hz": 15.0, "duration_ms": 2000},
                                {"kind": "constant", "level": 120, "duration_ms": 4000}]},
        "clients": [{"name": "analyzer", "analyze": ["STROBE"]},
                    {"name": "filterer", "filter": ["STROBE"]},
                    {"name": "viewer"}]
    }"#,
    )
    .expect("valid bench scenario")
}
