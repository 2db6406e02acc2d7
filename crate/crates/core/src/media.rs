//! Frames, groups and the synthetic luminance source.
//!
//! A frame is a raw 8-bit luma plane. A group is one GOP; group ids from a
//! source start at 0 and increase by exactly one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{self, WireError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MediaError {
    #[error("invalid source config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("frame dimension {0} outside 1..=65535")]
    DimensionRange(u32),
    #[error("frame declares {expected} pixels but carries {actual}")]
    PixelCount { expected: usize, actual: usize },
    #[error("frame payload truncated: {needed} more byte(s) required")]
    Incomplete { needed: usize },
    #[error("frame header: {0}")]
    Header(#[from] WireError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LuminanceFrame {
    pub width: u32,
    pub height: u32,
    /// Ordinal within the group.
    pub frame_index: u32,
    /// Milliseconds since the stream epoch.
    pub capture_ts: u64,
    /// Row-major luma, `width * height` bytes.
    pub pixels: Vec<u8>,
}

impl LuminanceFrame {
    pub fn new(
        width: u32,
        height: u32,
        frame_index: u32,
        capture_ts: u64,
        pixels: Vec<u8>,
    ) -> Result<Self, MediaError> {
        let frame = LuminanceFrame {
            width,
            height,
            frame_index,
            capture_ts,
            pixels,
        };
        frame.validate()?;
        Ok(frame)
    }

    /// A frame with every pixel set to `level`.
    pub fn uniform(width: u32, height: u32, frame_index: u32, capture_ts: u64, level: u8) -> Self {
        LuminanceFrame {
            width,
            height,
            frame_index,
            capture_ts,
            pixels: vec![level; width as usize * height as usize],
        }
    }

    pub fn validate(&self) -> Result<(), MediaError> {
        for dim in [self.width, self.height] {
            if dim == 0 || dim > u32::from(u16::MAX) {
                return Err(MediaError::DimensionRange(dim));
            }
        }
        let expected = self.width as usize * self.height as usize;
        if self.pixels.len() != expected {
            return Err(MediaError::PixelCount {
                expected,
                actual: self.pixels.len(),
            });
        }
        Ok(())
    }

    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub group_id: u64,
    pub frames: Vec<LuminanceFrame>,
    pub duration_ms: u64,
}

/// Appends the object payload for `frame`:
/// width (u16 BE), height (u16 BE), frame_index (varint), capture_ts (varint), pixels.
pub fn write_frame_payload(buf: &mut Vec<u8>, frame: &LuminanceFrame) -> Result<(), MediaError> {
    frame.validate()?;
    buf.reserve(4 + 16 + frame.pixels.len());
    buf.extend_from_slice(&(frame.width as u16).to_be_bytes());
    buf.extend_from_slice(&(frame.height as u16).to_be_bytes());
    wire::write_varint(buf, u64::from(frame.frame_index))?;
    wire::write_varint(buf, frame.capture_ts)?;
    buf.extend_from_slice(&frame.pixels);
    Ok(())
}

pub fn encode_frame_payload(frame: &LuminanceFrame) -> Result<Vec<u8>, MediaError> {
    let mut buf = Vec::new();
    write_frame_payload(&mut buf, frame)?;
    Ok(buf)
}

/// Decodes a complete object payload. Trailing bytes beyond the declared
/// pixel count are rejected.
pub fn decode_frame_payload(bytes: &[u8]) -> Result<LuminanceFrame, MediaError> {
    if bytes.len() < 4 {
        return Err(MediaError::Incomplete {
            needed: 4 - bytes.len(),
        });
    }
    let width = u32::from(u16::from_be_bytes([bytes[0], bytes[1]]));
    let height = u32::from(u16::from_be_bytes([bytes[2], bytes[3]]));
    let mut pos = 4;
    let varint = |pos: &mut usize| -> Result<u64, MediaError> {
        let (v, n) = wire::decode_varint(&bytes[*pos..]).map_err(|e| match e {
            WireError::Incomplete { needed } => MediaError::Incomplete { needed },
            other => MediaError::Header(other),
        })?;
        *pos += n;
        Ok(v)
    };
    let frame_index = varint(&mut pos)?;
    let capture_ts = varint(&mut pos)?;
    let frame_index = u32::try_from(frame_index).map_err(|_| {
        MediaError::Header(WireError::VarIntRange(frame_index))
    })?;
    if width == 0 {
        return Err(MediaError::DimensionRange(width));
    }
    if height == 0 {
        return Err(MediaError::DimensionRange(height));
    }
    let expected = width as usize * height as usize;
    let pixels = &bytes[pos..];
    if pixels.len() < expected {
        return Err(MediaError::Incomplete {
            needed: expected - pixels.len(),
        });
    }
    if pixels.len() > expected {
        return Err(MediaError::PixelCount {
            expected,
            actual: pixels.len(),
        });
    }
    Ok(LuminanceFrame {
        width,
        height,
        frame_index,
        capture_ts,
        pixels: pixels.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Pattern {
    Constant { level: u8 },
    /// Full-frame flashes between `low` and `high`, starting on `low`.
    Strobe { low: u8, high: u8, flash_hz: f64 },
    /// Linear per-frame interpolation across the segment.
    Ramp { from: u8, to: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternSegment {
    #[serde(flatten)]
    pub pattern: Pattern,
    pub duration_ms: u64,
}

impl PatternSegment {
    pub fn constant(level: u8, duration_ms: u64) -> Self {
        PatternSegment {
            pattern: Pattern::Constant { level },
            duration_ms,
        }
    }

    pub fn strobe(low: u8, high: u8, flash_hz: f64, duration_ms: u64) -> Self {
        PatternSegment {
            pattern: Pattern::Strobe {
                low,
                high,
                flash_hz,
            },
            duration_ms,
        }
    }

    pub fn ramp(from: u8, to: u8, duration_ms: u64) -> Self {
        PatternSegment {
            pattern: Pattern::Ramp { from, to },
            duration_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub width: u32,
    pub height: u32,
    pub fps: u32,
    pub gop_duration_ms: u64,
    pub segments: Vec<PatternSegment>,
}

/// Frames per strobe half-period: `fps / (2 * flash_hz)` rounded to the
/// nearest integer, ties going to the shorter half-period, never below 1.
pub fn strobe_half_period_frames(fps: u32, flash_hz: f64) -> u64 {
    let exact = f64::from(fps) / (2.0 * flash_hz);
    ((exact - 0.5).ceil() as u64).max(1)
}

/// Where a strobe segment sits in the frame sequence, derived from the
/// pattern schedule alone.
#[derive(Debug, Clone, PartialEq)]
pub struct StrobeWindow {
    pub first_frame: u64,
    pub end_frame: u64,
    pub half_period_frames: u64,
    pub flash_hz: f64,
    /// Global frame indices where the luma steps from `low` to `high`.
    pub onset_frames: Vec<u64>,
}

impl SourceConfig {
    pub fn validate(&self) -> Result<(), MediaError> {
        let mut problems = Vec::new();
        if self.width == 0 || self.width > u32::from(u16::MAX) {
            problems.push(format!("width {} outside 1..=65535", self.width));
        }
        if self.height == 0 || self.height > u32::from(u16::MAX) {
            problems.push(format!("height {} outside 1..=65535", self.height));
        }
        if self.fps == 0 {
            problems.push("fps must be at least 1".to_owned());
        }
        if self.gop_duration_ms == 0 {
            problems.push("gop_duration_ms must be at least 1".to_owned());
        }
        if self.fps > 0 && !(u64::from(self.fps) * self.gop_duration_ms).is_multiple_of(1000) {
            problems.push(format!(
                "gop_duration_ms {} is not a whole number of frames at {} fps",
                self.gop_duration_ms, self.fps
            ));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if self.fps > 0 {
                let scaled = u64::from(self.fps) * seg.duration_ms;
                if scaled == 0 || scaled % 1000 != 0 {
                    problems.push(format!(
                        "segment {i}: duration {} ms is not a positive whole number of frames",
                        seg.duration_ms
                    ));
                }
            }
            match seg.pattern {
                Pattern::Strobe {
                    low,
                    high,
                    flash_hz,
                } => {
                    if high <= low {
                        problems.push(format!("segment {i}: strobe high {high} must exceed low {low}"));
                    }
                    if !(flash_hz > 0.0 && flash_hz <= f64::from(self.fps) / 2.0) {
                        problems.push(format!(
                            "segment {i}: flash_hz {flash_hz} must lie in (0, fps/2 = {}]",
                            f64::from(self.fps) / 2.0
                        ));
                    }
                }
                Pattern::Constant { .. } | Pattern::Ramp { .. } => {}
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MediaError::InvalidConfig(problems))
        }
    }

    pub fn frames_per_group(&self) -> u64 {
        u64::from(self.fps) * self.gop_duration_ms / 1000
    }

    pub fn total_frames(&self) -> u64 {
        self.segments
            .iter()
            .map(|s| u64::from(self.fps) * s.duration_ms / 1000)
            .sum()
    }

    pub fn total_duration_ms(&self) -> u64 {
        self.segments.iter().map(|s| s.duration_ms).sum()
    }

    pub fn group_count(&self) -> u64 {
        self.total_frames().div_ceil(self.frames_per_group().max(1))
    }

    /// Capture time of global frame `k`, in whole milliseconds.
    pub fn frame_ts(&self, k: u64) -> u64 {
        k * 1000 / u64::from(self.fps)
    }

    pub fn strobe_windows(&self) -> Vec<StrobeWindow> {
        let mut out = Vec::new();
        let mut start = 0u64;
        for seg in &self.segments {
            let n = u64::from(self.fps) * seg.duration_ms / 1000;
            if let Pattern::Strobe { flash_hz, .. } = seg.pattern {
                let half = strobe_half_period_frames(self.fps, flash_hz);
                let onset_frames = (0..)
                    .map(|m| start + half * (2 * m + 1))
                    .take_while(|&f| f < start + n)
                    .collect();
                out.push(StrobeWindow {
                    first_frame: start,
                    end_frame: start + n,
                    half_period_frames: half,
                    flash_hz,
                    onset_frames,
                });
            }
            start += n;
        }
        out
    }

    /// Luma level of every frame, in order.
    fn levels(&self) -> Vec<u8> {
        let mut levels = Vec::with_capacity(self.total_frames() as usize);
        for seg in &self.segments {
            let n = u64::from(self.fps) * seg.duration_ms / 1000;
            match seg.pattern {
                Pattern::Constant { level } => levels.extend((0..n).map(|_| level)),
                Pattern::Strobe {
                    low,
                    high,
                    flash_hz,
                } => {
                    let half = strobe_half_period_frames(self.fps, flash_hz);
                    levels.extend((0..n).map(|i| if (i / half).is_multiple_of(2) { low } else { high }));
                }
                Pattern::Ramp { from, to } => {
                    let (from, to) = (f64::from(from), f64::from(to));
                    levels.extend((0..n).map(|i| {
                        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                        (from + (to - from) * t).round() as u8
                    }));
                }
            }
        }
        levels
    }
}

/// Renders the whole source into groups. Deterministic in `config`.
pub fn generate_groups(config: &SourceConfig) -> Result<Vec<Group>, MediaError> {
    config.validate()?;
    let per_group = config.frames_per_group() as usize;
    let levels = config.levels();
    let groups = levels
        .chunks(per_group)
        .enumerate()
        .map(|(g, chunk)| {
            let base = (g * per_group) as u64;
            let frames = chunk
                .iter()
                .enumerate()
                .map(|(i, &level)| {
                    LuminanceFrame::uniform(
                        config.width,
                        config.height,
                        i as u32,
                        config.frame_ts(base + i as u64),
                        level,
                    )
                })
                .collect::<Vec<_>>();
            Group {
                group_id: g as u64,
                duration_ms: frames.len() as u64 * 1000 / u64::from(config.fps),
                frames,
            }
        })
        .collect();
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(fps: u32, segments: Vec<PatternSegment>) -> SourceConfig {
        SourceConfig {
            width: 4,
            height: 4,
            fps,
            gop_duration_ms: 1000,
            segments,
        }
    }

    #[test]
    fn constant_single_group() {
        let groups = generate_groups(&config(10, vec![PatternSegment::constant(128, 1000)])).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].frames.len(), 10);
        assert_eq!(groups[0].duration_ms, 1000);
        assert!(groups[0]
            .frames
            .iter()
            .all(|f| f.pixels.iter().all(|&p| p == 128)));
        let ts: Vec<u64> = groups[0].frames.iter().map(|f| f.capture_ts).collect();
        assert_eq!(ts, (0..10).map(|k| k * 100).collect::<Vec<_>>());
    }

    #[test]
    fn strobe_toggles_every_three_frames_at_5hz() {
        let groups =
            generate_groups(&config(30, vec![PatternSegment::strobe(16, 240, 5.0, 1000)])).unwrap();
        let levels: Vec<u8> = groups[0].frames.iter().map(|f| f.pixels[0]).collect();
        let expected: Vec<u8> = (0..30)
            .map(|i| if (i / 3) % 2 == 0 { 16 } else { 240 })
            .collect();
        assert_eq!(levels, expected);
    }

    #[test]
    fn half_period_rounding() {
        assert_eq!(strobe_half_period_frames(30, 5.0), 3);
        assert_eq!(strobe_half_period_frames(30, 15.0), 1);
        assert_eq!(strobe_half_period_frames(30, 12.0), 1);
        // 1.5 frames: the tie goes to the shorter half-period
        assert_eq!(strobe_half_period_frames(30, 10.0), 1);
        assert_eq!(strobe_half_period_frames(30, 9.0), 2);
        assert_eq!(strobe_half_period_frames(30, 2.0), 7);
    }

    #[test]
    fn consecutive_group_ids() {
        let groups = generate_groups(&config(
            10,
            vec![PatternSegment::constant(10, 1000), PatternSegment::constant(20, 1000)],
        ))
        .unwrap();
        assert_eq!(groups.iter().map(|g| g.group_id).collect::<Vec<_>>(), [0, 1]);
        assert_eq!(groups[1].frames[0].capture_ts, 1000);
        assert_eq!(groups[1].frames[0].frame_index, 0);
    }

    #[test]
    fn ramp_is_linear() {
        let groups = generate_groups(&config(10, vec![PatternSegment::ramp(0, 90, 1000)])).unwrap();
        let levels: Vec<u8> = groups[0].frames.iter().map(|f| f.pixels[0]).collect();
        assert_eq!(levels, [0, 10, 20, 30, 40, 50, 60, 70, 80, 90]);
    }

    #[test]
    fn invalid_config_lists_every_problem() {
        let mut cfg = config(30, vec![PatternSegment::strobe(200, 100, 20.0, 1000)]);
        cfg.gop_duration_ms = 1010;
        let Err(MediaError::InvalidConfig(problems)) = generate_groups(&cfg) else {
            panic!("expected validation failure");
        };
        assert_eq!(problems.len(), 3, "{problems:?}");
    }

    #[test]
    fn frame_payload_layout() {
        let frame = LuminanceFrame::new(2, 1, 0, 0, vec![7, 9]).unwrap();
        let bytes = encode_frame_payload(&frame).unwrap();
        assert_eq!(bytes, [0x00, 0x02, 0x00, 0x01, 0x00, 0x00, 0x07, 0x09]);
        assert_eq!(decode_frame_payload(&bytes).unwrap(), frame);
    }

    #[test]
    fn frame_payload_errors() {
        let bad = LuminanceFrame {
            width: 2,
            height: 2,
            frame_index: 0,
            capture_ts: 0,
            pixels: vec![1, 2, 3],
        };
        assert_eq!(
            encode_frame_payload(&bad),
            Err(MediaError::PixelCount {
                expected: 4,
                actual: 3
            })
        );
        let wide = LuminanceFrame::uniform(70_000, 1, 0, 0, 0);
        assert_eq!(encode_frame_payload(&wide), Err(MediaError::DimensionRange(70_000)));
        assert_eq!(decode_frame_payload(&[]), Err(MediaError::Incomplete { needed: 4 }));
        let mut four = vec![0x00, 0x04, 0x00, 0x04, 0x00, 0x00];
        four.extend(std::iter::repeat_n(1u8, 15));
        assert_eq!(decode_frame_payload(&four), Err(MediaError::Incomplete { needed: 1 }));
    }

    #[test]
    fn strobe_windows_follow_schedule() {
        let cfg = config(
            30,
            vec![
                PatternSegment::constant(128, 1000),
                PatternSegment::strobe(16, 240, 15.0, 1000),
            ],
        );
        let w = &cfg.strobe_windows()[0];
        assert_eq!((w.first_frame, w.end_frame, w.half_period_frames), (30, 60, 1));
        assert_eq!(w.onset_frames.first(), Some(&31));
        assert_eq!(w.onset_frames.len(), 15);
    }
}
