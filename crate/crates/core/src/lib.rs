//! Category-gated group delivery for a MoQ-style relay.
//!
//! Publishers push groups of luminance frames; analyzer subscribers inspect
//! them and send `APPROVE` messages per category; the relay holds each group
//! back from filtering subscribers until every category they asked for has
//! been approved.

pub mod analysis;
pub mod client;
pub mod harness;
pub mod media;
pub mod relay;
pub mod transport;
pub mod wire;

pub use analysis::{DetectorRegistry, GroupAnalyzer, StrobeConfig, Verdict};
pub use media::{Group, LuminanceFrame, Pattern, PatternSegment, SourceConfig};
pub use transport::{SimNetwork, TransportError};
pub use wire::{CategorySet, CategoryType, ControlMessage, Parameter, VarInt, WireError};
