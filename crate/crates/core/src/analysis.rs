//! Per-group content analysis.
//!
//! Each category is handled by a [`Detector`] obtained from a
//! [`DetectorRegistry`]. Detectors see frames one at a time as they arrive
//! and give a risk verdict when the group closes, so analysis overlaps
//! reception. STROBE ships a luma-difference flash detector; other
//! categories default to a constant-verdict stub.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::{Group, LuminanceFrame};
use crate::wire::{CategorySet, CategoryType};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("sampling grid {grid_dim} exceeds frame size {width}x{height}")]
    GridTooLarge {
        grid_dim: u32,
        width: u32,
        height: u32,
    },
    #[error("sample vectors differ in length ({prev} vs {cur})")]
    SampleLength { prev: usize, cur: usize },
    #[error("group has no frames")]
    EmptyGroup,
    #[error("invalid strobe config: {0}")]
    InvalidConfig(String),
    #[error("no analysis categories requested")]
    NoCategories,
    #[error("no detector registered for category {0}")]
    Unregistered(CategoryType),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrobeConfig {
    /// Samples per axis; `grid_dim^2` sample points per frame.
    pub grid_dim: u32,
    /// A sample counts as brighter when it rose by strictly more than this.
    pub pixel_delta_threshold: u8,
    /// A frame is a change event when strictly more than this fraction of samples got brighter.
    pub changed_fraction_threshold: f64,
    /// Two change events at most this far apart mark a strobe (100 ms = 10 Hz).
    pub max_interchange_gap_ms: u64,
}

impl Default for StrobeConfig {
    fn default() -> Self {
        StrobeConfig {
            grid_dim: 16,
            pixel_delta_threshold: 20,
            changed_fraction_threshold: 0.25,
            max_interchange_gap_ms: 100,
        }
    }
}

impl StrobeConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.grid_dim == 0 {
            return Err(AnalysisError::InvalidConfig("grid_dim must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.changed_fraction_threshold) {
            return Err(AnalysisError::InvalidConfig(format!(
                "changed_fraction_threshold {} outside [0, 1]",
                self.changed_fraction_threshold
            )));
        }
        Ok(())
    }
}

/// Samples `grid_dim^2` luma values on a cell-centred grid, row-major.
pub fn sample_luma(frame: &LuminanceFrame, grid_dim: u32) -> Result<Vec<u8>, AnalysisError> {
    if grid_dim == 0 || grid_dim > frame.width || grid_dim > frame.height {
        return Err(AnalysisError::GridTooLarge {
            grid_dim,
            width: frame.width,
            height: frame.height,
        });
    }
    let g = u64::from(grid_dim);
    let coord = |i: u64, extent: u32| ((2 * i + 1) * u64::from(extent) / (2 * g)) as u32;
    let mut samples = Vec::with_capacity((g * g) as usize);
    for j in 0..g {
        let y = coord(j, frame.height);
        for i in 0..g {
            samples.push(frame.pixel(coord(i, frame.width), y));
        }
    }
    Ok(samples)
}

/// True when strictly more than `changed_fraction_threshold` of the samples
/// rose by strictly more than `pixel_delta_threshold`. Decreases never count.
pub fn is_significant_increase(
    prev: &[u8],
    cur: &[u8],
    cfg: &StrobeConfig,
) -> Result<bool, AnalysisError> {
    if prev.len() != cur.len() {
        return Err(AnalysisError::SampleLength {
            prev: prev.len(),
            cur: cur.len(),
        });
    }
    if cur.is_empty() {
        return Ok(false);
    }
    let threshold = i16::from(cfg.pixel_delta_threshold);
    let brighter = prev
        .iter()
        .zip(cur)
        .filter(|(&p, &c)| i16::from(c) - i16::from(p) > threshold)
        .count();
    Ok(brighter as f64 / cur.len() as f64 > cfg.changed_fraction_threshold)
}

/// State carried between consecutive groups of one track.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DetectorState {
    pub prev_samples: Option<Vec<u8>>,
    pub last_change_ts: Option<u64>,
}

impl DetectorState {
    /// Feeds one frame; returns whether it closed a strobe interval.
    fn step(&mut self, frame: &LuminanceFrame, cfg: &StrobeConfig) -> Result<bool, AnalysisError> {
        let samples = sample_luma(frame, cfg.grid_dim)?;
        let mut risk = false;
        if let Some(prev) = &self.prev_samples {
            if is_significant_increase(prev, &samples, cfg)? {
                let t = frame.capture_ts;
                if let Some(last) = self.last_change_ts {
                    if t.saturating_sub(last) <= cfg.max_interchange_gap_ms {
                        risk = true;
                    }
                }
                self.last_change_ts = Some(t);
            }
        }
        self.prev_samples = Some(samples);
        Ok(risk)
    }
}

/// Runs the strobe rule over one group, threading `state` across the boundary.
pub fn analyze_group_strobe(
    group: &Group,
    state: DetectorState,
    cfg: &StrobeConfig,
) -> Result<(bool, DetectorState), AnalysisError> {
    if group.frames.is_empty() {
        return Err(AnalysisError::EmptyGroup);
    }
    let mut state = state;
    let mut risk = false;
    for frame in &group.frames {
        risk |= state.step(frame, cfg)?;
    }
    Ok((risk, state))
}

/// Incremental per-category analysis of one track.
pub trait Detector: Send {
    fn observe_frame(&mut self, frame: &LuminanceFrame) -> Result<(), AnalysisError>;

    /// Closes the current group. `Ok(true)` means the group carries risk.
    fn finish_group(&mut self) -> Result<bool, AnalysisError>;

    /// Forgets carried state (track change or seek).
    fn reset(&mut self);
}

#[derive(Debug, Clone)]
pub struct StrobeDetector {
    cfg: StrobeConfig,
    state: DetectorState,
    risk: bool,
    frames: usize,
    error: Option<AnalysisError>,
}

impl StrobeDetector {
    pub fn new(cfg: StrobeConfig) -> Self {
        StrobeDetector {
            cfg,
            state: DetectorState::default(),
            risk: false,
            frames: 0,
            error: None,
        }
    }

    pub fn state(&self) -> &DetectorState {
        &self.state
    }
}

impl Detector for StrobeDetector {
    fn observe_frame(&mut self, frame: &LuminanceFrame) -> Result<(), AnalysisError> {
        self.frames += 1;
        match self.state.step(frame, &self.cfg) {
            Ok(risk) => {
                self.risk |= risk;
                Ok(())
            }
            Err(e) => {
                self.error = Some(e.clone());
                Err(e)
            }
        }
    }

    fn finish_group(&mut self) -> Result<bool, AnalysisError> {
        let frames = std::mem::take(&mut self.frames);
        let risk = std::mem::take(&mut self.risk);
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if frames == 0 {
            return Err(AnalysisError::EmptyGroup);
        }
        Ok(risk)
    }

    fn reset(&mut self) {
        self.state = DetectorState::default();
        self.risk = false;
        self.frames = 0;
        self.error = None;
    }
}

/// Placeholder for categories without a real detector: always reports the
/// configured verdict.
#[derive(Debug, Clone, Copy)]
pub struct ConstantDetector {
    pub risk: bool,
}

impl Detector for ConstantDetector {
    fn observe_frame(&mut self, _frame: &LuminanceFrame) -> Result<(), AnalysisError> {
        Ok(())
    }

    fn finish_group(&mut self) -> Result<bool, AnalysisError> {
        Ok(self.risk)
    }

    fn reset(&mut self) {}
}

type DetectorFactory = Box<dyn Fn() -> Box<dyn Detector> + Send + Sync>;

/// Detector factories keyed by category code.
#[derive(Default)]
pub struct DetectorRegistry {
    factories: BTreeMap<CategoryType, DetectorFactory>,
}

impl fmt::Debug for DetectorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.factories.keys()).finish()
    }
}

impl DetectorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// STROBE with `strobe`; SMOKING and ALCOHOL as approving stubs.
    pub fn with_defaults(strobe: StrobeConfig) -> Self {
        let mut reg = Self::new();
        reg.register(CategoryType::STROBE, move || {
            Box::new(StrobeDetector::new(strobe.clone()))
        });
        reg.register_stub(CategoryType::SMOKING, false);
        reg.register_stub(CategoryType::ALCOHOL, false);
        reg
    }

    pub fn register<F>(&mut self, category: CategoryType, factory: F)
    where
        F: Fn() -> Box<dyn Detector> + Send + Sync + 'static,
    {
        self.factories.insert(category, Box::new(factory));
    }

    pub fn register_stub(&mut self, category: CategoryType, risk: bool) {
        self.register(category, move || Box::new(ConstantDetector { risk }));
    }

    pub fn contains(&self, category: CategoryType) -> bool {
        self.factories.contains_key(&category)
    }

    pub fn categories(&self) -> impl Iterator<Item = CategoryType> + '_ {
        self.factories.keys().copied()
    }

    fn build(&self, category: CategoryType) -> Option<Box<dyn Detector>> {
        self.factories.get(&category).map(|f| f())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub group_id: u64,
    pub approved: CategorySet,
    pub rejected: CategorySet,
}

/// Runs one detector per requested category over a track's groups.
pub struct GroupAnalyzer {
    detectors: Vec<(CategoryType, Box<dyn Detector>)>,
    failed: Vec<CategoryType>,
}

impl fmt::Debug for GroupAnalyzer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GroupAnalyzer")
            .field("categories", &self.categories())
            .finish()
    }
}

impl GroupAnalyzer {
    /// Fails when `categories` is empty or names a category with no detector.
    pub fn new(registry: &DetectorRegistry, categories: &CategorySet) -> Result<Self, AnalysisError> {
        if categories.is_empty() {
            return Err(AnalysisError::NoCategories);
        }
        let detectors = categories
            .iter()
            .map(|c| {
                registry
                    .build(c)
                    .map(|d| (c, d))
                    .ok_or(AnalysisError::Unregistered(c))
            })
            .collect::<Result<_, _>>()?;
        Ok(GroupAnalyzer {
            detectors,
            failed: Vec::new(),
        })
    }

    pub fn categories(&self) -> CategorySet {
        self.detectors.iter().map(|(c, _)| *c).collect()
    }

    pub fn observe_frame(&mut self, frame: &LuminanceFrame) {
        for (category, det) in &mut self.detectors {
            if let Err(e) = det.observe_frame(frame) {
                tracing::warn!(%category, error = %e, "detector failed; category will be rejected");
                if !self.failed.contains(category) {
                    self.failed.push(*category);
                }
            }
        }
    }

    /// Closes the group. A category is approved only when its detector
    /// finished without error and reported no risk.
    pub fn finish_group(&mut self, group_id: u64) -> Verdict {
        let failed = std::mem::take(&mut self.failed);
        let mut approved = Vec::new();
        let mut rejected = Vec::new();
        for (category, det) in &mut self.detectors {
            let ok = match det.finish_group() {
                Ok(risk) => !risk && !failed.contains(category),
                Err(e) => {
                    tracing::warn!(%category, group_id, error = %e, "detector failed; rejecting");
                    false
                }
            };
            if ok {
                approved.push(*category);
            } else {
                rejected.push(*category);
            }
        }
        Verdict {
            group_id,
            approved: CategorySet::collect_unique(approved),
            rejected: CategorySet::collect_unique(rejected),
        }
    }

    pub fn analyze(&mut self, group: &Group) -> Verdict {
        for frame in &group.frames {
            self.observe_frame(frame);
        }
        self.finish_group(group.group_id)
    }

    pub fn reset(&mut self) {
        self.failed.clear();
        for (_, det) in &mut self.detectors {
            det.reset();
        }
    }
}
