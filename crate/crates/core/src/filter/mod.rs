//! The HISP recursion.
//!
//! A [`MultiTargetConfiguration`] holds one weighted Gaussian hypothesis per
//! observation path of a previously detected object, plus a single track for
//! the undetected population. Each frame runs [`predict`], then
//! [`build_association_table`], [`external_weights`] and [`update`].

mod table;
mod update;

use std::fmt;

use nalgebra::Cholesky;

pub use table::{
    build_association_table, default_gate_threshold, external_weights, gate, AssociationEntry,
    AssociationTable, HypothesisRow, Measurement, Pair, PosteriorWeights, RowPosterior, RowSpec,
    UndetectedRow, UndetectedSpec, DEFAULT_UNDERFLOW_FLOOR,
};
pub use update::{update, UpdateReport};

use crate::appearance::FeatureVector;
use crate::error::{HispError, Result};
use crate::lingauss::{kf_predict, GaussianState, MotionModel, StateMatrix};

/// Identifies one detection: 1-based frame and row index within that frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MeasurementId {
    pub frame: u32,
    pub index: u32,
}

impl MeasurementId {
    pub fn new(frame: u32, index: u32) -> Self {
        Self { frame, index }
    }
}

impl fmt::Display for MeasurementId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.frame, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Missed,
    Detected(u32),
}

/// Per-frame association history of a hypothesis, kept for the trailing window.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObservationPath {
    start: u32,
    slots: Vec<Slot>,
}

impl ObservationPath {
    /// Path of an object first detected by `id`.
    pub fn born(id: MeasurementId) -> Self {
        Self {
            start: id.frame,
            slots: vec![Slot::Detected(id.index)],
        }
    }

    pub fn from_slots(start: u32, slots: Vec<Slot>) -> Self {
        Self { start, slots }
    }

    pub fn start_frame(&self) -> u32 {
        self.start
    }

    /// Frame of the last slot.
    pub fn end_frame(&self) -> u32 {
        self.start + self.slots.len() as u32 - 1
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn extended(&self, slot: Slot) -> Self {
        let mut slots = Vec::with_capacity(self.slots.len() + 1);
        slots.extend_from_slice(&self.slots);
        slots.push(slot);
        Self {
            start: self.start,
            slots,
        }
    }

    /// Drops slots older than `first_frame`, always keeping the last slot.
    pub fn truncate_before(&mut self, first_frame: u32) {
        if first_frame <= self.start {
            return;
        }
        let drop = ((first_frame - self.start) as usize).min(self.slots.len().saturating_sub(1));
        self.slots.drain(..drop);
        self.start += drop as u32;
    }

    pub fn detections(&self) -> impl Iterator<Item = MeasurementId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(move |(i, s)| match s {
                Slot::Detected(index) => Some(MeasurementId::new(self.start + i as u32, *index)),
                Slot::Missed => None,
            })
    }

    /// Detections at or after `first_frame`, oldest first.
    pub fn detections_since(&self, first_frame: u32) -> Vec<MeasurementId> {
        self.detections()
            .filter(|m| m.frame >= first_frame)
            .collect()
    }

    pub fn last_detection(&self) -> Option<MeasurementId> {
        self.detections().last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HypothesisId(pub u64);

impl fmt::Display for HypothesisId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{}", self.0)
    }
}

/// Single-object law of a previously detected object.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub id: HypothesisId,
    /// First detection of the object; the basis of its output label.
    pub origin: MeasurementId,
    pub path: ObservationPath,
    pub state: GaussianState,
    /// Probability that the object exists.
    pub weight: f64,
    pub multiplicity: u32,
    pub feature: Option<FeatureVector>,
    pub birth_time: u32,
}

/// Sub-population of objects that have not been detected yet. Its density
/// is uniform over the frame and is never represented explicitly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UndetectedPopulation {
    pub weight: f64,
    pub multiplicity: f64,
}

impl Default for UndetectedPopulation {
    fn default() -> Self {
        Self {
            weight: 0.0,
            multiplicity: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BirthModel {
    /// Expected number of appearing objects per frame.
    pub mean_births_per_frame: f64,
    /// Birth probability attached to any one measurement: the mean births
    /// spread over the frame area.
    pub per_measurement_birth_prob: f64,
    pub birth_covariance: StateMatrix,
    /// Multiplier on the birth-to-miss ratio of the undetected track.
    pub birth_scale: f64,
}

impl BirthModel {
    pub fn uniform(
        mean_births_per_frame: f64,
        frame_area: f64,
        birth_covariance: StateMatrix,
    ) -> Self {
        Self {
            mean_births_per_frame,
            per_measurement_birth_prob: mean_births_per_frame / frame_area,
            birth_covariance,
            birth_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_births_per_frame > 0.0
            && self.per_measurement_birth_prob > 0.0
            && self.birth_scale > 0.0)
        {
            return Err(HispError::Config(
                "birth model scalars must be positive".into(),
            ));
        }
        if Cholesky::new(self.birth_covariance).is_none() {
            return Err(HispError::Config(
                "birth covariance is not positive definite".into(),
            ));
        }
        Ok(())
    }

    /// Ratio `w^{u,z} / w^{u,φ}` used for every measurement.
    pub fn birth_ratio(&self) -> f64 {
        self.per_measurement_birth_prob * self.birth_scale
    }
}

/// A hypothesis that left the scene, kept for track extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct GraveEntry {
    pub hypothesis: Hypothesis,
    pub death_time: u32,
}

/// Posterior probability that a measurement is clutter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutterRecord {
    pub measurement: MeasurementId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTargetConfiguration {
    pub hypotheses: Vec<Hypothesis>,
    pub undetected: UndetectedPopulation,
    pub graveyard: Vec<GraveEntry>,
    pub clutter_records: Vec<ClutterRecord>,
    pub frame: u32,
    /// Length of the extraction window in frames.
    pub window: u32,
    next_id: u64,
}

impl MultiTargetConfiguration {
    /// Empty configuration before the first frame.
    pub fn new(window: u32) -> Self {
        Self {
            hypotheses: Vec::new(),
            undetected: UndetectedPopulation::default(),
            graveyard: Vec::new(),
            clutter_records: Vec::new(),
            frame: 0,
            window: window.max(1),
            next_id: 0,
        }
    }

    pub(crate) fn allocate_id(&mut self) -> HypothesisId {
        let id = HypothesisId(self.next_id);
        self.next_id += 1;
        id
    }

    /// First frame of the extraction window ending at the current frame.
    pub fn window_start(&self) -> u32 {
        (self.frame + 1).saturating_sub(self.window).max(1)
    }

    pub fn total_weight(&self) -> f64 {
        self.hypotheses.iter().map(|h| h.weight).sum()
    }

    /// Inserts a hypothesis with a fresh id (used by tests and tools).
    pub fn push_hypothesis(&mut self, mut h: Hypothesis) -> HypothesisId {
        h.id = self.allocate_id();
        let id = h.id;
        self.hypotheses.push(h);
        id
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut ids: Vec<_> = self.hypotheses.iter().map(|h| h.id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(HispError::numerical("duplicate hypothesis id"));
        }
        for h in &self.hypotheses {
            if !(0.0..=1.0).contains(&h.weight) {
                return Err(HispError::numerical(format!(
                    "{} has weight {}",
                    h.id, h.weight
                )));
            }
        }
        let oldest = self.frame.saturating_sub(self.window);
        if self.graveyard.iter().any(|g| g.death_time < oldest)
            || self
                .clutter_records
                .iter()
                .any(|c| c.measurement.frame < oldest)
        {
            return Err(HispError::numerical("stale window records"));
        }
        Ok(())
    }
}

/// Moves the configuration from frame `t − 1` to frame `t`.
pub fn predict(
    config: &MultiTargetConfiguration,
    motion: &MotionModel,
    birth: &BirthModel,
) -> Result<MultiTargetConfiguration> {
    let frame = config.frame + 1;
    let survival = motion.survival_prob;
    let mut out = MultiTargetConfiguration {
        hypotheses: Vec::with_capacity(config.hypotheses.len()),
        undetected: config.undetected,
        graveyard: Vec::with_capacity(config.graveyard.len() + config.hypotheses.len()),
        clutter_records: Vec::new(),
        frame,
        window: config.window,
        next_id: config.next_id,
    };
    let oldest = frame.saturating_sub(config.window);
    out.graveyard.extend(
        config
            .graveyard
            .iter()
            .filter(|g| g.death_time >= oldest)
            .cloned(),
    );
    out.clutter_records.extend(
        config
            .clutter_records
            .iter()
            .filter(|c| c.measurement.frame + config.window > frame),
    );

    for h in &config.hypotheses {
        let state = kf_predict(&h.state, motion).map_err(|e| HispError::Numerical {
            context: format!("{}: {e}", h.id),
        })?;
        out.graveyard.push(GraveEntry {
            hypothesis: Hypothesis {
                weight: h.weight * (1.0 - survival),
                ..h.clone()
            },
            death_time: frame,
        });
        out.hypotheses.push(Hypothesis {
            state,
            weight: h.weight * survival,
            multiplicity: 1,
            ..h.clone()
        });
    }

    let n_u = config.undetected.multiplicity;
    let n_b = birth.mean_births_per_frame;
    if n_u + n_b > 0.0 {
        out.undetected = UndetectedPopulation {
            weight: (n_u * config.undetected.weight * survival
                + n_b * birth.per_measurement_birth_prob)
                / (n_u + n_b),
            multiplicity: n_u + n_b,
        };
    }
    Ok(out)
}
