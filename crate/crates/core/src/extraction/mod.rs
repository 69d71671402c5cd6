//! Track extraction over a sliding window and output labelling.
//!
//! Extraction only reads the configuration; the filter state never depends
//! on which tracks were reported.

mod labels;
mod solver;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

pub use labels::{resolve_labels, LabelBook, SelectedTrack};
pub use solver::{solve, Solution};

use crate::error::Result;
use crate::filter::{MeasurementId, MultiTargetConfiguration};
use crate::io::BBox;

/// One reported box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxEstimate {
    pub bbox: BBox,
    pub confidence: f64,
}

/// Labelled trajectories, keyed by label and frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackSet {
    tracks: BTreeMap<u64, BTreeMap<u32, BoxEstimate>>,
}

impl TrackSet {
    /// Adds a box; returns `false` (and keeps the old box) if the label
    /// already has one in that frame.
    pub fn insert(&mut self, label: u64, frame: u32, estimate: BoxEstimate) -> bool {
        let track = self.tracks.entry(label).or_default();
        if track.contains_key(&frame) {
            return false;
        }
        track.insert(frame, estimate);
        true
    }

    /// `(frame, label, box)` sorted by frame then label.
    pub fn rows(&self) -> Vec<(u32, u64, &BoxEstimate)> {
        let mut rows: Vec<_> = self
            .tracks
            .iter()
            .flat_map(|(&l, t)| t.iter().map(move |(&f, e)| (f, l, e)))
            .collect();
        rows.sort_by_key(|&(f, l, _)| (f, l));
        rows
    }

    pub fn labels(&self) -> impl Iterator<Item = u64> + '_ {
        self.tracks.keys().copied()
    }

    pub fn track(&self, label: u64) -> Option<&BTreeMap<u32, BoxEstimate>> {
        self.tracks.get(&label)
    }

    pub fn num_tracks(&self) -> usize {
        self.tracks.len()
    }

    /// Number of boxes.
    pub fn len(&self) -> usize {
        self.tracks.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All boxes of one frame, by label.
    pub fn frame(&self, frame: u32) -> Vec<(u64, BoxEstimate)> {
        self.tracks
            .iter()
            .filter_map(|(&l, t)| t.get(&frame).map(|e| (l, *e)))
            .collect()
    }

    /// Smallest and largest frame holding a box.
    pub fn frame_range(&self) -> Option<(u32, u32)> {
        let lo = self.tracks.values().filter_map(|t| t.keys().next()).min()?;
        let hi = self
            .tracks
            .values()
            .filter_map(|t| t.keys().next_back())
            .max()?;
        Some((*lo, *hi))
    }

    /// Same labels and frames, with box fields equal within `tol`.
    pub fn approx_eq(&self, other: &TrackSet, tol: f64) -> bool {
        let (a, b) = (self.rows(), other.rows());
        a.len() == b.len()
            && a.iter().zip(&b).all(|((fa, la, ea), (fb, lb, eb))| {
                let close = |x: f64, y: f64| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs()));
                fa == fb
                    && la == lb
                    && close(ea.bbox.cx, eb.bbox.cx)
                    && close(ea.bbox.cy, eb.bbox.cy)
                    && close(ea.bbox.w, eb.bbox.w)
                    && close(ea.bbox.h, eb.bbox.h)
                    && close(ea.confidence, eb.confidence)
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateKind {
    /// Index into the configuration's hypotheses.
    Live(usize),
    /// Index into the graveyard.
    Dead(usize),
    Clutter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub kind: CandidateKind,
    pub log_weight: f64,
    /// Window measurements explained by the candidate, ascending.
    pub covers: Vec<MeasurementId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractionProblem {
    pub candidates: Vec<Candidate>,
    /// Every detection in the window, ascending.
    pub window_measurements: Vec<MeasurementId>,
    /// Candidates dropped because their weight was not positive.
    pub dropped: usize,
}

/// Weight given to a clutter candidate whose posterior is zero, so every
/// measurement stays coverable.
const CLUTTER_FLOOR: f64 = 1e-300;

/// Candidates of the window ending at the configuration's frame.
pub fn build_problem(config: &MultiTargetConfiguration, window: u32) -> ExtractionProblem {
    let start = (config.frame + 1).saturating_sub(window.max(1)).max(1);
    let mut problem = ExtractionProblem::default();
    let mut measurements: BTreeSet<MeasurementId> = BTreeSet::new();
    let mut push =
        |problem: &mut ExtractionProblem, kind, weight: f64, covers: Vec<MeasurementId>| {
            if covers.is_empty() {
                return;
            }
            measurements.extend(covers.iter().copied());
            if !(weight > 0.0) {
                problem.dropped += 1;
                return;
            }
            problem.candidates.push(Candidate {
                kind,
                log_weight: weight.ln(),
                covers,
            });
        };
    for (i, h) in config.hypotheses.iter().enumerate() {
        push(
            &mut problem,
            CandidateKind::Live(i),
            h.weight,
            h.path.detections_since(start),
        );
    }
    for (i, g) in config.graveyard.iter().enumerate() {
        let h = &g.hypothesis;
        push(
            &mut problem,
            CandidateKind::Dead(i),
            h.weight,
            h.path.detections_since(start),
        );
    }
    let mut clutter: BTreeMap<MeasurementId, f64> = BTreeMap::new();
    for r in config
        .clutter_records
        .iter()
        .filter(|r| r.measurement.frame >= start)
    {
        clutter.insert(r.measurement, r.weight);
    }
    measurements.extend(clutter.keys().copied());
    for &m in &measurements {
        let w = clutter.get(&m).copied().unwrap_or(0.0).max(CLUTTER_FLOOR);
        problem.candidates.push(Candidate {
            kind: CandidateKind::Clutter,
            log_weight: w.ln(),
            covers: vec![m],
        });
    }
    problem.window_measurements = measurements.into_iter().collect();
    problem
}

/// Reported state of one frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameEstimates {
    pub frame: u32,
    /// `(label, box)` ascending by label.
    pub boxes: Vec<(u64, BoxEstimate)>,
    pub objective: f64,
    pub timed_out: bool,
    pub candidates: usize,
}

/// Runs extraction frame by frame while keeping labels stable.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub window: u32,
    pub timeout: Duration,
    book: LabelBook,
}

impl Extractor {
    pub fn new(window: u32, timeout: Duration) -> Self {
        Self {
            window,
            timeout,
            book: LabelBook::default(),
        }
    }

    pub fn labels(&self) -> &LabelBook {
        &self.book
    }

    pub fn extract(&mut self, config: &MultiTargetConfiguration) -> Result<FrameEstimates> {
        let problem = build_problem(config, self.window);
        let solution = solve(&problem, self.timeout)?;
        let start = (config.frame + 1).saturating_sub(self.window.max(1)).max(1);
        let selected: Vec<SelectedTrack> = solution
            .selected
            .iter()
            .filter_map(|&c| match problem.candidates[c].kind {
                CandidateKind::Live(i) => {
                    let h = &config.hypotheses[i];
                    Some(SelectedTrack {
                        candidate: c,
                        weight: h.weight,
                        origin: h.origin,
                        detections: h.path.detections_since(start),
                    })
                }
                _ => None,
            })
            .collect();
        self.book.forget_before(start);
        let labels = resolve_labels(&selected, &mut self.book);
        let mut boxes: Vec<(u64, BoxEstimate)> = selected
            .iter()
            .zip(labels)
            .filter_map(|(s, label)| {
                let CandidateKind::Live(i) = problem.candidates[s.candidate].kind else {
                    return None;
                };
                let h = &config.hypotheses[i];
                let m = &h.state.mean;
                let bbox = BBox::new(m[0], m[1], m[4], m[5]);
                (bbox.w > 0.0 && bbox.h > 0.0 && bbox.cx.is_finite() && bbox.cy.is_finite())
                    .then_some((
                        label,
                        BoxEstimate {
                            bbox,
                            confidence: h.weight,
                        },
                    ))
            })
            .collect();
        boxes.sort_by_key(|&(l, _)| l);
        Ok(FrameEstimates {
            frame: config.frame,
            boxes,
            objective: solution.objective,
            timed_out: solution.timed_out,
            candidates: problem.candidates.len(),
        })
    }
}
