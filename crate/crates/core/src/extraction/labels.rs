use std::collections::{BTreeMap, HashMap};

use crate::filter::MeasurementId;

/// A live track chosen by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedTrack {
    /// Candidate index; lower wins label ties.
    pub candidate: usize,
    pub weight: f64,
    pub origin: MeasurementId,
    /// Window detections, oldest first.
    pub detections: Vec<MeasurementId>,
}

/// Label memory carried across frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelBook {
    by_measurement: HashMap<MeasurementId, u64>,
    by_origin: BTreeMap<MeasurementId, u64>,
    next: u64,
}

impl LabelBook {
    fn fresh(&mut self) -> u64 {
        self.next += 1;
        self.next
    }

    /// Label last attached to a measurement, if any.
    pub fn label_of(&self, m: MeasurementId) -> Option<u64> {
        self.by_measurement.get(&m).copied()
    }

    /// Drops measurement entries older than `frame`.
    pub fn forget_before(&mut self, frame: u32) {
        self.by_measurement.retain(|m, _| m.frame >= frame);
    }
}

/// Assigns one label per selected track, with no duplicates.
///
/// A track inherits the label of its most recent labelled detection, else
/// the label of its first detection. When several tracks claim one label the
/// heaviest keeps it (ties: lower candidate) and the others get fresh labels.
pub fn resolve_labels(selected: &[SelectedTrack], book: &mut LabelBook) -> Vec<u64> {
    let mut labels: Vec<u64> = selected
        .iter()
        .map(|t| {
            t.detections
                .iter()
                .rev()
                .find_map(|m| book.label_of(*m))
                .or_else(|| book.by_origin.get(&t.origin).copied())
                .unwrap_or(0)
        })
        .collect();
    for (t, label) in selected.iter().zip(labels.iter_mut()) {
        if *label == 0 {
            *label = book.fresh();
            book.by_origin.insert(t.origin, *label);
        }
    }

    let mut claims: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        claims.entry(l).or_default().push(i);
    }
    let mut keepers = vec![true; selected.len()];
    for members in claims.values().filter(|m| m.len() > 1) {
        let keep = *members
            .iter()
            .max_by(|&&a, &&b| {
                selected[a]
                    .weight
                    .total_cmp(&selected[b].weight)
                    .then(selected[b].candidate.cmp(&selected[a].candidate))
            })
            .expect("non-empty claim");
        let mut losers: Vec<usize> = members.iter().copied().filter(|&i| i != keep).collect();
        losers.sort_by_key(|&i| selected[i].candidate);
        for i in losers {
            labels[i] = book.fresh();
            keepers[i] = false;
        }
    }

    // Keepers are written last so shared detections point at the kept label.
    for pass in [false, true] {
        for (i, t) in selected.iter().enumerate() {
            if keepers[i] == pass {
                for m in &t.detections {
                    book.by_measurement.insert(*m, labels[i]);
                }
            }
        }
    }
    labels
}
