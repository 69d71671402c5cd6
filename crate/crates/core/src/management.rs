//! Pruning and merging of hypotheses.

use std::collections::BTreeMap;

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{HispError, Result};
use crate::filter::{Hypothesis, MeasurementId, MultiTargetConfiguration};
use crate::lingauss::{mahalanobis, GaussianState, StateMatrix, StateVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneMergeConfig {
    pub prune_threshold: f64,
    /// Mahalanobis radius of rule 2.
    pub merge_distance: f64,
    pub max_hypotheses: usize,
    pub window: u32,
}

impl Default for PruneMergeConfig {
    fn default() -> Self {
        Self {
            prune_threshold: 1e-3,
            merge_distance: 4.0,
            max_hypotheses: 10_000_000,
            window: 5,
        }
    }
}

impl PruneMergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_threshold > 0.0 && self.prune_threshold < 1.0) {
            return Err(HispError::Config(
                "prune_threshold must lie in (0, 1)".into(),
            ));
        }
        if !(self.merge_distance > 0.0) {
            return Err(HispError::Config("merge_distance must be positive".into()));
        }
        if self.max_hypotheses == 0 || self.window == 0 {
            return Err(HispError::Config(
                "max_hypotheses and window must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Counters from one merge call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeStats {
    pub merged: usize,
    pub singular: usize,
    /// Groups of equal paths left alone because their weights exceed 1.
    pub over_unit: usize,
}

/// Drops hypotheses at or below the threshold, then applies the hard cap.
pub fn prune(config: &MultiTargetConfiguration, pm: &PruneMergeConfig) -> MultiTargetConfiguration {
    let mut out = config.clone();
    out.hypotheses.retain(|h| h.weight > pm.prune_threshold);
    out.graveyard
        .retain(|g| g.hypothesis.weight > pm.prune_threshold);
    if out.hypotheses.len() > pm.max_hypotheses {
        let mut order: Vec<usize> = (0..out.hypotheses.len()).collect();
        order.sort_by(|&a, &b| {
            let (ha, hb) = (&out.hypotheses[a], &out.hypotheses[b]);
            hb.weight
                .total_cmp(&ha.weight)
                .then(ha.birth_time.cmp(&hb.birth_time))
                .then(ha.id.cmp(&hb.id))
        });
        let mut keep = vec![false; order.len()];
        for &i in &order[..pm.max_hypotheses] {
            keep[i] = true;
        }
        let mut k = keep.into_iter();
        out.hypotheses.retain(|_| k.next().unwrap_or(false));
    }
    out
}

/// Weighted moment match of a set of Gaussians, including the spread term.
fn moment_match(members: &[&Hypothesis]) -> Option<GaussianState> {
    let total: f64 = members.iter().map(|h| h.weight).sum();
    if !(total > 0.0) {
        return None;
    }
    let mean: StateVector = members
        .iter()
        .map(|h| h.state.mean * (h.weight / total))
        .sum();
    let mut cov = StateMatrix::zeros();
    for h in members {
        let d = h.state.mean - mean;
        cov += (h.state.cov + d * d.transpose()) * (h.weight / total);
    }
    cov = (cov + cov.transpose()) * 0.5;
    Cholesky::new(cov)?;
    Some(GaussianState::new(mean, cov))
}

fn seed_order(hyps: &[Hypothesis]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..hyps.len()).collect();
    order.sort_by(|&a, &b| {
        hyps[b]
            .weight
            .total_cmp(&hyps[a].weight)
            .then(hyps[a].id.cmp(&hyps[b].id))
    });
    order
}

fn within(a: &GaussianState, b: &GaussianState, radius: f64) -> bool {
    let d = a.mean - b.mean;
    // d' P⁻¹ d ≥ |d|² / trace(P), so a large raw offset rules the pair out cheaply.
    let trace = ((a.cov + b.cov) * 0.5).trace();
    if d.norm_squared() > radius * radius * trace {
        return false;
    }
    mahalanobis(a, b).map(|m| m <= radius).unwrap_or(false)
}

fn merge_pass(hyps: &[Hypothesis], radius: f64, stats: &mut MergeStats) -> Option<Vec<Hypothesis>> {
    let order = seed_order(hyps);
    let mut used = vec![false; hyps.len()];
    let mut absorbed = vec![false; hyps.len()];
    let mut merged: Vec<Option<Hypothesis>> = vec![None; hyps.len()];
    for &seed in &order {
        if used[seed] {
            continue;
        }
        used[seed] = true;
        let mut members = vec![seed];
        let mut total = hyps[seed].weight;
        for &other in &order {
            if used[other] || !within(&hyps[seed].state, &hyps[other].state, radius) {
                continue;
            }
            // Members that would push the weight above 1 stay separate.
            if total + hyps[other].weight > 1.0 {
                continue;
            }
            total += hyps[other].weight;
            members.push(other);
        }
        if members.len() == 1 {
            continue;
        }
        let refs: Vec<&Hypothesis> = members.iter().map(|&i| &hyps[i]).collect();
        let Some(state) = moment_match(&refs) else {
            stats.singular += 1;
            continue;
        };
        for &i in &members[1..] {
            used[i] = true;
            absorbed[i] = true;
        }
        stats.merged += members.len() - 1;
        merged[seed] = Some(Hypothesis {
            state,
            weight: total,
            ..hyps[seed].clone()
        });
    }
    if !absorbed.contains(&true) {
        return None;
    }
    Some(
        hyps.iter()
            .zip(merged)
            .zip(absorbed)
            .filter(|(_, gone)| !gone)
            .map(|((h, m), _)| m.unwrap_or_else(|| h.clone()))
            .collect(),
    )
}

/// Rule 2: greedy Mahalanobis clustering seeded at the heaviest hypothesis,
/// repeated until no pair merges.
pub fn merge_densities(
    config: &MultiTargetConfiguration,
    pm: &PruneMergeConfig,
) -> (MultiTargetConfiguration, MergeStats) {
    let mut stats = MergeStats::default();
    let mut out = config.clone();
    while let Some(next) = merge_pass(&out.hypotheses, pm.merge_distance, &mut stats) {
        out.hypotheses = next;
    }
    (out, stats)
}

/// Rule 3: hypotheses explaining the same detections over the window become one.
pub fn merge_same_path(
    config: &MultiTargetConfiguration,
) -> (MultiTargetConfiguration, MergeStats) {
    let start = config.window_start();
    let mut groups: BTreeMap<Vec<MeasurementId>, Vec<usize>> = BTreeMap::new();
    for (i, h) in config.hypotheses.iter().enumerate() {
        let key = h.path.detections_since(start);
        if !key.is_empty() {
            groups.entry(key).or_default().push(i);
        }
    }
    let mut stats = MergeStats::default();
    let mut drop = vec![false; config.hypotheses.len()];
    let mut out = config.clone();
    for members in groups.values().filter(|m| m.len() > 1) {
        let total: f64 = members.iter().map(|&i| config.hypotheses[i].weight).sum();
        if total > 1.0 {
            stats.over_unit += 1;
            continue;
        }
        let keeper = *members
            .iter()
            .max_by(|&&a, &&b| {
                let (ha, hb) = (&config.hypotheses[a], &config.hypotheses[b]);
                ha.weight.total_cmp(&hb.weight).then(hb.id.cmp(&ha.id))
            })
            .expect("non-empty group");
        let refs: Vec<&Hypothesis> = members.iter().map(|&i| &config.hypotheses[i]).collect();
        let Some(state) = moment_match(&refs) else {
            stats.singular += 1;
            continue;
        };
        out.hypotheses[keeper].state = state;
        out.hypotheses[keeper].weight = total;
        for &i in members.iter().filter(|&&i| i != keeper) {
            drop[i] = true;
        }
        stats.merged += members.len() - 1;
    }
    let mut d = drop.into_iter();
    out.hypotheses.retain(|_| !d.next().unwrap_or(false));
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{HypothesisId, ObservationPath, Slot};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn hyp(id: u64, x: f64, y: f64, weight: f64) -> Hypothesis {
        Hypothesis {
            id: HypothesisId(id),
            origin: MeasurementId::new(1, id as u32),
            path: ObservationPath::born(MeasurementId::new(1, id as u32)),
            state: GaussianState::new(
                StateVector::from_column_slice(&[x, y, 0.0, 0.0, 40.0, 80.0]),
                StateMatrix::identity(),
            ),
            weight,
            multiplicity: 1,
            feature: None,
            birth_time: 1,
        }
    }

    fn config(hyps: Vec<Hypothesis>) -> MultiTargetConfiguration {
        let mut c = MultiTargetConfiguration::new(5);
        c.frame = 3;
        c.hypotheses = hyps;
        c
    }

    fn pm() -> PruneMergeConfig {
        PruneMergeConfig::default()
    }

    #[test]
    fn prune_drops_light_hypotheses() {
        let c = prune(
            &config(vec![hyp(0, 0.0, 0.0, 0.5), hyp(1, 9.0, 0.0, 1e-4)]),
            &pm(),
        );
        assert_eq!(c.hypotheses.len(), 1);
        let all = config(vec![hyp(0, 0.0, 0.0, 0.5), hyp(1, 9.0, 0.0, 0.2)]);
        assert_eq!(prune(&all, &pm()), all);
    }

    #[test]
    fn cap_keeps_the_heaviest() {
        let weights = [0.11, 0.52, 0.3, 0.05, 0.9, 0.61, 0.2, 0.33, 0.07, 0.4];
        let hyps: Vec<_> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| hyp(i as u64, 100.0 * i as f64, 0.0, w))
            .collect();
        let c = prune(
            &config(hyps),
            &PruneMergeConfig {
                max_hypotheses: 3,
                ..pm()
            },
        );
        let mut sorted = weights.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut kept: Vec<f64> = c.hypotheses.iter().map(|h| h.weight).collect();
        kept.sort_by(|a, b| b.total_cmp(a));
        assert_eq!(kept, sorted[..3].to_vec());
    }

    #[test]
    fn cap_breaks_ties_by_age_then_id() {
        let mut hyps: Vec<_> = (0..4).map(|i| hyp(i, 100.0 * i as f64, 0.0, 0.5)).collect();
        hyps[3].birth_time = 0;
        let c = prune(
            &config(hyps),
            &PruneMergeConfig {
                max_hypotheses: 2,
                ..pm()
            },
        );
        let ids: Vec<u64> = c.hypotheses.iter().map(|h| h.id.0).collect();
        assert_eq!(ids, vec![0, 3]);
    }

    #[test]
    fn graveyard_is_pruned_too() {
        use crate::filter::GraveEntry;
        let mut c = config(vec![]);
        c.graveyard = vec![
            GraveEntry {
                hypothesis: hyp(0, 0.0, 0.0, 1e-5),
                death_time: 3,
            },
            GraveEntry {
                hypothesis: hyp(1, 0.0, 0.0, 0.1),
                death_time: 3,
            },
        ];
        assert_eq!(prune(&c, &pm()).graveyard.len(), 1);
    }

    #[test]
    fn coincident_densities_merge() {
        let (c, stats) = merge_densities(
            &config(vec![hyp(0, 5.0, 5.0, 0.3), hyp(1, 5.0, 5.0, 0.2)]),
            &pm(),
        );
        assert_eq!(c.hypotheses.len(), 1);
        assert_eq!(stats.merged, 1);
        assert_relative_eq!(c.hypotheses[0].weight, 0.5);
        assert_eq!(c.hypotheses[0].id, HypothesisId(0));
        assert_relative_eq!(c.hypotheses[0].state.mean[0], 5.0);
    }

    #[test]
    fn distant_densities_stay_apart() {
        let c = config(vec![hyp(0, 0.0, 0.0, 0.3), hyp(1, 100.0, 0.0, 0.2)]);
        assert_eq!(merge_densities(&c, &pm()).0, c);
    }

    #[test]
    fn merged_covariance_carries_the_spread() {
        let (c, _) = merge_densities(
            &config(vec![hyp(0, 0.0, 0.0, 0.5), hyp(1, 2.0, 0.0, 0.5)]),
            &pm(),
        );
        let s = &c.hypotheses[0].state;
        assert_relative_eq!(s.mean[0], 1.0);
        assert_relative_eq!(s.cov[(0, 0)], 2.0);
        assert_relative_eq!(s.cov[(1, 1)], 1.0);
    }

    #[test]
    fn merge_never_exceeds_unit_weight() {
        let (c, _) = merge_densities(
            &config(vec![
                hyp(0, 0.0, 0.0, 0.7),
                hyp(1, 0.5, 0.0, 0.6),
                hyp(2, 0.2, 0.0, 0.3),
            ]),
            &pm(),
        );
        assert_eq!(c.hypotheses.len(), 2);
        assert!(c.hypotheses.iter().all(|h| h.weight <= 1.0));
        assert_relative_eq!(c.total_weight(), 1.6, epsilon = 1e-12);
    }

    /// Connected components of the all-pairs "within radius" graph.
    fn brute_clusters(hyps: &[Hypothesis], radius: f64) -> Vec<Vec<u64>> {
        let n = hyps.len();
        let mut label: Vec<usize> = (0..n).collect();
        for i in 0..n {
            for j in 0..n {
                if mahalanobis(&hyps[i].state, &hyps[j].state).unwrap() <= radius {
                    let (a, b) = (label[i], label[j]);
                    for l in label.iter_mut() {
                        if *l == b {
                            *l = a;
                        }
                    }
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for (i, l) in label.into_iter().enumerate() {
            groups.entry(l).or_default().push(hyps[i].id.0);
        }
        let mut out: Vec<Vec<u64>> = groups.into_values().collect();
        out.sort();
        out
    }

    #[test]
    fn three_clusters_match_the_exhaustive_grouping() {
        let centers = [(100.0, 100.0), (400.0, 120.0), (250.0, 600.0)];
        let offsets = [(0.0, 0.0), (0.8, -0.5), (-0.6, 0.9), (0.3, 0.4)];
        let mut hyps = Vec::new();
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for (k, &(dx, dy)) in offsets.iter().enumerate().take(2 + c) {
                let id = (10 * c + k) as u64;
                hyps.push(hyp(id, cx + dx, cy + dy, 0.05 + 0.01 * k as f64));
            }
        }
        let expected = brute_clusters(&hyps, 4.0);
        let (merged, _) = merge_densities(&config(hyps.clone()), &pm());
        // Every merged survivor is the heaviest of exactly one oracle cluster.
        assert_eq!(merged.hypotheses.len(), expected.len());
        for cluster in &expected {
            let total: f64 = hyps
                .iter()
                .filter(|h| cluster.contains(&h.id.0))
                .map(|h| h.weight)
                .sum();
            let survivor = merged
                .hypotheses
                .iter()
                .find(|h| cluster.contains(&h.id.0))
                .unwrap();
            assert_relative_eq!(survivor.weight, total, epsilon = 1e-12);
        }
    }

    fn with_path(mut h: Hypothesis, slots: Vec<Slot>) -> Hypothesis {
        h.path = ObservationPath::from_slots(1, slots);
        h
    }

    #[test]
    fn equal_paths_merge_under_unit_weight() {
        let slots = vec![Slot::Detected(0), Slot::Missed, Slot::Detected(2)];
        let c = config(vec![
            with_path(hyp(0, 0.0, 0.0, 0.4), slots.clone()),
            with_path(hyp(1, 50.0, 0.0, 0.5), slots),
        ]);
        let (m, stats) = merge_same_path(&c);
        assert_eq!(m.hypotheses.len(), 1);
        assert_eq!(stats.merged, 1);
        assert_relative_eq!(m.hypotheses[0].weight, 0.9);
        assert_eq!(m.hypotheses[0].id, HypothesisId(1));
    }

    #[test]
    fn equal_paths_over_unit_weight_stay() {
        let slots = vec![Slot::Detected(0), Slot::Detected(1), Slot::Detected(2)];
        let c = config(vec![
            with_path(hyp(0, 0.0, 0.0, 0.7), slots.clone()),
            with_path(hyp(1, 50.0, 0.0, 0.7), slots),
        ]);
        let (m, stats) = merge_same_path(&c);
        assert_eq!(m, c);
        assert_eq!(stats.over_unit, 1);
    }

    #[test]
    fn distinct_paths_stay() {
        let c = config(vec![
            with_path(hyp(0, 0.0, 0.0, 0.4), vec![Slot::Detected(0)]),
            with_path(hyp(1, 0.0, 0.0, 0.4), vec![Slot::Detected(1)]),
        ]);
        assert_eq!(merge_same_path(&c).0, c);
    }

    fn arb_config() -> impl Strategy<Value = MultiTargetConfiguration> {
        prop::collection::vec((0.0f64..30.0, 0.0f64..30.0, 0.01f64..0.6, 0u32..3), 0..12).prop_map(
            |v| {
                config(
                    v.into_iter()
                        .enumerate()
                        .map(|(i, (x, y, w, d))| {
                            with_path(hyp(i as u64, x, y, w), vec![Slot::Detected(d)])
                        })
                        .collect(),
                )
            },
        )
    }

    proptest! {
        #[test]
        fn merges_conserve_mass_and_are_idempotent(c in arb_config()) {
            let (a, _) = merge_densities(&c, &pm());
            prop_assert!((a.total_weight() - c.total_weight()).abs() < 1e-9);
            prop_assert!(a.hypotheses.iter().all(|h| h.weight <= 1.0 + 1e-12));
            prop_assert_eq!(&merge_densities(&a, &pm()).0, &a);
            let (b, stats) = merge_same_path(&c);
            if stats.over_unit == 0 {
                prop_assert!((b.total_weight() - c.total_weight()).abs() < 1e-9);
            }
            prop_assert_eq!(&merge_same_path(&b).0, &b);
        }

        #[test]
        fn prune_never_adds_mass(c in arb_config(), cap in 1usize..6) {
            let p = prune(&c, &PruneMergeConfig { max_hypotheses: cap, prune_threshold: 0.1, ..pm() });
            prop_assert!(p.total_weight() <= c.total_weight() + 1e-12);
            prop_assert!(p.hypotheses.len() <= cap);
            prop_assert!(p.hypotheses.iter().all(|h| h.weight > 0.1));
        }
    }
}
