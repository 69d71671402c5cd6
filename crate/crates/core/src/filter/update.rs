use super::{AssociationTable, BirthModel};
use super::{
    ClutterRecord, Hypothesis, Measurement, MultiTargetConfiguration, ObservationPath, Slot,
};
use crate::appearance::{hypothesis_feature_update, FeaturePolicy};
use crate::error::{HispError, Result};
use crate::lingauss::{GaussianState, StateVector};

/// Numerical diagnostics of one update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateReport {
    /// Largest `|children + vanished − 1|` over all rows.
    pub max_row_deviation: f64,
    pub collapsed_rows: usize,
    pub underflows: usize,
    pub fallback_pairs: usize,
    pub newborns: usize,
}

/// Posterior configuration from a predicted configuration and a filled table.
pub fn update(
    predicted: &MultiTargetConfiguration,
    measurements: &[Measurement],
    table: &AssociationTable,
    birth: &BirthModel,
    policy: FeaturePolicy,
) -> Result<(MultiTargetConfiguration, UpdateReport)> {
    if table.rows.len() != predicted.hypotheses.len()
        || table.num_measurements() != measurements.len()
    {
        return Err(HispError::numerical(
            "association table does not match the configuration",
        ));
    }
    let posterior = table.posterior()?;
    let mut next = MultiTargetConfiguration {
        hypotheses: Vec::with_capacity(predicted.hypotheses.len() * 2 + measurements.len()),
        undetected: predicted.undetected,
        graveyard: predicted.graveyard.clone(),
        clutter_records: predicted.clutter_records.clone(),
        frame: predicted.frame,
        window: predicted.window,
        next_id: predicted.next_id,
    };
    let window_start = next.window_start();
    let frame = predicted.frame;
    let mut report = UpdateReport {
        underflows: table.underflow_count(),
        fallback_pairs: table.fallback_pairs(),
        ..UpdateReport::default()
    };

    for ((parent, row), post) in predicted
        .hypotheses
        .iter()
        .zip(&table.rows)
        .zip(&posterior.rows)
    {
        report.max_row_deviation = report
            .max_row_deviation
            .max((post.partition_sum() - 1.0).abs());
        report.collapsed_rows += usize::from(post.collapsed);
        for (entry, &weight) in row.entries.iter().zip(&post.children) {
            if weight <= 0.0 {
                continue;
            }
            let m = &measurements[entry.column];
            let state = entry.posterior.clone().ok_or_else(|| {
                HispError::numerical(format!("{} has no posterior for {}", parent.id, m.id))
            })?;
            let feature = match (&parent.feature, &m.feature) {
                (Some(old), Some(new)) => Some(hypothesis_feature_update(old, new, policy)?),
                (None, Some(new)) => Some(new.clone()),
                (old, None) => old.clone(),
            };
            let mut path = parent.path.extended(Slot::Detected(m.id.index));
            path.truncate_before(window_start);
            let id = next.allocate_id();
            next.hypotheses.push(Hypothesis {
                id,
                path,
                state,
                weight,
                feature,
                ..parent.clone()
            });
        }
        if post.missed > 0.0 {
            let mut path = parent.path.extended(Slot::Missed);
            path.truncate_before(window_start);
            let id = next.allocate_id();
            next.hypotheses.push(Hypothesis {
                id,
                path,
                weight: post.missed,
                ..parent.clone()
            });
        }
    }

    for (m, &weight) in measurements.iter().zip(&posterior.newborn) {
        if weight <= 0.0 {
            continue;
        }
        let z = &m.z.0;
        let mean = StateVector::from_column_slice(&[z[0], z[1], 0.0, 0.0, z[2], z[3]]);
        let id = next.allocate_id();
        next.hypotheses.push(Hypothesis {
            id,
            origin: m.id,
            path: ObservationPath::born(m.id),
            state: GaussianState::new(mean, birth.birth_covariance),
            weight,
            multiplicity: 1,
            feature: m.feature.clone(),
            birth_time: frame,
        });
        report.newborns += 1;
    }

    next.clutter_records.extend(
        measurements
            .iter()
            .zip(&posterior.clutter)
            .map(|(m, &weight)| ClutterRecord {
                measurement: m.id,
                weight,
            }),
    );
    next.undetected.weight = posterior.undetected_weight;
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appearance::AppearanceProvider;
    use crate::filter::tests::{default_birth, hypothesis_at};
    use crate::filter::{
        build_association_table, default_gate_threshold, external_weights, predict, MeasurementId,
    };
    use crate::lingauss::{MeasurementVector, MotionModel, SensorModel};
    use approx::assert_relative_eq;

    fn step(
        config: &MultiTargetConfiguration,
        ms: &[Measurement],
        sensor: &SensorModel,
    ) -> (MultiTargetConfiguration, UpdateReport) {
        let birth = default_birth();
        let table = build_association_table(
            config,
            ms,
            sensor,
            &birth,
            &AppearanceProvider::off(),
            default_gate_threshold(),
        )
        .unwrap();
        update(
            config,
            ms,
            &external_weights(table),
            &birth,
            FeaturePolicy::LastMatch,
        )
        .unwrap()
    }

    fn single(w: f64) -> MultiTargetConfiguration {
        let mut c = MultiTargetConfiguration::new(5);
        c.frame = 2;
        c.push_hypothesis(hypothesis_at([300.0, 300.0, 0.0, 0.0, 40.0, 80.0], w));
        c.undetected.multiplicity = 0.2;
        c.undetected.weight = default_birth().per_measurement_birth_prob;
        c
    }

    fn meas(frame: u32, index: u32, cx: f64, cy: f64) -> Measurement {
        Measurement {
            id: MeasurementId::new(frame, index),
            z: MeasurementVector::new(cx, cy, 40.0, 80.0).unwrap(),
            feature: None,
        }
    }

    #[test]
    fn no_detections_keep_a_certain_object_alive() {
        let s = SensorModel::box_sensor(6.0, 0.9, 10.0, 1920.0, 1080.0);
        let (c, report) = step(&single(1.0), &[], &s);
        assert_eq!(c.hypotheses.len(), 1);
        assert_relative_eq!(c.hypotheses[0].weight, 1.0, epsilon = 1e-12);
        assert_eq!(c.hypotheses[0].path.slots().last(), Some(&Slot::Missed));
        assert!(report.max_row_deviation < 1e-12);
    }

    #[test]
    fn on_target_detection_dominates_the_miss() {
        let s = SensorModel::box_sensor(6.0, 0.9, 10.0, 1920.0, 1080.0);
        let (c, _) = step(&single(1.0), &[meas(2, 0, 300.0, 300.0)], &s);
        let detected: f64 = c
            .hypotheses
            .iter()
            .filter(|h| {
                h.path.last_detection() == Some(MeasurementId::new(2, 0)) && h.birth_time == 1
            })
            .map(|h| h.weight)
            .sum();
        let missed: f64 = c
            .hypotheses
            .iter()
            .filter(|h| h.path.slots().last() == Some(&Slot::Missed))
            .map(|h| h.weight)
            .sum();
        // Two-event oracle: detect versus miss, with birth and clutter
        // explanations of the detection competing against the association.
        let table = build_association_table(
            &single(1.0),
            &[meas(2, 0, 300.0, 300.0)],
            &s,
            &default_birth(),
            &AppearanceProvider::off(),
            default_gate_threshold(),
        )
        .unwrap();
        let hit = table.rows[0].entries[0].weight;
        let c_z = table.constant(0);
        let expected = (hit / c_z) / (hit / c_z + 0.1);
        assert_relative_eq!(detected, expected, max_relative = 1e-9);
        assert!(detected > 0.99);
        assert!(missed < 0.01);
    }

    #[test]
    fn isolated_detection_spawns_a_newborn() {
        let s = SensorModel::box_sensor(6.0, 0.9, 10.0, 1920.0, 1080.0);
        let c = single(1.0);
        let (next, report) = step(&c, &[meas(2, 0, 1500.0, 900.0)], &s);
        assert_eq!(report.newborns, 1);
        let born = next.hypotheses.iter().find(|h| h.birth_time == 2).unwrap();
        assert_eq!(born.state.mean[2], 0.0);
        assert_eq!(born.state.cov, default_birth().birth_covariance);
        // Birth against clutter only.
        let b = default_birth().birth_ratio();
        let v = s.clutter_density / (1.0 - s.clutter_density);
        assert_relative_eq!(born.weight, b / (b + v), max_relative = 1e-9);
        let rec = next.clutter_records.last().unwrap();
        assert_relative_eq!(rec.weight, v / (b + v), max_relative = 1e-9);
    }

    #[test]
    fn rows_partition_over_random_frames() {
        let motion = MotionModel::constant_velocity(1.0, 5.0, 0.99);
        let s = SensorModel::box_sensor(6.0, 0.9, 10.0, 1920.0, 1080.0);
        let birth = default_birth();
        let mut c = MultiTargetConfiguration::new(5);
        for frame in 1..=12u32 {
            c = predict(&c, &motion, &birth).unwrap();
            let ms: Vec<_> = (0..4)
                .map(|i| {
                    meas(
                        frame,
                        i,
                        200.0 + 150.0 * i as f64 + frame as f64,
                        300.0 + 3.0 * i as f64,
                    )
                })
                .collect();
            let (next, report) = step(&c, &ms, &s);
            assert!(report.max_row_deviation < 1e-9);
            assert!(next
                .hypotheses
                .iter()
                .all(|h| (0.0..=1.0).contains(&h.weight)));
            c = next;
            c.hypotheses.retain(|h| h.weight > 1e-3);
        }
        assert!(c.total_weight() > 3.0);
    }
}
