//! Association weights, external weights and the two normalisations of the
//! posterior weights.
//!
//! Rows are the predicted hypotheses, the undetected track `u` and one
//! clutter row per measurement; columns are the measurements plus the empty
//! observation φ. Only gated pairs are stored.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{BirthModel, Hypothesis, MeasurementId, MultiTargetConfiguration};
use crate::appearance::{AppearanceProvider, FeatureVector};
use crate::error::{HispError, Result};
use crate::lingauss::{
    association_from_innovation, correct, GaussianState, Innovation, MeasurementVector, SensorModel,
};

pub const DEFAULT_UNDERFLOW_FLOOR: f64 = 1e-300;

/// χ² quantile at 0.999 for the 4 measurement dimensions.
pub fn default_gate_threshold() -> f64 {
    gate_threshold_for(0.999)
}

pub(crate) fn gate_threshold_for(probability: f64) -> f64 {
    ChiSquared::new(4.0)
        .expect("4 degrees of freedom")
        .inverse_cdf(probability)
}

/// One detection of the current frame, in filter form.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub id: MeasurementId,
    pub z: MeasurementVector,
    pub feature: Option<FeatureVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationEntry {
    pub column: usize,
    /// `w̌^{κ,z}`; equal to `w^{κ,z}` for a measurement.
    pub weight: f64,
    /// Kalman posterior for this pair, when built from Gaussian states.
    pub posterior: Option<GaussianState>,
    log_ex: f64,
    /// `ln` of the row bracket with this column removed.
    log_without: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisRow {
    /// Predicted weight `w^κ_{t|t-1}`.
    pub prior_weight: f64,
    /// `w̌^{κ,φ}`: the object exists and is missed.
    pub missed: f64,
    pub entries: Vec<AssociationEntry>,
    log_ex_missed: f64,
}

impl HypothesisRow {
    /// `w^{κ,φ} = w̌^{κ,φ} + (1 − w^κ)`.
    pub fn miss_mass(&self) -> f64 {
        self.missed + (1.0 - self.prior_weight)
    }

    fn bracket(&self, constants: &[f64], skip: Option<usize>) -> f64 {
        self.miss_mass()
            + self
                .entries
                .iter()
                .filter(|e| Some(e.column) != skip)
                .map(|e| e.weight / constants[e.column])
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UndetectedRow {
    pub weight: f64,
    pub multiplicity: f64,
    /// `w̌^{u,φ}`
    pub missed: f64,
    /// `w^{u,z}` per measurement.
    pub births: Vec<f64>,
    log_ex_missed: f64,
    log_ex: Vec<f64>,
}

impl UndetectedRow {
    pub fn miss_mass(&self) -> f64 {
        self.missed + (1.0 - self.weight)
    }
}

/// Raw description of a hypothesis row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSpec {
    pub prior_weight: f64,
    pub missed: f64,
    pub hits: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UndetectedSpec {
    pub weight: f64,
    pub multiplicity: f64,
    pub missed: f64,
    pub births: Vec<f64>,
}

/// Selects one cell of the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pair {
    /// Hypothesis row and entry index (`None` for φ).
    Hypothesis(usize, Option<usize>),
    Undetected(Option<usize>),
    /// Clutter row of a column; `true` for the measurement, `false` for φ.
    Clutter(usize, bool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationTable {
    pub measurements: Vec<MeasurementId>,
    /// `v(z)` per measurement.
    pub clutter: Vec<f64>,
    pub rows: Vec<HypothesisRow>,
    pub undetected: UndetectedRow,
    constants: Vec<f64>,
    /// `(row, entry)` of every stored pair, per column.
    columns: Vec<Vec<(usize, usize)>>,
    clutter_log_ex: Vec<(f64, f64)>,
    filled: bool,
    underflow_floor: f64,
    underflow_count: usize,
    fallback_pairs: usize,
}

impl AssociationTable {
    /// Builds a table from raw weights.
    pub fn from_specs(
        measurements: Vec<MeasurementId>,
        clutter: Vec<f64>,
        rows: Vec<RowSpec>,
        undetected: UndetectedSpec,
    ) -> Result<Self> {
        let m = measurements.len();
        if clutter.len() != m || undetected.births.len() != m {
            return Err(HispError::Config("column count mismatch".into()));
        }
        if clutter.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(HispError::Config(
                "clutter probability outside [0, 1)".into(),
            ));
        }
        let rows = rows
            .into_iter()
            .map(|r| {
                let mut hits = r.hits;
                hits.sort_by_key(|&(c, _)| c);
                if hits.windows(2).any(|w| w[0].0 == w[1].0) || hits.iter().any(|&(c, _)| c >= m) {
                    return Err(HispError::Config("invalid row columns".into()));
                }
                Ok(HypothesisRow {
                    prior_weight: r.prior_weight,
                    missed: r.missed,
                    entries: hits
                        .into_iter()
                        .map(|(column, weight)| AssociationEntry {
                            column,
                            weight,
                            posterior: None,
                            log_ex: f64::NAN,
                            log_without: f64::NAN,
                        })
                        .collect(),
                    log_ex_missed: f64::NAN,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let undetected = UndetectedRow {
            weight: undetected.weight,
            multiplicity: undetected.multiplicity,
            missed: undetected.missed,
            births: undetected.births,
            log_ex_missed: f64::NAN,
            log_ex: vec![f64::NAN; m],
        };
        Self::assemble(measurements, clutter, rows, undetected)
    }

    fn assemble(
        measurements: Vec<MeasurementId>,
        clutter: Vec<f64>,
        rows: Vec<HypothesisRow>,
        undetected: UndetectedRow,
    ) -> Result<Self> {
        let bad = |x: f64| !(x.is_finite() && x >= 0.0);
        if rows.iter().any(|r| {
            bad(r.prior_weight)
                || r.prior_weight > 1.0
                || bad(r.missed)
                || r.entries.iter().any(|e| bad(e.weight))
        }) || bad(undetected.missed)
            || !(0.0..=1.0).contains(&undetected.weight)
            || bad(undetected.multiplicity)
            || undetected.births.iter().any(|&b| bad(b))
        {
            return Err(HispError::Config(
                "association weights must be finite and non-negative".into(),
            ));
        }
        let miss_u = undetected.miss_mass();
        if miss_u <= 0.0 {
            return Err(HispError::Config(
                "undetected miss mass must be positive".into(),
            ));
        }
        let constants: Vec<f64> = undetected
            .births
            .iter()
            .zip(&clutter)
            .map(|(b, v)| b / miss_u + v / (1.0 - v))
            .collect();
        if constants.iter().any(|&c| c <= 0.0) {
            return Err(HispError::Config(
                "every measurement needs a positive birth or clutter probability".into(),
            ));
        }
        let mut columns = vec![Vec::new(); measurements.len()];
        for (r, row) in rows.iter().enumerate() {
            for (e, entry) in row.entries.iter().enumerate() {
                columns[entry.column].push((r, e));
            }
        }
        let m = measurements.len();
        Ok(Self {
            measurements,
            clutter,
            rows,
            undetected,
            constants,
            columns,
            clutter_log_ex: vec![(f64::NAN, f64::NAN); m],
            filled: false,
            underflow_floor: DEFAULT_UNDERFLOW_FLOOR,
            underflow_count: 0,
            fallback_pairs: 0,
        })
    }

    pub fn num_measurements(&self) -> usize {
        self.measurements.len()
    }

    /// `C_t(z)` of a column.
    pub fn constant(&self, column: usize) -> f64 {
        self.constants[column]
    }

    /// Rows gated to a column, as `(row, entry)` pairs.
    pub fn column(&self, column: usize) -> &[(usize, usize)] {
        &self.columns[column]
    }

    pub fn set_underflow_floor(&mut self, floor: f64) {
        self.underflow_floor = floor;
    }

    pub fn is_filled(&self) -> bool {
        self.filled
    }

    /// Pairs whose external weight fell below the underflow floor.
    pub fn underflow_count(&self) -> usize {
        self.underflow_count
    }

    /// Pairs evaluated by the direct per-pair product because a bracket was zero.
    pub fn fallback_pairs(&self) -> usize {
        self.fallback_pairs
    }

    /// Association mass `w^{κ,z}` of a cell.
    pub fn mass(&self, pair: Pair) -> f64 {
        match pair {
            Pair::Hypothesis(r, Some(e)) => self.rows[r].entries[e].weight,
            Pair::Hypothesis(r, None) => self.rows[r].miss_mass(),
            Pair::Undetected(Some(j)) => self.undetected.births[j],
            Pair::Undetected(None) => self.undetected.miss_mass(),
            Pair::Clutter(j, true) => self.clutter[j],
            Pair::Clutter(j, false) => 1.0 - self.clutter[j],
        }
    }

    /// `ln w_ex` of a cell; `None` before [`external_weights`] ran.
    pub fn log_external(&self, pair: Pair) -> Option<f64> {
        if !self.filled {
            return None;
        }
        Some(match pair {
            Pair::Hypothesis(r, Some(e)) => self.rows[r].entries[e].log_ex,
            Pair::Hypothesis(r, None) => self.rows[r].log_ex_missed,
            Pair::Undetected(Some(j)) => self.undetected.log_ex[j],
            Pair::Undetected(None) => self.undetected.log_ex_missed,
            Pair::Clutter(j, true) => self.clutter_log_ex[j].0,
            Pair::Clutter(j, false) => self.clutter_log_ex[j].1,
        })
    }

    /// External weight of a cell, clamped below at the underflow floor.
    pub fn external(&self, pair: Pair) -> Option<f64> {
        self.log_external(pair)
            .map(|l| l.exp().max(self.underflow_floor))
    }

    fn fill_external(&mut self) {
        let ln_c: Vec<f64> = self.constants.iter().map(|c| c.ln()).collect();
        let sum_ln_c: f64 = ln_c.iter().sum();
        let ln_not_clutter: Vec<f64> = self.clutter.iter().map(|v| (1.0 - v).ln()).collect();
        let sum_ln_not_clutter: f64 = ln_not_clutter.iter().sum();
        let ln_wu_phi = self.undetected.miss_mass().ln();
        let n_u = self.undetected.multiplicity;
        // ln C' common to every object row, with the `φ` column (no C(z) removed).
        let base = n_u * ln_wu_phi + sum_ln_not_clutter + sum_ln_c;

        let constants = &self.constants;
        let ln_b: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.bracket(constants, None).ln())
            .collect();
        for row in &mut self.rows {
            let without: Vec<f64> = row
                .entries
                .iter()
                .map(|e| row.bracket(constants, Some(e.column)).ln())
                .collect();
            for (e, w) in row.entries.iter_mut().zip(without) {
                e.log_without = w;
            }
        }

        let degenerate = ln_b.contains(&f64::NEG_INFINITY);
        let rows = &self.rows;
        let columns = &self.columns;
        // Σ_{κ' ≠ exclude} ln [bracket of κ' without `column`]
        let direct = |exclude: Option<usize>, column: Option<usize>| -> f64 {
            rows.iter()
                .enumerate()
                .filter(|(r, _)| Some(*r) != exclude)
                .map(|(r, row)| match column {
                    Some(j) => row
                        .entries
                        .iter()
                        .find(|e| e.column == j)
                        .map_or(ln_b[r], |e| e.log_without),
                    None => ln_b[r],
                })
                .sum()
        };
        let sum_ln_b: f64 = ln_b.iter().sum();
        let corrections: Vec<f64> = columns
            .iter()
            .map(|col| {
                col.iter()
                    .map(|&(r, e)| rows[r].entries[e].log_without - ln_b[r])
                    .sum()
            })
            .collect();
        let mut fallback = 0usize;
        let mut product = |exclude: Option<(usize, Option<usize>)>, column: Option<usize>| -> f64 {
            if degenerate {
                fallback += 1;
                return direct(exclude.map(|(r, _)| r), column);
            }
            let all = sum_ln_b + column.map_or(0.0, |j| corrections[j]);
            match exclude {
                None => all,
                Some((r, Some(e))) => all - rows[r].entries[e].log_without,
                Some((r, None)) => all - ln_b[r],
            }
        };

        let mut row_ex: Vec<(f64, Vec<f64>)> = Vec::with_capacity(rows.len());
        for (r, row) in rows.iter().enumerate() {
            let missed = base + product(Some((r, None)), None);
            let hits = row
                .entries
                .iter()
                .enumerate()
                .map(|(e, entry)| {
                    base - ln_c[entry.column] + product(Some((r, Some(e))), Some(entry.column))
                })
                .collect();
            row_ex.push((missed, hits));
        }
        let u_base = base - ln_wu_phi;
        let u_missed = u_base + product(None, None);
        let u_hits: Vec<f64> = (0..ln_c.len())
            .map(|j| u_base - ln_c[j] + product(None, Some(j)))
            .collect();
        let clutter_ex: Vec<(f64, f64)> = (0..ln_c.len())
            .map(|j| {
                let c_base = base - ln_not_clutter[j];
                (
                    c_base - ln_c[j] + product(None, Some(j)),
                    c_base + product(None, None),
                )
            })
            .collect();

        let ln_floor = self.underflow_floor.ln();
        let mut underflow = 0usize;
        for (row, (missed, hits)) in self.rows.iter_mut().zip(row_ex) {
            row.log_ex_missed = missed;
            underflow += usize::from(missed < ln_floor);
            for (e, l) in row.entries.iter_mut().zip(hits) {
                e.log_ex = l;
                underflow += usize::from(l < ln_floor && e.weight > 0.0);
            }
        }
        underflow += u_hits.iter().filter(|&&l| l < ln_floor).count();
        self.undetected.log_ex_missed = u_missed;
        self.undetected.log_ex = u_hits;
        self.clutter_log_ex = clutter_ex;
        self.underflow_count = underflow;
        self.fallback_pairs = fallback;
        self.filled = true;
    }

    /// Normalised posterior weights; requires external weights.
    pub fn posterior(&self) -> Result<PosteriorWeights> {
        if !self.filled {
            return Err(HispError::numerical("external weights not computed"));
        }
        let m = self.measurements.len();
        // Measurement-normalisation denominators: objects, birth and clutter.
        let mut column_terms: Vec<Vec<f64>> = vec![Vec::new(); m];
        for row in &self.rows {
            for e in &row.entries {
                column_terms[e.column].push(e.log_ex + e.weight.ln());
            }
        }
        for (j, terms) in column_terms.iter_mut().enumerate() {
            terms.push(self.undetected.log_ex[j] + self.undetected.births[j].ln());
            terms.push(self.clutter_log_ex[j].0 + self.clutter[j].ln());
        }
        let column_norm: Vec<f64> = column_terms.iter().map(|t| log_sum_exp(t)).collect();

        let rows = self
            .rows
            .iter()
            .map(|row| {
                let ln_miss_ex = row.log_ex_missed;
                let mut terms: Vec<f64> = row
                    .entries
                    .iter()
                    .map(|e| e.log_ex + e.weight.ln())
                    .collect();
                terms.push(ln_miss_ex + row.miss_mass().ln());
                let norm = log_sum_exp(&terms);
                if norm == f64::NEG_INFINITY || norm.is_nan() {
                    return RowPosterior {
                        children: vec![0.0; row.entries.len()],
                        children_by_measurement: vec![0.0; row.entries.len()],
                        missed: 1.0,
                        vanished: 0.0,
                        collapsed: true,
                    };
                }
                let share = |l: f64| (l - norm).exp().min(1.0);
                RowPosterior {
                    children: row
                        .entries
                        .iter()
                        .map(|e| share(e.log_ex + e.weight.ln()))
                        .collect(),
                    children_by_measurement: row
                        .entries
                        .iter()
                        .map(|e| {
                            let n = column_norm[e.column];
                            if n == f64::NEG_INFINITY {
                                0.0
                            } else {
                                (e.log_ex + e.weight.ln() - n).exp().min(1.0)
                            }
                        })
                        .collect(),
                    missed: share(ln_miss_ex + row.missed.ln()),
                    vanished: share(ln_miss_ex + (1.0 - row.prior_weight).ln()),
                    collapsed: false,
                }
            })
            .collect();

        let by_column = |l: f64, j: usize| {
            let n = column_norm[j];
            if n == f64::NEG_INFINITY {
                0.0
            } else {
                (l - n).exp().min(1.0)
            }
        };
        let newborn = (0..m)
            .map(|j| {
                by_column(
                    self.undetected.log_ex[j] + self.undetected.births[j].ln(),
                    j,
                )
            })
            .collect();
        let clutter = (0..m)
            .map(|j| by_column(self.clutter_log_ex[j].0 + self.clutter[j].ln(), j))
            .collect();

        let u = &self.undetected;
        let mut u_terms: Vec<f64> = (0..m).map(|j| u.log_ex[j] + u.births[j].ln()).collect();
        u_terms.push(u.log_ex_missed + u.miss_mass().ln());
        let u_norm = log_sum_exp(&u_terms);
        let undetected_weight = if u_norm == f64::NEG_INFINITY {
            u.weight
        } else {
            (u.log_ex_missed + u.missed.ln() - u_norm).exp().min(1.0)
        };

        Ok(PosteriorWeights {
            rows,
            newborn,
            clutter,
            undetected_weight,
        })
    }
}

/// Posterior of one hypothesis row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPosterior {
    /// Hypothesis-normalised weight of each detected child.
    pub children: Vec<f64>,
    /// Measurement-normalised weight of each detected child.
    pub children_by_measurement: Vec<f64>,
    /// Weight of the missed-detection child.
    pub missed: f64,
    /// Share of the row for "the object does not exist".
    pub vanished: f64,
    /// The normalisation was zero and the row fell back to its φ child.
    pub collapsed: bool,
}

impl RowPosterior {
    /// Children plus the non-existence share; 1 up to rounding.
    pub fn partition_sum(&self) -> f64 {
        self.children.iter().sum::<f64>() + self.missed + self.vanished
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    pub rows: Vec<RowPosterior>,
    /// Weight of the object born from each measurement.
    pub newborn: Vec<f64>,
    /// Posterior probability that each measurement is clutter.
    pub clutter: Vec<f64>,
    pub undetected_weight: f64,
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Fills the external weights of every stored pair.
pub fn external_weights(mut table: AssociationTable) -> AssociationTable {
    table.fill_external();
    table
}

/// Measurements whose squared innovation distance is within `threshold`.
pub fn gate(
    hypothesis: &Hypothesis,
    measurements: &[Measurement],
    sensor: &SensorModel,
    threshold: f64,
) -> Vec<MeasurementId> {
    measurements
        .iter()
        .filter(|m| {
            Innovation::new(&hypothesis.state, &m.z, sensor)
                .map(|i| i.distance_sq() <= threshold)
                .unwrap_or(false)
        })
        .map(|m| m.id)
        .collect()
}

/// Association weights of the predicted configuration against the frame's measurements.
pub fn build_association_table(
    config: &MultiTargetConfiguration,
    measurements: &[Measurement],
    sensor: &SensorModel,
    birth: &BirthModel,
    appearance: &AppearanceProvider,
    gate_threshold: f64,
) -> Result<AssociationTable> {
    let p_d = sensor.detection_prob;
    let mut rows = Vec::with_capacity(config.hypotheses.len());
    for h in &config.hypotheses {
        let w = h.weight;
        let mut entries = Vec::new();
        for (j, m) in measurements.iter().enumerate() {
            let wrap = |e: HispError| HispError::Numerical {
                context: format!("{} against {}: {e}", h.id, m.id),
            };
            let innov = Innovation::new(&h.state, &m.z, sensor).map_err(wrap)?;
            if innov.distance_sq() > gate_threshold {
                continue;
            }
            let app = appearance.likelihood(h.feature.as_ref(), m.feature.as_ref())?;
            let weight =
                w * p_d * association_from_innovation(&innov, sensor, app).map_err(wrap)?;
            if weight <= 0.0 {
                continue;
            }
            entries.push(AssociationEntry {
                column: j,
                weight,
                posterior: Some(correct(&h.state, &innov, sensor).map_err(wrap)?),
                log_ex: f64::NAN,
                log_without: f64::NAN,
            });
        }
        rows.push(HypothesisRow {
            prior_weight: w,
            missed: w * (1.0 - p_d),
            entries,
            log_ex_missed: f64::NAN,
        });
    }

    let u = config.undetected;
    let missed = u.weight * (1.0 - p_d);
    let miss_mass = missed + 1.0 - u.weight;
    let undetected = UndetectedRow {
        weight: u.weight,
        multiplicity: u.multiplicity,
        missed,
        births: vec![miss_mass * birth.birth_ratio(); measurements.len()],
        log_ex_missed: f64::NAN,
        log_ex: vec![f64::NAN; measurements.len()],
    };
    AssociationTable::assemble(
        measurements.iter().map(|m| m.id).collect(),
        vec![sensor.clutter_density; measurements.len()],
        rows,
        undetected,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::tests::{default_birth, hypothesis_at};
    use crate::lingauss::{MeasMatrix, StateMatrix};
    use approx::assert_relative_eq;

    fn sensor() -> SensorModel {
        SensorModel::box_sensor(6.0, 0.9, 10.0, 1920.0, 1080.0)
    }

    fn meas(index: u32, cx: f64, cy: f64) -> Measurement {
        Measurement {
            id: MeasurementId::new(1, index),
            z: MeasurementVector::new(cx, cy, 40.0, 80.0).unwrap(),
            feature: None,
        }
    }

    fn config_with(hyps: &[([f64; 6], f64)]) -> MultiTargetConfiguration {
        let mut c = MultiTargetConfiguration::new(5);
        c.frame = 1;
        for &(mean, w) in hyps {
            c.push_hypothesis(hypothesis_at(mean, w));
        }
        c.undetected.multiplicity = 0.5;
        c.undetected.weight = 1e-7;
        c
    }

    #[test]
    fn default_gate_is_the_chi_square_quantile() {
        assert_relative_eq!(default_gate_threshold(), 18.4668, epsilon = 1e-4);
    }

    #[test]
    fn gate_includes_near_and_excludes_far() {
        let h = hypothesis_at([100.0, 100.0, 0.0, 0.0, 40.0, 80.0], 1.0);
        let ms = [meas(0, 100.0, 100.0), meas(1, 100.0 + 100.0 * 6.0, 100.0)];
        assert_eq!(
            gate(&h, &ms, &sensor(), default_gate_threshold()),
            vec![ms[0].id]
        );
    }

    #[test]
    fn gating_matches_exhaustive_pairwise_count() {
        let hyps: Vec<_> = (0..6)
            .map(|i| {
                (
                    [
                        100.0 + 37.0 * i as f64,
                        200.0 + 11.0 * i as f64,
                        0.0,
                        0.0,
                        40.0,
                        80.0,
                    ],
                    0.9,
                )
            })
            .collect();
        let c = config_with(&hyps);
        let ms: Vec<_> = (0..9)
            .map(|i| meas(i, 95.0 + 23.0 * i as f64, 190.0 + 9.0 * i as f64))
            .collect();
        let s = sensor();
        let thr = default_gate_threshold();
        let mut brute = 0;
        for h in &c.hypotheses {
            // Direct 4×4 evaluation of the innovation distance.
            let cov = s.observation * h.state.cov * s.observation.transpose() + s.noise;
            let inv: MeasMatrix = cov.try_inverse().unwrap();
            for m in &ms {
                let nu = s.observation * h.state.mean - m.z.0;
                if (nu.transpose() * inv * nu)[(0, 0)] <= thr {
                    brute += 1;
                }
            }
        }
        let table = build_association_table(
            &c,
            &ms,
            &s,
            &default_birth(),
            &AppearanceProvider::off(),
            thr,
        )
        .unwrap();
        let stored: usize = table.rows.iter().map(|r| r.entries.len()).sum();
        let gated: usize = c
            .hypotheses
            .iter()
            .map(|h| gate(h, &ms, &s, thr).len())
            .sum();
        assert_eq!(stored, brute);
        assert_eq!(gated, brute);
        assert!(brute > 0);
    }

    #[test]
    fn no_detections_leave_only_miss_entries() {
        let c = config_with(&[([10.0, 10.0, 0.0, 0.0, 40.0, 80.0], 0.8)]);
        let t = build_association_table(
            &c,
            &[],
            &sensor(),
            &default_birth(),
            &AppearanceProvider::off(),
            18.0,
        )
        .unwrap();
        assert!(t.rows[0].entries.is_empty());
        assert_relative_eq!(t.rows[0].miss_mass(), 0.8 * 0.1 + 0.2);
    }

    #[test]
    fn on_target_detection_weight() {
        let mean = [100.0, 100.0, 0.0, 0.0, 40.0, 80.0];
        let c = config_with(&[(mean, 1.0)]);
        let s = sensor();
        let t = build_association_table(
            &c,
            &[meas(0, 100.0, 100.0)],
            &s,
            &default_birth(),
            &AppearanceProvider::off(),
            default_gate_threshold(),
        )
        .unwrap();
        // |R|/|S| with prior variance 10 on each observed axis.
        let ratio = (36.0f64 / 46.0).powi(4);
        assert_relative_eq!(
            t.rows[0].entries[0].weight,
            0.9 * ratio.sqrt(),
            epsilon = 1e-12
        );
        assert_relative_eq!(t.clutter[0], 4.8e-6, max_relative = 0.01);
    }

    #[test]
    fn single_pair_external_weight_is_c_prime() {
        let t = AssociationTable::from_specs(
            vec![MeasurementId::new(1, 0)],
            vec![0.01],
            vec![RowSpec {
                prior_weight: 0.7,
                missed: 0.07,
                hits: vec![(0, 0.4)],
            }],
            UndetectedSpec {
                weight: 0.2,
                multiplicity: 1.5,
                missed: 0.02,
                births: vec![0.05],
            },
        )
        .unwrap();
        let t = external_weights(t);
        let wu_phi: f64 = 0.02 + 0.8;
        let c = 0.05 / wu_phi + 0.01 / 0.99;
        // Empty product over other hypotheses; C' has no C(z') factors left.
        let c_prime = wu_phi.powf(1.5) * 0.99;
        assert_relative_eq!(
            t.external(Pair::Hypothesis(0, Some(0))).unwrap(),
            c_prime,
            max_relative = 1e-12
        );
        assert_relative_eq!(t.constant(0), c, max_relative = 1e-12);
    }

    #[test]
    fn a_zero_bracket_switches_to_the_direct_product() {
        let t = AssociationTable::from_specs(
            vec![MeasurementId::new(1, 0)],
            vec![0.01],
            vec![
                RowSpec {
                    prior_weight: 1.0,
                    missed: 0.0,
                    hits: vec![],
                },
                RowSpec {
                    prior_weight: 0.5,
                    missed: 0.05,
                    hits: vec![(0, 0.3)],
                },
            ],
            UndetectedSpec {
                weight: 0.0,
                multiplicity: 1.0,
                missed: 0.0,
                births: vec![0.01],
            },
        )
        .unwrap();
        let t = external_weights(t);
        assert!(t.fallback_pairs() > 0);
        // Only the zero row's own cells survive.
        assert_eq!(
            t.external(Pair::Hypothesis(1, Some(0))).unwrap(),
            DEFAULT_UNDERFLOW_FLOOR
        );
        assert!(t
            .log_external(Pair::Hypothesis(0, None))
            .unwrap()
            .is_finite());
        let post = t.posterior().unwrap();
        assert!(post.rows[1].collapsed);
        assert_eq!(post.rows[1].missed, 1.0);
    }

    #[test]
    fn rejects_measurements_without_birth_or_clutter_mass() {
        let r = AssociationTable::from_specs(
            vec![MeasurementId::new(1, 0)],
            vec![0.0],
            vec![],
            UndetectedSpec {
                weight: 0.0,
                multiplicity: 0.0,
                missed: 0.0,
                births: vec![0.0],
            },
        );
        assert!(r.is_err());
    }

    #[test]
    fn appearance_scales_the_association_weight() {
        use crate::appearance::{FeaturePolicy, FeatureTable};
        let mean = [100.0, 100.0, 0.0, 0.0, 40.0, 80.0];
        let mut c = config_with(&[(mean, 1.0)]);
        c.hypotheses[0].feature = Some(FeatureVector::new(vec![1.0, 0.0]).unwrap());
        let mut m = meas(0, 100.0, 100.0);
        m.feature = Some(FeatureVector::new(vec![0.0, 1.0]).unwrap());
        let s = sensor();
        let on = AppearanceProvider::precomputed(FeatureTable::new(2), FeaturePolicy::LastMatch);
        let off = AppearanceProvider::off();
        let build = |p: &AppearanceProvider| {
            build_association_table(&c, std::slice::from_ref(&m), &s, &default_birth(), p, 18.0)
                .unwrap()
                .rows[0]
                .entries[0]
                .weight
        };
        assert_relative_eq!(build(&on), 0.5 * build(&off), epsilon = 1e-15);
        let _ = StateMatrix::identity();
    }
}
