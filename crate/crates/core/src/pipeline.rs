//! The per-frame loop and its configuration.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::appearance::{
    AppearanceMode, AppearanceProvider, FeaturePolicy, FeatureTable, ImageDirectory,
};
use crate::error::{HispError, Result};
use crate::extraction::{Extractor, FrameEstimates, TrackSet};
use crate::filter::{
    build_association_table, default_gate_threshold, external_weights, predict, update, BirthModel,
    Measurement, MeasurementId, MultiTargetConfiguration, Slot, DEFAULT_UNDERFLOW_FLOOR,
};
use crate::io::{nms, read_detections, write_tracks, Detection, DetectionFile};
use crate::lingauss::{MotionModel, SensorModel, StateMatrix, StateVector};
use crate::management::{merge_densities, merge_same_path, prune, PruneMergeConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::simulator::{simulate, Preset, Scenario, ScenarioSpec};

/// Every tunable of a run. Keys of a config file mirror these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sigma_v: f64,
    pub sigma_r: f64,
    pub dt: f64,
    pub survival_prob: f64,
    pub detection_prob: f64,
    /// Mean number of false alarms per frame.
    pub clutter_mean: f64,
    /// Mean number of new objects per frame.
    pub birth_mean: f64,
    pub birth_cov_diag: [f64; 6],
    pub birth_scale: f64,
    pub prune_threshold: f64,
    pub merge_distance: f64,
    pub max_hypotheses: usize,
    pub window: u32,
    pub frame_width: f64,
    pub frame_height: f64,
    /// Squared Mahalanobis gate; defaults to the 0.999 χ² quantile.
    pub gate_threshold: Option<f64>,
    pub underflow_floor: f64,
    pub solver_timeout_ms: u64,
    pub appearance: AppearanceMode,
    pub feature_policy: FeaturePolicy,
    /// Feature table for `precomputed` appearance.
    pub features: Option<PathBuf>,
    /// Frame images for `histogram` appearance.
    pub images: Option<PathBuf>,
    /// Optional NMS applied to every frame before tracking.
    pub nms_threshold: Option<f64>,
    /// Disables output extraction; the filter runs unchanged.
    pub extract: bool,
    /// Sequence length; defaults to the last frame with a detection.
    pub frames: Option<u32>,
    pub seed: u64,
    pub det: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sigma_v: 5.0,
            sigma_r: 6.0,
            dt: 1.0,
            survival_prob: 0.99,
            detection_prob: 0.9,
            clutter_mean: 10.0,
            birth_mean: 0.1,
            birth_cov_diag: [100.0, 100.0, 25.0, 25.0, 20.0, 20.0],
            birth_scale: 1.0,
            prune_threshold: 1e-3,
            merge_distance: 4.0,
            max_hypotheses: 10_000_000,
            window: 5,
            frame_width: 1920.0,
            frame_height: 1080.0,
            gate_threshold: None,
            underflow_floor: DEFAULT_UNDERFLOW_FLOOR,
            solver_timeout_ms: 500,
            appearance: AppearanceMode::Off,
            feature_policy: FeaturePolicy::LastMatch,
            features: None,
            images: None,
            nms_threshold: None,
            extract: true,
            frames: None,
            seed: 0,
            det: None,
            out: None,
            diagnostics: None,
        }
    }
}

/// Model objects derived from a [`RunConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSuite {
    pub motion: MotionModel,
    pub sensor: SensorModel,
    pub birth: BirthModel,
    pub prune_merge: PruneMergeConfig,
    pub gate_threshold: f64,
}

impl RunConfig {
    /// Tracker settings matched to a simulated scenario.
    pub fn for_scenario(spec: &ScenarioSpec) -> Self {
        Self {
            sigma_r: spec.sigma_r.max(1.0),
            detection_prob: spec.detection_prob.min(0.98),
            clutter_mean: spec.clutter_mean,
            frame_width: spec.frame_width,
            frame_height: spec.frame_height,
            frames: Some(spec.frames),
            seed: spec.seed,
            ..Self::default()
        }
    }

    pub fn models(&self) -> Result<ModelSuite> {
        let motion = MotionModel::constant_velocity(self.dt, self.sigma_v, self.survival_prob);
        motion.validate()?;
        let sensor = SensorModel::box_sensor(
            self.sigma_r,
            self.detection_prob,
            self.clutter_mean,
            self.frame_width,
            self.frame_height,
        );
        sensor.validate(&motion)?;
        let mut birth = BirthModel::uniform(
            self.birth_mean,
            sensor.frame_area(),
            StateMatrix::from_diagonal(&StateVector::from_column_slice(&self.birth_cov_diag)),
        );
        birth.birth_scale = self.birth_scale;
        birth.validate()?;
        let prune_merge = PruneMergeConfig {
            prune_threshold: self.prune_threshold,
            merge_distance: self.merge_distance,
            max_hypotheses: self.max_hypotheses,
            window: self.window,
        };
        prune_merge.validate()?;
        let gate_threshold = self.gate_threshold.unwrap_or_else(default_gate_threshold);
        if !(gate_threshold > 0.0) {
            return Err(HispError::Config("gate_threshold must be positive".into()));
        }
        if !(self.sigma_v >= 0.0 && self.sigma_r > 0.0 && self.dt > 0.0) {
            return Err(HispError::Config(
                "sigma_r and dt must be positive, sigma_v non-negative".into(),
            ));
        }
        if !(self.underflow_floor > 0.0 && self.underflow_floor < 1.0) {
            return Err(HispError::Config(
                "underflow_floor must lie in (0, 1)".into(),
            ));
        }
        if let Some(t) = self.nms_threshold {
            if !(t > 0.0 && t < 1.0) {
                return Err(HispError::Config("nms_threshold must lie in (0, 1)".into()));
            }
        }
        Ok(ModelSuite {
            motion,
            sensor,
            birth,
            prune_merge,
            gate_threshold,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.models().map(|_| ())
    }

    /// Feature provider named by the config's appearance settings.
    pub fn appearance_provider(&self) -> Result<AppearanceProvider> {
        match self.appearance {
            AppearanceMode::Off => Ok(AppearanceProvider::off()),
            AppearanceMode::Precomputed => {
                let path = self.features.as_ref().ok_or_else(|| {
                    HispError::Config("precomputed appearance needs a `features` file".into())
                })?;
                Ok(AppearanceProvider::precomputed(
                    FeatureTable::read(path)?,
                    self.feature_policy,
                ))
            }
            AppearanceMode::Histogram => {
                let dir = self.images.as_ref().ok_or_else(|| {
                    HispError::Config("histogram appearance needs an `images` directory".into())
                })?;
                Ok(AppearanceProvider::histogram(
                    Box::new(ImageDirectory::new(dir)),
                    self.feature_policy,
                ))
            }
        }
    }
}

/// Per-frame record written as one JSON line.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FrameDiagnostics {
    pub frame: u32,
    pub detections: usize,
    pub hypotheses: usize,
    pub total_weight: f64,
    pub undetected_weight: f64,
    pub undetected_multiplicity: f64,
    pub graveyard: usize,
    pub newborns: usize,
    pub merged: usize,
    pub max_row_deviation: f64,
    pub collapsed_rows: usize,
    pub underflows: usize,
    pub fallback_pairs: usize,
    pub solver_timed_out: bool,
    pub solver_objective: f64,
    pub candidates: usize,
    pub reported: usize,
}

/// Online tracker state.
#[derive(Debug)]
pub struct Tracker {
    models: ModelSuite,
    underflow_floor: f64,
    appearance: AppearanceProvider,
    config: MultiTargetConfiguration,
    extractor: Option<Extractor>,
    nms_threshold: Option<f64>,
}

/// What one call to [`Tracker::step`] produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub estimates: Option<FrameEstimates>,
    pub diagnostics: FrameDiagnostics,
}

impl Tracker {
    pub fn new(run: &RunConfig, appearance: AppearanceProvider) -> Result<Self> {
        let models = run.models()?;
        let extractor = run
            .extract
            .then(|| Extractor::new(run.window, Duration::from_millis(run.solver_timeout_ms)));
        Ok(Self {
            config: MultiTargetConfiguration::new(run.window),
            models,
            underflow_floor: run.underflow_floor,
            appearance,
            extractor,
            nms_threshold: run.nms_threshold,
        })
    }

    pub fn configuration(&self) -> &MultiTargetConfiguration {
        &self.config
    }

    pub fn models(&self) -> &ModelSuite {
        &self.models
    }

    /// Processes the next frame. Frames must be consecutive starting at 1.
    pub fn step(&mut self, frame: u32, detections: &[Detection]) -> Result<StepOutput> {
        self.step_inner(frame, detections)
            .map_err(|e| e.at_frame(frame))
    }

    fn step_inner(&mut self, frame: u32, detections: &[Detection]) -> Result<StepOutput> {
        if frame != self.config.frame + 1 {
            return Err(HispError::FrameRange(format!(
                "expected frame {}, got {frame}",
                self.config.frame + 1
            )));
        }
        let kept;
        let detections = match self.nms_threshold {
            Some(t) => {
                kept = nms(detections, t);
                &kept[..]
            }
            None => detections,
        };
        let features = self.appearance.features_for_frame(frame, detections)?;
        let measurements = detections
            .iter()
            .zip(features)
            .map(|(d, feature)| {
                Ok(Measurement {
                    id: MeasurementId::new(frame, d.det_index),
                    z: d.bbox.measurement()?,
                    feature,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let m = &self.models;
        let predicted = predict(&self.config, &m.motion, &m.birth)?;
        let mut table = build_association_table(
            &predicted,
            &measurements,
            &m.sensor,
            &m.birth,
            &self.appearance,
            m.gate_threshold,
        )?;
        table.set_underflow_floor(self.underflow_floor);
        let table = external_weights(table);
        let (updated, report) = update(
            &predicted,
            &measurements,
            &table,
            &m.birth,
            self.appearance.policy(),
        )?;
        let pruned = prune(&updated, &m.prune_merge);
        let (merged, rule2) = merge_densities(&pruned, &m.prune_merge);
        let (merged, rule3) = merge_same_path(&merged);
        self.config = merged;

        let estimates = match &mut self.extractor {
            Some(ex) => Some(ex.extract(&self.config)?),
            None => None,
        };
        let c = &self.config;
        let diagnostics = FrameDiagnostics {
            frame,
            detections: measurements.len(),
            hypotheses: c.hypotheses.len(),
            total_weight: c.total_weight(),
            undetected_weight: c.undetected.weight,
            undetected_multiplicity: c.undetected.multiplicity,
            graveyard: c.graveyard.len(),
            newborns: report.newborns,
            merged: rule2.merged + rule3.merged,
            max_row_deviation: report.max_row_deviation,
            collapsed_rows: report.collapsed_rows,
            underflows: report.underflows,
            fallback_pairs: report.fallback_pairs,
            solver_timed_out: estimates.as_ref().is_some_and(|e| e.timed_out),
            solver_objective: estimates.as_ref().map_or(0.0, |e| e.objective),
            candidates: estimates.as_ref().map_or(0, |e| e.candidates),
            reported: estimates.as_ref().map_or(0, |e| e.boxes.len()),
        };
        if diagnostics.solver_timed_out {
            tracing::warn!(
                frame,
                "extraction timed out; reporting the best selection found"
            );
        }
        tracing::debug!(frame, hypotheses = diagnostics.hypotheses, "frame done");
        Ok(StepOutput {
            estimates,
            diagnostics,
        })
    }

    /// Hypotheses of the current configuration as JSON.
    pub fn snapshot(&self) -> serde_json::Value {
        let c = &self.config;
        let hyps: Vec<serde_json::Value> = c
            .hypotheses
            .iter()
            .map(|h| {
                let path: String = h
                    .path
                    .slots()
                    .iter()
                    .map(|s| match s {
                        Slot::Missed => "-".to_string(),
                        Slot::Detected(i) => i.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                serde_json::json!({
                    "id": h.id.0,
                    "weight": h.weight,
                    "origin": h.origin.to_string(),
                    "path_start": h.path.start_frame(),
                    "path": path,
                    "mean": h.state.mean.as_slice(),
                })
            })
            .collect();
        serde_json::json!({
            "frame": c.frame,
            "undetected": { "weight": c.undetected.weight, "multiplicity": c.undetected.multiplicity },
            "graveyard": c.graveyard.len(),
            "hypotheses": hyps,
        })
    }
}

/// Tracks and diagnostics of a whole sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutput {
    pub tracks: TrackSet,
    pub diagnostics: Vec<FrameDiagnostics>,
}

/// Runs the tracker over frames `1..=last` of a detection file.
pub fn run_tracker(
    run: &RunConfig,
    detections: &DetectionFile,
    appearance: AppearanceProvider,
) -> Result<RunOutput> {
    run_tracker_with(run, detections, appearance, |_| Ok(()))
}

/// Like [`run_tracker`], calling `observe` after every frame.
pub fn run_tracker_with(
    run: &RunConfig,
    detections: &DetectionFile,
    appearance: AppearanceProvider,
    mut observe: impl FnMut(&Tracker) -> Result<()>,
) -> Result<RunOutput> {
    let mut tracker = Tracker::new(run, appearance)?;
    let last = run.frames.or(detections.last_frame()).unwrap_or(0);
    let mut out = RunOutput::default();
    for frame in 1..=last {
        let step = tracker.step(frame, detections.frame(frame))?;
        if let Some(est) = step.estimates {
            for (label, b) in est.boxes {
                out.tracks.insert(label, frame, b);
            }
        }
        out.diagnostics.push(step.diagnostics);
        observe(&tracker)?;
    }
    Ok(out)
}

/// Reads `run.det`, tracks, and writes `run.out` and `run.diagnostics` when set.
pub fn run_from_files(run: &RunConfig) -> Result<RunOutput> {
    let det = run
        .det
        .as_ref()
        .ok_or_else(|| HispError::Config("a detection file is required".into()))?;
    let detections = read_detections(det)?;
    if detections.dropped > 0 {
        tracing::warn!(
            dropped = detections.dropped,
            "rows with non-positive size were dropped"
        );
    }
    let output = run_tracker(run, &detections, run.appearance_provider()?)?;
    if let Some(path) = &run.out {
        write_tracks(&output.tracks, path)?;
    }
    if let Some(path) = &run.diagnostics {
        write_json_lines(path, &output.diagnostics)?;
    }
    Ok(output)
}

pub fn write_json_lines<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| HispError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Tracks a simulated scenario with the given appearance mode.
pub fn track_scenario(
    run: &RunConfig,
    scenario: &Scenario,
    mode: AppearanceMode,
) -> Result<RunOutput> {
    let provider = match mode {
        AppearanceMode::Off => AppearanceProvider::off(),
        AppearanceMode::Precomputed => AppearanceProvider::precomputed(
            scenario
                .features
                .clone()
                .ok_or_else(|| HispError::Config("scenario has no feature table".into()))?,
            run.feature_policy,
        ),
        AppearanceMode::Histogram => {
            AppearanceProvider::histogram(Box::new(scenario.frames.clone()), run.feature_policy)
        }
    };
    run_tracker(run, &scenario.detections, provider)
}

/// One cell of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub detection_prob: f64,
    pub clutter_mean: f64,
    pub seed: u64,
    pub mota: f64,
    pub motp: f64,
    pub idf1: f64,
    pub idsw: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Simulates and tracks every `(p_d, clutter)` pair of the grid for each seed.
pub fn sweep(
    base: &RunConfig,
    preset: Preset,
    seeds: &[u64],
    detection_probs: &[f64],
    clutter_means: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &p_d in detection_probs {
        for &clutter in clutter_means {
            for &seed in seeds {
                let mut spec = ScenarioSpec::preset(preset, seed);
                spec.detection_prob = p_d;
                spec.clutter_mean = clutter;
                let scenario = simulate(&spec)?;
                let run = RunConfig {
                    detection_prob: p_d,
                    clutter_mean: clutter,
                    frames: Some(spec.frames),
                    frame_width: spec.frame_width,
                    frame_height: spec.frame_height,
                    ..base.clone()
                };
                let out = track_scenario(&run, &scenario, AppearanceMode::Off)?;
                let r: EvalReport =
                    evaluate(&out.tracks, &scenario.truth, 0.5, Some((1, spec.frames)))?;
                rows.push(SweepRow {
                    detection_prob: p_d,
                    clutter_mean: clutter,
                    seed,
                    mota: r.mota,
                    motp: r.motp,
                    idf1: r.idf1,
                    idsw: r.idsw,
                    fp: r.fp,
                    fn_: r.fn_,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::BBox;

    #[test]
    fn defaults_validate_and_match_the_reference_values() {
        let run = RunConfig::default();
        let m = run.models().unwrap();
        assert_eq!(m.sensor.detection_prob, 0.9);
        assert_eq!(m.motion.survival_prob, 0.99);
        assert!((m.sensor.clutter_density - 4.8e-6).abs() < 0.05e-6);
        assert_eq!(m.prune_merge, PruneMergeConfig::default());
    }

    #[test]
    fn detection_above_survival_is_rejected() {
        let run = RunConfig {
            detection_prob: 0.995,
            ..RunConfig::default()
        };
        assert!(matches!(run.validate(), Err(HispError::Config(_))));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let run = RunConfig::default();
        let json = serde_json::to_string(&run).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), run);
        assert!(serde_json::from_str::<RunConfig>(r#"{"p_d": 0.5}"#).is_err());
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let run = RunConfig {
            frames: Some(10),
            ..RunConfig::default()
        };
        let out = run_tracker(&run, &DetectionFile::default(), AppearanceProvider::off()).unwrap();
        assert!(out.tracks.is_empty());
        assert_eq!(out.diagnostics.len(), 10);
    }

    #[test]
    fn frames_must_be_consecutive() {
        let mut t = Tracker::new(&RunConfig::default(), AppearanceProvider::off()).unwrap();
        let err = t.step(2, &[]).unwrap_err();
        assert!(matches!(err, HispError::AtFrame { frame: 2, .. }));
    }

    #[test]
    fn a_steady_target_is_reported_with_one_label() {
        let mut dets = DetectionFile::default();
        for f in 1..=15 {
            dets.push(
                f,
                BBox::new(500.0 + 2.0 * f as f64, 400.0, 40.0, 100.0),
                0.9,
            );
        }
        let out = run_tracker(&RunConfig::default(), &dets, AppearanceProvider::off()).unwrap();
        assert_eq!(out.tracks.num_tracks(), 1);
        assert!(out.tracks.len() >= 13);
    }
}
