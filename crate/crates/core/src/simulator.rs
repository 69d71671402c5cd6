//! Synthetic scenarios: ground truth, detections and appearance features.
//!
//! Random draws come from ChaCha8 generators seeded with the scenario seed,
//! one stream per purpose (motion, detection, measurement noise, clutter,
//! pixel noise), so changing one part of a scenario never shifts the draws
//! of another.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::appearance::{color_histogram, FeatureTable, FrameSource, HISTOGRAM_DIM};
use crate::error::{HispError, Result};
use crate::extraction::{BoxEstimate, TrackSet};
use crate::io::{BBox, DetectionFile};
use crate::lingauss::{MotionModel, StateMatrix, StateVector};

const STREAM_MOTION: u64 = 1;
const STREAM_DETECTION: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_CLUTTER: u64 = 4;

/// Smallest simulated box side, in pixels.
const MIN_SIDE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    /// First frame the target exists (1-based).
    pub birth: u32,
    /// Last frame the target exists.
    pub death: u32,
    /// `[cx, cy, vx, vy, w, h]` at the birth frame.
    pub initial: [f64; 6],
    /// Fill colour when rendering; also the source of its appearance.
    #[serde(default)]
    pub color: Option<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub frame_width: f64,
    pub frame_height: f64,
    pub frames: u32,
    pub targets: Vec<TargetSpec>,
    /// Process noise of the true motion.
    pub sigma_v: f64,
    pub sigma_r: f64,
    pub detection_prob: f64,
    pub clutter_mean: f64,
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_dt() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Five well-separated targets, high detection probability, little clutter.
    Easy,
    /// Two differently coloured targets crossing slowly in heavy clutter.
    Hard,
}

impl std::str::FromStr for Preset {
    type Err = HispError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::Easy),
            "hard" => Ok(Self::Hard),
            other => Err(HispError::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl ScenarioSpec {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        match preset {
            Preset::Easy => {
                let t = |birth, death, cx, cy, vx, vy| TargetSpec {
                    birth,
                    death,
                    initial: [cx, cy, vx, vy, 40.0, 100.0],
                    color: None,
                };
                Self {
                    frame_width: 1920.0,
                    frame_height: 1080.0,
                    frames: 200,
                    targets: vec![
                        t(1, 200, 250.0, 250.0, 1.0, 0.5),
                        t(1, 200, 650.0, 750.0, -0.5, -0.5),
                        t(1, 160, 1000.0, 300.0, 0.5, 1.0),
                        t(20, 200, 1350.0, 800.0, -1.0, -0.5),
                        t(40, 200, 1700.0, 350.0, -0.5, 0.8),
                    ],
                    sigma_v: 0.05,
                    sigma_r: 6.0,
                    detection_prob: 0.95,
                    clutter_mean: 2.0,
                    seed,
                    dt: 1.0,
                }
            }
            Preset::Hard => Self {
                frame_width: 1920.0,
                frame_height: 1080.0,
                frames: 200,
                targets: vec![
                    TargetSpec {
                        birth: 1,
                        death: 200,
                        initial: [950.0, 520.0, 0.5, 0.0, 40.0, 100.0],
                        color: Some([220, 40, 40]),
                    },
                    TargetSpec {
                        birth: 1,
                        death: 200,
                        initial: [1050.0, 560.0, -0.5, 0.0, 40.0, 100.0],
                        color: Some([40, 60, 220]),
                    },
                ],
                sigma_v: 0.0,
                sigma_r: 6.0,
                detection_prob: 0.85,
                clutter_mean: 10.0,
                seed,
                dt: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_width > 0.0 && self.frame_height > 0.0) {
            return Err(HispError::Config("frame size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.detection_prob) {
            return Err(HispError::Config(
                "detection probability outside [0, 1]".into(),
            ));
        }
        if !(self.sigma_v >= 0.0
            && self.sigma_r >= 0.0
            && self.clutter_mean >= 0.0
            && self.dt > 0.0)
        {
            return Err(HispError::Config(
                "noise levels and clutter mean must be non-negative".into(),
            ));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if t.birth < 1 || t.birth > t.death {
                return Err(HispError::Config(format!(
                    "target {i} dies before it is born"
                )));
            }
            if !(t.initial[4] > 0.0 && t.initial[5] > 0.0)
                || t.initial.iter().any(|v| !v.is_finite())
            {
                return Err(HispError::Config(format!(
                    "target {i} has an invalid initial state"
                )));
            }
        }
        Ok(())
    }
}

/// Everything a simulation run produces.
#[derive(Debug, Clone)]
pub struct Scenario {
    /// Visible true boxes, labelled by target index + 1.
    pub truth: TrackSet,
    pub detections: DetectionFile,
    /// Histogram feature per detection, present when any target is coloured.
    pub features: Option<FeatureTable>,
    pub frames: SyntheticFrames,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// A square root of a PSD matrix, tolerant of zero eigenvalues.
fn psd_sqrt(m: &StateMatrix) -> StateMatrix {
    let eig = SymmetricEigen::new(*m);
    let d = StateMatrix::from_diagonal(&eig.eigenvalues.map(|e| e.max(0.0).sqrt()));
    eig.eigenvectors * d
}

fn visible(b: &BBox, width: f64, height: f64) -> bool {
    b.left() < width && b.top() < height && b.left() + b.w > 0.0 && b.top() + b.h > 0.0
}

pub fn simulate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let motion = MotionModel::constant_velocity(spec.dt, spec.sigma_v, 1.0);
    let q_sqrt = psd_sqrt(&motion.process_noise);
    let mut motion_rng = rng(spec.seed, STREAM_MOTION);
    let mut detect_rng = rng(spec.seed, STREAM_DETECTION);
    let mut noise_rng = rng(spec.seed, STREAM_NOISE);
    let mut clutter_rng = rng(spec.seed, STREAM_CLUTTER);
    let meas_noise =
        Normal::new(0.0, spec.sigma_r).map_err(|e| HispError::Config(e.to_string()))?;

    let mut states: Vec<Option<StateVector>> = vec![None; spec.targets.len()];
    let mut truth = TrackSet::default();
    let mut detections = DetectionFile::default();
    let mut frames =
        SyntheticFrames::new(spec.frame_width as u32, spec.frame_height as u32, spec.seed);

    for frame in 1..=spec.frames {
        for (i, target) in spec.targets.iter().enumerate() {
            if frame < target.birth || frame > target.death {
                states[i] = None;
                continue;
            }
            let next = match states[i] {
                None => StateVector::from_column_slice(&target.initial),
                Some(x) => {
                    let w =
                        StateVector::from_fn(|_, _| motion_rng.sample::<f64, _>(StandardNormal));
                    let mut x = motion.transition * x + q_sqrt * w;
                    x[4] = x[4].max(MIN_SIDE);
                    x[5] = x[5].max(MIN_SIDE);
                    x
                }
            };
            states[i] = Some(next);
            let bbox = BBox::new(next[0], next[1], next[4], next[5]);
            if !visible(&bbox, spec.frame_width, spec.frame_height) {
                continue;
            }
            truth.insert(
                i as u64 + 1,
                frame,
                BoxEstimate {
                    bbox,
                    confidence: 1.0,
                },
            );
            frames.add_box(frame, bbox, target.color.unwrap_or([128, 128, 128]));
            if detect_rng.random::<f64>() < spec.detection_prob {
                let z = BBox::new(
                    bbox.cx + meas_noise.sample(&mut noise_rng),
                    bbox.cy + meas_noise.sample(&mut noise_rng),
                    (bbox.w + meas_noise.sample(&mut noise_rng)).max(1.0),
                    (bbox.h + meas_noise.sample(&mut noise_rng)).max(1.0),
                );
                if visible(&z, spec.frame_width, spec.frame_height) {
                    detections.push(frame, z, 0.9);
                }
            }
        }
        let n_clutter = if spec.clutter_mean > 0.0 {
            let p =
                Poisson::new(spec.clutter_mean).map_err(|e| HispError::Config(e.to_string()))?;
            p.sample(&mut clutter_rng) as usize
        } else {
            0
        };
        for _ in 0..n_clutter {
            let w = clutter_rng.random_range(20.0..60.0);
            let h = w * clutter_rng.random_range(1.5..3.0);
            let bbox = BBox::new(
                clutter_rng.random_range(0.0..spec.frame_width),
                clutter_rng.random_range(0.0..spec.frame_height),
                w,
                h,
            );
            let conf = clutter_rng.random_range(0.2..0.9);
            detections.push(frame, bbox, conf);
        }
    }

    let features = if spec.targets.iter().any(|t| t.color.is_some()) {
        let mut table = FeatureTable::new(HISTOGRAM_DIM);
        for (&frame, dets) in &detections.frames {
            for d in dets {
                table.insert(
                    frame,
                    d.det_index,
                    color_histogram(&frames.crop(frame, &d.bbox)?)?,
                )?;
            }
        }
        Some(table)
    } else {
        None
    };

    Ok(Scenario {
        truth,
        detections,
        features,
        frames,
    })
}

/// Procedurally rendered frames: coloured target boxes on a noisy gray
/// background. Only the requested crops are ever rasterised.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrames {
    width: u32,
    height: u32,
    seed: u64,
    boxes: BTreeMap<u32, Vec<(BBox, [u8; 3])>>,
}

impl SyntheticFrames {
    pub fn new(width: u32, height: u32, seed: u64) -> Self {
        Self {
            width,
            height,
            seed,
            boxes: BTreeMap::new(),
        }
    }

    pub fn add_box(&mut self, frame: u32, bbox: BBox, color: [u8; 3]) {
        self.boxes.entry(frame).or_default().push((bbox, color));
    }

    fn pixel(&self, frame: u32, x: u32, y: u32) -> Rgb<u8> {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let base = self
            .boxes
            .get(&frame)
            .and_then(|bs| {
                bs.iter().rev().find(|(b, _)| {
                    px >= b.left() && px < b.left() + b.w && py >= b.top() && py < b.top() + b.h
                })
            })
            .map_or([128, 128, 128], |(_, c)| *c);
        let mut h = splitmix(self.seed ^ ((frame as u64) << 40) ^ ((y as u64) << 20) ^ x as u64);
        let mut out = [0u8; 3];
        for (o, b) in out.iter_mut().zip(base) {
            h = splitmix(h);
            let jitter = (h % 21) as i32 - 10;
            *o = (b as i32 + jitter).clamp(0, 255) as u8;
        }
        Rgb(out)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl FrameSource for SyntheticFrames {
    fn crop(&self, frame: u32, bbox: &BBox) -> Result<RgbImage> {
        let (l, t, r, b) = bbox.pixel_bounds(self.width, self.height);
        if r <= l || b <= t {
            return Err(HispError::EmptyCrop { frame });
        }
        Ok(RgbImage::from_fn(r - l, b - t, |x, y| {
            self.pixel(frame, l + x, t + y)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{read_tracks, write_tracks};

    fn single_target(p_d: f64, clutter: f64, sigma_r: f64) -> ScenarioSpec {
        ScenarioSpec {
            frame_width: 640.0,
            frame_height: 480.0,
            frames: 50,
            targets: vec![TargetSpec {
                birth: 1,
                death: 50,
                initial: [100.0, 100.0, 2.0, 1.0, 30.0, 60.0],
                color: None,
            }],
            sigma_v: 0.0,
            sigma_r,
            detection_prob: p_d,
            clutter_mean: clutter,
            seed: 3,
            dt: 1.0,
        }
    }

    #[test]
    fn noiseless_detections_equal_the_truth() {
        let s = simulate(&single_target(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(s.detections.len(), 50);
        for (frame, _, est) in s.truth.rows() {
            let d = s.detections.frame(frame);
            assert_eq!(d.len(), 1);
            assert_eq!(d[0].bbox, est.bbox);
        }
        let last = s.truth.track(1).unwrap()[&50].bbox;
        assert_eq!((last.cx, last.cy), (100.0 + 2.0 * 49.0, 100.0 + 49.0));
    }

    #[test]
    fn clutter_count_matches_its_mean() {
        let mut spec = single_target(0.0, 10.0, 1.0);
        spec.frames = 10_000;
        spec.targets.clear();
        let s = simulate(&spec).unwrap();
        let mean = s.detections.len() as f64 / 10_000.0;
        assert!((mean - 10.0).abs() < 0.1, "mean clutter {mean}");
    }

    #[test]
    fn detection_rate_within_binomial_bounds() {
        let mut spec = single_target(0.8, 0.0, 1.0);
        spec.frames = 3000;
        spec.targets[0].death = 3000;
        spec.targets[0].initial = [320.0, 240.0, 0.0, 0.0, 30.0, 60.0];
        let s = simulate(&spec).unwrap();
        let n = s.truth.len() as f64;
        let rate = s.detections.len() as f64 / n;
        let sd = (0.8 * 0.2 / n).sqrt();
        assert!((rate - 0.8).abs() < 3.0 * sd, "rate {rate}");
    }

    #[test]
    fn same_seed_same_output() {
        let spec = ScenarioSpec::preset(Preset::Hard, 11);
        let (a, b) = (simulate(&spec).unwrap(), simulate(&spec).unwrap());
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.features, b.features);
        let other = simulate(&ScenarioSpec::preset(Preset::Hard, 12)).unwrap();
        assert_ne!(a.detections, other.detections);
    }

    #[test]
    fn truth_round_trips_through_files() {
        let s = simulate(&ScenarioSpec::preset(Preset::Easy, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.txt");
        write_tracks(&s.truth, &p).unwrap();
        assert!(read_tracks(&p).unwrap().approx_eq(&s.truth, 1e-12));
    }

    #[test]
    fn targets_leaving_the_frame_are_not_detected() {
        let mut spec = single_target(1.0, 0.0, 0.0);
        spec.targets[0].initial = [600.0, 100.0, 20.0, 0.0, 30.0, 60.0];
        let s = simulate(&spec).unwrap();
        assert!(s.truth.len() < 50);
        assert_eq!(s.detections.len(), s.truth.len());
    }

    #[test]
    fn coloured_targets_have_distinct_features() {
        let s = simulate(&ScenarioSpec::preset(Preset::Hard, 2)).unwrap();
        let table = s.features.as_ref().unwrap();
        let red = s
            .frames
            .crop(1, &s.truth.track(1).unwrap()[&1].bbox)
            .unwrap();
        let blue = s
            .frames
            .crop(1, &s.truth.track(2).unwrap()[&1].bbox)
            .unwrap();
        let (fr, fb) = (
            color_histogram(&red).unwrap(),
            color_histogram(&blue).unwrap(),
        );
        let c = crate::appearance::cosine_similarity(&fr, &fb).unwrap();
        assert!(c < 0.05, "similarity {c}");
        assert_eq!(table.len(), s.detections.len());
    }
}
