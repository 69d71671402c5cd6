//! Appearance features and the appearance likelihood.
//!
//! Features come either from a precomputed table (one row per detection) or
//! from an RGB joint colour histogram of the detection crop. The likelihood
//! maps the cosine similarity `c` of two features to `e^c / (e^c + e^-c)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{HispError, Result};
use crate::io::{BBox, Detection};

/// Number of bins per colour channel of the histogram extractor.
pub const HISTOGRAM_BINS_PER_CHANNEL: usize = 8;
pub const HISTOGRAM_DIM: usize =
    HISTOGRAM_BINS_PER_CHANNEL * HISTOGRAM_BINS_PER_CHANNEL * HISTOGRAM_BINS_PER_CHANNEL;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HispError::Config("non-finite feature entry".into()));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(HispError::ZeroNorm);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine_similarity(a: &FeatureVector, b: &FeatureVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(HispError::FeatureLength {
            left: a.len(),
            right: b.len(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(HispError::ZeroNorm);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `e^c / (e^c + e^-c)`, written as the logistic of `2c`.
pub fn appearance_likelihood(c: f64) -> f64 {
    1.0 / (1.0 + (-2.0 * c).exp())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AppearanceMode {
    #[default]
    Off,
    Precomputed,
    Histogram,
}

/// How a hypothesis refreshes its stored feature after a detection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FeaturePolicy {
    #[default]
    LastMatch,
    /// `alpha · old + (1 − alpha) · new`
    Ema { alpha: f64 },
}

pub fn hypothesis_feature_update(
    old: &FeatureVector,
    matched: &FeatureVector,
    policy: FeaturePolicy,
) -> Result<FeatureVector> {
    if old.len() != matched.len() {
        return Err(HispError::FeatureLength {
            left: old.len(),
            right: matched.len(),
        });
    }
    match policy {
        FeaturePolicy::LastMatch => Ok(matched.clone()),
        FeaturePolicy::Ema { alpha } => {
            let blended = old
                .0
                .iter()
                .zip(&matched.0)
                .map(|(o, n)| alpha * o + (1.0 - alpha) * n)
                .collect();
            // A cancelling blend keeps the previous feature.
            FeatureVector::new(blended).or_else(|_| Ok(old.clone()))
        }
    }
}

/// Precomputed features keyed by `(frame, det_index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: BTreeMap<(u32, u32), FeatureVector>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, frame: u32, index: u32, feature: FeatureVector) -> Result<()> {
        if feature.len() != self.dim {
            return Err(HispError::FeatureLength {
                left: self.dim,
                right: feature.len(),
            });
        }
        self.rows.insert((frame, index), feature);
        Ok(())
    }

    pub fn get(&self, frame: u32, index: u32) -> Option<&FeatureVector> {
        self.rows.get(&(frame, index))
    }

    /// Reads the `#dim=D` preamble, the header and the rows.
    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let parse_err = |line: usize, message: String| HispError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = reader.lines().enumerate();
        let dim = match lines.next() {
            Some((_, l)) => {
                let l = l?;
                l.trim()
                    .strip_prefix("#dim=")
                    .and_then(|d| d.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(1, format!("expected `#dim=D`, got {l:?}")))?
            }
            None => return Err(parse_err(1, "missing `#dim=D` preamble".into())),
        };
        let mut table = FeatureTable::new(dim);
        let header = lines.next().map(|(_, l)| l).transpose()?;
        if !header.is_some_and(|h| h.starts_with("frame,det_index")) {
            return Err(parse_err(2, "missing header row".into()));
        }
        for (i, line) in lines {
            let line = line?;
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(parse_err(
                    line_no,
                    format!("expected {} columns, found {}", dim + 2, fields.len()),
                ));
            }
            let frame = fields[0]
                .trim()
                .parse::<u32>()
                .map_err(|e| parse_err(line_no, format!("frame: {e}")))?;
            let index = fields[1]
                .trim()
                .parse::<u32>()
                .map_err(|e| parse_err(line_no, format!("det_index: {e}")))?;
            let values = fields[2..]
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(line_no, format!("feature value: {e}")))?;
            let feature =
                FeatureVector::new(values).map_err(|e| parse_err(line_no, e.to_string()))?;
            table.insert(frame, index, feature)?;
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "#dim={}", self.dim)?;
        write!(out, "frame,det_index")?;
        for i in 0..self.dim {
            write!(out, ",f{i}")?;
        }
        writeln!(out)?;
        for ((frame, index), f) in &self.rows {
            write!(out, "{frame},{index}")?;
            for v in f.values() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Source of image crops for the histogram extractor.
pub trait FrameSource: Send + Sync {
    /// Pixels of `bbox` in `frame`, clipped to the image.
    fn crop(&self, frame: u32, bbox: &BBox) -> Result<RgbImage>;
}

/// Frames stored as `{dir}/{frame:06}.jpg` or `.png` (MOT `img1` layout).
pub struct ImageDirectory {
    dir: PathBuf,
    cache: Mutex<Option<(u32, RgbImage)>>,
}

impl ImageDirectory {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            cache: Mutex::new(None),
        }
    }

    fn frame_path(&self, frame: u32) -> Option<PathBuf> {
        ["jpg", "png", "jpeg"]
            .iter()
            .map(|ext| self.dir.join(format!("{frame:06}.{ext}")))
            .find(|p| p.exists())
    }
}

impl FrameSource for ImageDirectory {
    fn crop(&self, frame: u32, bbox: &BBox) -> Result<RgbImage> {
        let mut cache = self.cache.lock().expect("frame cache poisoned");
        if cache.as_ref().map(|(f, _)| *f) != Some(frame) {
            let path = self.frame_path(frame).ok_or_else(|| HispError::Image {
                path: self.dir.join(format!("{frame:06}.jpg")),
                message: "frame image not found".into(),
            })?;
            let img = image::open(&path)
                .map_err(|e| HispError::Image {
                    path: path.clone(),
                    message: e.to_string(),
                })?
                .to_rgb8();
            *cache = Some((frame, img));
        }
        let (_, img) = cache.as_ref().expect("cache filled above");
        crop_image(img, frame, bbox)
    }
}

pub(crate) fn crop_image(img: &RgbImage, frame: u32, bbox: &BBox) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    let (l, t, r, b) = bbox.pixel_bounds(w, h);
    if r <= l || b <= t {
        return Err(HispError::EmptyCrop { frame });
    }
    Ok(image::imageops::crop_imm(img, l, t, r - l, b - t).to_image())
}

/// L1-normalised 8×8×8 joint RGB histogram.
pub fn color_histogram(crop: &RgbImage) -> Result<FeatureVector> {
    let mut bins = vec![0.0; HISTOGRAM_DIM];
    let shift = 8 - HISTOGRAM_BINS_PER_CHANNEL.trailing_zeros();
    for px in crop.pixels() {
        let [r, g, b] = px.0;
        let idx = ((r >> shift) as usize * HISTOGRAM_BINS_PER_CHANNEL + (g >> shift) as usize)
            * HISTOGRAM_BINS_PER_CHANNEL
            + (b >> shift) as usize;
        bins[idx] += 1.0;
    }
    let total = crop.pixels().len() as f64;
    if total == 0.0 {
        return Err(HispError::ZeroNorm);
    }
    bins.iter_mut().for_each(|v| *v /= total);
    FeatureVector::new(bins)
}

/// Supplies appearance features to the filter.
pub struct AppearanceProvider {
    mode: AppearanceMode,
    policy: FeaturePolicy,
    table: Option<FeatureTable>,
    frames: Option<Box<dyn FrameSource>>,
}

impl std::fmt::Debug for AppearanceProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppearanceProvider")
            .field("mode", &self.mode)
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

impl AppearanceProvider {
    pub fn off() -> Self {
        Self {
            mode: AppearanceMode::Off,
            policy: FeaturePolicy::LastMatch,
            table: None,
            frames: None,
        }
    }

    pub fn precomputed(table: FeatureTable, policy: FeaturePolicy) -> Self {
        Self {
            mode: AppearanceMode::Precomputed,
            policy,
            table: Some(table),
            frames: None,
        }
    }

    pub fn histogram(frames: Box<dyn FrameSource>, policy: FeaturePolicy) -> Self {
        Self {
            mode: AppearanceMode::Histogram,
            policy,
            table: None,
            frames: Some(frames),
        }
    }

    pub fn mode(&self) -> AppearanceMode {
        self.mode
    }

    pub fn policy(&self) -> FeaturePolicy {
        self.policy
    }

    pub fn is_enabled(&self) -> bool {
        self.mode != AppearanceMode::Off
    }

    pub fn feature_for_detection(
        &self,
        frame: u32,
        detection: &Detection,
    ) -> Result<FeatureVector> {
        match self.mode {
            AppearanceMode::Off => Err(HispError::Config("appearance provider is off".into())),
            AppearanceMode::Precomputed => self
                .table
                .as_ref()
                .and_then(|t| t.get(frame, detection.det_index))
                .cloned()
                .ok_or(HispError::MissingFeature {
                    frame,
                    index: detection.det_index,
                }),
            AppearanceMode::Histogram => {
                let source = self
                    .frames
                    .as_ref()
                    .ok_or_else(|| HispError::Config("histogram mode without frames".into()))?;
                color_histogram(&source.crop(frame, &detection.bbox)?)
            }
        }
    }

    /// Features for every detection of a frame, or `None`s when disabled.
    pub fn features_for_frame(
        &self,
        frame: u32,
        detections: &[Detection],
    ) -> Result<Vec<Option<FeatureVector>>> {
        if !self.is_enabled() {
            return Ok(vec![None; detections.len()]);
        }
        detections
            .iter()
            .map(|d| self.feature_for_detection(frame, d).map(Some))
            .collect()
    }

    /// Likelihood factor between a hypothesis feature and a detection feature;
    /// exactly 1 when appearance is off or either side has no feature.
    pub fn likelihood(
        &self,
        hypothesis: Option<&FeatureVector>,
        detection: Option<&FeatureVector>,
    ) -> Result<f64> {
        match (self.mode, hypothesis, detection) {
            (AppearanceMode::Off, _, _) => Ok(1.0),
            (_, Some(h), Some(d)) => Ok(appearance_likelihood(cosine_similarity(h, d)?)),
            _ => Ok(1.0),
        }
    }
}
