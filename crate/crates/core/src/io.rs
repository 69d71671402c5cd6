//! MOT-Challenge style text files and non-maximum suppression.
//!
//! Files use top-left boxes and 1-based frames:
//! `frame,id,left,top,width,height,conf,x,y,z`. Inside the crate every box is
//! centre-based; the conversion happens here and nowhere else.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{HispError, Result};
use crate::extraction::{BoxEstimate, TrackSet};
use crate::lingauss::MeasurementVector;

/// Centre-form bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_tlwh(left: f64, top: f64, w: f64, h: f64) -> Self {
        Self {
            cx: left + w / 2.0,
            cy: top + h / 2.0,
            w,
            h,
        }
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.left() + self.w).min(other.left() + other.w) - self.left().max(other.left());
        let iy = (self.top() + self.h).min(other.top() + other.h) - self.top().max(other.top());
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn measurement(&self) -> Result<MeasurementVector> {
        MeasurementVector::new(self.cx, self.cy, self.w, self.h)
    }

    /// Integer pixel bounds `(left, top, right, bottom)` clipped to a `width × height` image.
    pub fn pixel_bounds(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let clip = |v: f64, max: u32| v.max(0.0).min(max as f64) as u32;
        (
            clip(self.left().floor(), width),
            clip(self.top().floor(), height),
            clip((self.left() + self.w).ceil(), width),
            clip((self.top() + self.h).ceil(), height),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub bbox: BBox,
    pub confidence: f64,
    /// Position of the row among the kept rows of its frame.
    pub det_index: u32,
}

/// Detections grouped by frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionFile {
    pub frames: BTreeMap<u32, Vec<Detection>>,
    /// Rows dropped for a non-positive width or height.
    pub dropped: usize,
}

impl DetectionFile {
    pub fn frame(&self, frame: u32) -> &[Detection] {
        self.frames.get(&frame).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn last_frame(&self) -> Option<u32> {
        self.frames.keys().next_back().copied()
    }

    pub fn len(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends a detection, assigning the next index of its frame.
    pub fn push(&mut self, frame: u32, bbox: BBox, confidence: f64) -> u32 {
        let dets = self.frames.entry(frame).or_default();
        let det_index = dets.len() as u32;
        dets.push(Detection {
            frame,
            bbox,
            confidence,
            det_index,
        });
        det_index
    }
}

struct Row {
    frame: u32,
    id: i64,
    bbox: BBox,
    conf: f64,
}

fn parse_row(path: &Path, line_no: usize, line: &str) -> Result<Row> {
    let err = |message: String| HispError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 7 {
        return Err(err(format!(
            "expected at least 7 columns, found {}",
            fields.len()
        )));
    }
    let num = |i: usize, name: &str| -> Result<f64> {
        let v = fields[i]
            .parse::<f64>()
            .map_err(|e| err(format!("{name}: {e}")))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(err(format!("{name} is not finite")))
        }
    };
    let frame = num(0, "frame")?;
    if frame < 1.0 || frame.fract() != 0.0 || frame > u32::MAX as f64 {
        return Err(err(format!("invalid frame {frame}")));
    }
    let id = num(1, "id")?;
    if id.fract() != 0.0 {
        return Err(err(format!("invalid id {id}")));
    }
    Ok(Row {
        frame: frame as u32,
        id: id as i64,
        bbox: BBox::from_tlwh(
            num(2, "left")?,
            num(3, "top")?,
            num(4, "width")?,
            num(5, "height")?,
        ),
        conf: num(6, "conf")?,
    })
}

fn rows(path: &Path) -> Result<Vec<(usize, Row)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push((i + 1, parse_row(path, i + 1, &line)?));
    }
    Ok(out)
}

/// Reads a `det.txt` file. The id column is ignored.
pub fn read_detections(path: &Path) -> Result<DetectionFile> {
    let mut file = DetectionFile::default();
    for (_, row) in rows(path)? {
        if row.bbox.w <= 0.0 || row.bbox.h <= 0.0 {
            file.dropped += 1;
            continue;
        }
        file.push(row.frame, row.bbox, row.conf);
    }
    if file.dropped > 0 {
        tracing::warn!(
            dropped = file.dropped,
            "dropped detections with non-positive size"
        );
    }
    Ok(file)
}

pub fn write_detections(file: &DetectionFile, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for dets in file.frames.values() {
        for d in dets {
            writeln!(
                out,
                "{},-1,{},{},{},{},{},-1,-1,-1",
                d.frame,
                d.bbox.left(),
                d.bbox.top(),
                d.bbox.w,
                d.bbox.h,
                d.confidence
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a result or ground-truth file into a track set.
pub fn read_tracks(path: &Path) -> Result<TrackSet> {
    let mut set = TrackSet::default();
    for (line_no, row) in rows(path)? {
        if row.id < 1 {
            return Err(HispError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("track id must be positive, got {}", row.id),
            });
        }
        let est = BoxEstimate {
            bbox: row.bbox,
            confidence: row.conf,
        };
        if !set.insert(row.id as u64, row.frame, est) {
            return Err(HispError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("duplicate id {} in frame {}", row.id, row.frame),
            });
        }
    }
    Ok(set)
}

/// Writes `frame,id,left,top,width,height,conf,-1,-1,-1` rows sorted by frame, then id.
pub fn write_tracks(tracks: &TrackSet, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (frame, label, est) in tracks.rows() {
        let b = est.bbox;
        writeln!(
            out,
            "{frame},{label},{},{},{},{},{},-1,-1,-1",
            b.left(),
            b.top(),
            b.w,
            b.h,
            est.confidence
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Greedy NMS by descending confidence (ties: lower `det_index` first).
/// Kept detections are returned in their original order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .total_cmp(&detections[a].confidence)
            .then(detections[a].det_index.cmp(&detections[b].det_index))
    });
    let mut keep = vec![false; detections.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| detections[k].bbox.iou(&detections[i].bbox) <= iou_threshold)
        {
            kept.push(i);
            keep[i] = true;
        }
    }
    detections
        .iter()
        .zip(keep)
        .filter_map(|(d, k)| k.then_some(*d))
        .collect()
}
