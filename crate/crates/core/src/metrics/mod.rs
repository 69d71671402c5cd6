//! CLEAR-MOT and identity metrics.
//!
//! Per frame, a truth object keeps its previous result id while the two boxes
//! still overlap by `iou_min`; the remaining pairs are matched by a
//! maximum-total-IoU assignment restricted to pairs above `iou_min`.
//! A fragmentation is an interruption of a truth track's coverage that is
//! later resumed. IDF1 uses a single global truth-to-result id assignment.

mod hungarian;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

pub use hungarian::assign;

use crate::error::{HispError, Result};
use crate::extraction::TrackSet;

pub const FRAG_CONVENTION: &str = "interruptions followed by resumption";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameLog {
    pub frame: u32,
    /// `(truth id, result id, IoU)`
    pub matches: Vec<(u64, u64, f64)>,
    pub false_positives: usize,
    pub misses: usize,
    pub switches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mota: f64,
    pub motp: f64,
    pub idf1: f64,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub idsw: usize,
    pub frag: usize,
    /// Percentage of truth tracks covered for at least 80% of their life.
    pub mt: f64,
    /// Percentage of truth tracks covered for less than 20% of their life.
    pub ml: f64,
    pub gt_boxes: usize,
    pub result_boxes: usize,
    pub gt_tracks: usize,
    pub matches: usize,
    pub frag_convention: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<FrameLog>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }

    /// Single-row aligned table.
    pub fn to_table(&self) -> String {
        let cells = [
            ("MOTA", format!("{:.4}", self.mota)),
            ("MOTP", format!("{:.4}", self.motp)),
            ("IDF1", format!("{:.4}", self.idf1)),
            ("FP", self.fp.to_string()),
            ("FN", self.fn_.to_string()),
            ("IDSw", self.idsw.to_string()),
            ("Frag", self.frag.to_string()),
            ("MT%", format!("{:.1}", self.mt)),
            ("ML%", format!("{:.1}", self.ml)),
            ("GT", self.gt_boxes.to_string()),
        ];
        let mut head = String::new();
        let mut row = String::new();
        for (name, value) in &cells {
            let w = name.len().max(value.len()) + 2;
            let _ = write!(head, "{name:>w$}");
            let _ = write!(row, "{value:>w$}");
        }
        format!("{head}\n{row}\n")
    }
}

/// Per-frame boxes of one track set.
fn by_frame(set: &TrackSet) -> BTreeMap<u32, Vec<(u64, crate::io::BBox)>> {
    let mut out: BTreeMap<u32, Vec<(u64, crate::io::BBox)>> = BTreeMap::new();
    for (frame, label, est) in set.rows() {
        out.entry(frame).or_default().push((label, est.bbox));
    }
    out
}

/// Scores `results` against `truth`. `frames` bounds the evaluated range;
/// by default it runs from frame 1 to the last truth frame. Rows outside the
/// range are an error.
pub fn evaluate(
    results: &TrackSet,
    truth: &TrackSet,
    iou_min: f64,
    frames: Option<(u32, u32)>,
) -> Result<EvalReport> {
    if !(iou_min > 0.0 && iou_min <= 1.0) {
        return Err(HispError::Config(format!(
            "iou_min {iou_min} outside (0, 1]"
        )));
    }
    let range = match frames {
        Some(r) => Some(r),
        None => truth.frame_range().map(|(_, hi)| (1, hi)),
    };
    if let Some((lo, hi)) = range {
        for (name, set) in [("result", results), ("truth", truth)] {
            if let Some((a, b)) = set.frame_range() {
                if a < lo || b > hi {
                    return Err(HispError::FrameRange(format!(
                        "{name} frames {a}..={b} fall outside {lo}..={hi}"
                    )));
                }
            }
        }
    }
    let res_frames = by_frame(results);
    let gt_frames = by_frame(truth);
    let all_frames: BTreeSet<u32> = res_frames.keys().chain(gt_frames.keys()).copied().collect();

    let mut last_match: BTreeMap<u64, u64> = BTreeMap::new();
    let mut covered: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    let mut pair_overlaps: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let (mut fp, mut fn_, mut idsw, mut iou_sum, mut n_matches) = (0, 0, 0, 0.0, 0usize);
    let mut logs = Vec::with_capacity(all_frames.len());
    let empty = Vec::new();

    for frame in all_frames {
        let gts = gt_frames.get(&frame).unwrap_or(&empty);
        let res = res_frames.get(&frame).unwrap_or(&empty);
        for (g, gb) in gts {
            for (r, rb) in res {
                if gb.iou(rb) >= iou_min {
                    *pair_overlaps.entry((*g, *r)).or_default() += 1;
                }
            }
        }

        let mut gt_used = vec![false; gts.len()];
        let mut res_used = vec![false; res.len()];
        let mut matches = Vec::new();
        for (gi, (g, gb)) in gts.iter().enumerate() {
            let Some(prev) = last_match.get(g) else {
                continue;
            };
            if let Some(ri) = res.iter().position(|(r, _)| r == prev) {
                let iou = gb.iou(&res[ri].1);
                if !res_used[ri] && iou >= iou_min {
                    gt_used[gi] = true;
                    res_used[ri] = true;
                    matches.push((gi, ri, iou));
                }
            }
        }
        let open_gt: Vec<usize> = (0..gts.len()).filter(|&i| !gt_used[i]).collect();
        let open_res: Vec<usize> = (0..res.len()).filter(|&i| !res_used[i]).collect();
        let cost: Vec<Vec<f64>> = open_gt
            .iter()
            .map(|&gi| {
                open_res
                    .iter()
                    .map(|&ri| {
                        let iou = gts[gi].1.iou(&res[ri].1);
                        if iou >= iou_min {
                            1.0 - iou
                        } else {
                            // Larger than any number of valid pairs.
                            2.0 * (open_gt.len() + open_res.len()) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let mut switches = 0;
        for (k, col) in assign(&cost).into_iter().enumerate() {
            let Some(col) = col else { continue };
            let (gi, ri) = (open_gt[k], open_res[col]);
            let iou = gts[gi].1.iou(&res[ri].1);
            if iou < iou_min {
                continue;
            }
            if last_match
                .get(&gts[gi].0)
                .is_some_and(|&prev| prev != res[ri].0)
            {
                switches += 1;
            }
            gt_used[gi] = true;
            res_used[ri] = true;
            matches.push((gi, ri, iou));
        }

        for &(gi, ri, iou) in &matches {
            last_match.insert(gts[gi].0, res[ri].0);
            iou_sum += iou;
        }
        for (gi, (g, _)) in gts.iter().enumerate() {
            covered.entry(*g).or_default().push(gt_used[gi]);
        }
        let frame_fp = res_used.iter().filter(|u| !**u).count();
        let frame_fn = gt_used.iter().filter(|u| !**u).count();
        fp += frame_fp;
        fn_ += frame_fn;
        idsw += switches;
        n_matches += matches.len();
        let mut logged: Vec<(u64, u64, f64)> = matches
            .iter()
            .map(|&(gi, ri, iou)| (gts[gi].0, res[ri].0, iou))
            .collect();
        logged.sort_by_key(|&(g, _, _)| g);
        logs.push(FrameLog {
            frame,
            matches: logged,
            false_positives: frame_fp,
            misses: frame_fn,
            switches,
        });
    }

    let mut frag = 0;
    let (mut mt, mut ml) = (0usize, 0usize);
    for cov in covered.values() {
        let mut was_tracked = false;
        let mut pending_gap = false;
        for &c in cov {
            if c {
                if pending_gap {
                    frag += 1;
                    pending_gap = false;
                }
                was_tracked = true;
            } else if was_tracked {
                pending_gap = true;
            }
        }
        let ratio = cov.iter().filter(|c| **c).count() as f64 / cov.len() as f64;
        mt += usize::from(ratio >= 0.8);
        ml += usize::from(ratio < 0.2);
    }

    let gt_boxes = truth.len();
    let result_boxes = results.len();
    let gt_ids: Vec<u64> = truth.labels().collect();
    let res_ids: Vec<u64> = results.labels().collect();
    let id_cost: Vec<Vec<f64>> = gt_ids
        .iter()
        .map(|g| {
            res_ids
                .iter()
                .map(|r| -(pair_overlaps.get(&(*g, *r)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    let idtp: f64 = assign(&id_cost)
        .into_iter()
        .enumerate()
        .filter_map(|(g, r)| r.map(|r| -id_cost[g][r]))
        .sum();
    let idf1 = if gt_boxes + result_boxes == 0 {
        1.0
    } else {
        2.0 * idtp / (gt_boxes + result_boxes) as f64
    };

    let n_tracks = covered.len();
    let pct = |k: usize| {
        if n_tracks == 0 {
            0.0
        } else {
            100.0 * k as f64 / n_tracks as f64
        }
    };
    Ok(EvalReport {
        mota: 1.0 - (fp + fn_ + idsw) as f64 / gt_boxes.max(1) as f64,
        motp: if n_matches == 0 {
            0.0
        } else {
            iou_sum / n_matches as f64
        },
        idf1,
        fp,
        fn_,
        idsw,
        frag,
        mt: pct(mt),
        ml: pct(ml),
        gt_boxes,
        result_boxes,
        gt_tracks: n_tracks,
        matches: n_matches,
        frag_convention: FRAG_CONVENTION.to_string(),
        frames: logs,
    })
}
