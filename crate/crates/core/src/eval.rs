//! Precision-recall and mAP evaluation.
//!
//! Matching is greedy in descending score: each detection takes the unmatched
//! ground truth of its image and class with the highest IoU, and is a true
//! positive iff that IoU reaches the threshold. AP is the all-point
//! interpolated area under the precision envelope. `mAP95` means AP at the
//! single IoU threshold 0.95; the COCO average over 0.50:0.05:0.95 is
//! available through [`EvalOptions::coco`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_labels, read_manifest};
use crate::detection::{parse_detections, BBox, Detection, ImageDetection};
use crate::error::{Error, Result};
use crate::fusion::iou;

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.5, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
}

/// Outcome of matching one image and class slice.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(score, is_true_positive)` in matching order.
    pub labeled: Vec<(f64, bool)>,
    pub false_negatives: usize,
}

/// Total order on boxes, used to make tie-breaking independent of input order.
fn box_cmp(a: &BBox, b: &BBox) -> Ordering {
    a.x1.total_cmp(&b.x1)
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

fn det_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| box_cmp(&a.bbox, &b.bbox))
}

pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut dets: Vec<&Detection> = dets.iter().collect();
    dets.sort_by(|a, b| det_cmp(a, b));
    let mut gts: Vec<&BBox> = gts.iter().collect();
    gts.sort_by(|a, b| box_cmp(a, b));

    let mut matched = vec![false; gts.len()];
    let mut labeled = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if matched[j] {
                continue;
            }
            let o = iou(&d.bbox, g);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        let tp = match best {
            Some((j, o)) if o >= iou_threshold => {
                matched[j] = true;
                true
            }
            _ => false,
        };
        labeled.push((d.score, tp));
    }
    MatchResult {
        labeled,
        false_negatives: matched.iter().filter(|m| !**m).count(),
    }
}

/// Precision/recall after each detection of a score-sorted list.
pub fn pr_curve(labeled: &[(f64, bool)], total_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    labeled
        .iter()
        .enumerate()
        .map(|(i, &(_, hit))| {
            tp += hit as usize;
            let recall = if total_gt == 0 {
                0.0
            } else {
                tp as f64 / total_gt as f64
            };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP of detections already sorted by descending
/// score. `None` when there is no ground truth: such a class is left out of
/// the mean rather than counted as zero.
pub fn average_precision(labeled: &[(f64, bool)], total_gt: usize) -> Option<f64> {
    if total_gt == 0 {
        return None;
    }
    let curve = pr_curve(labeled, total_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (&(recall, _), &p) in curve.iter().zip(&envelope) {
        ap += (recall - prev_recall) * p;
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub thresholds: Vec<f64>,
    /// Also report the mean of mAP over IoU 0.50, 0.55, ..., 0.95.
    pub coco: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            coco: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassThreshold {
    pub ap: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(recall, precision)` after each ranked detection.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub total_gt: usize,
    pub detections: usize,
    /// One entry per threshold, in [`EvalReport::thresholds`] order.
    pub per_threshold: Vec<ClassThreshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub threshold: f64,
    /// Unweighted mean AP over classes present in the ground truth.
    pub map: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    pub summary: Vec<ThresholdSummary>,
    pub coco_map: Option<f64>,
}

impl EvalReport {
    /// mAP at a threshold that was evaluated.
    pub fn map_at(&self, threshold: f64) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| (s.threshold - threshold).abs() < 1e-12)
            .and_then(|s| s.map)
    }

    pub fn map50(&self) -> Option<f64> {
        self.map_at(0.5)
    }

    pub fn map95(&self) -> Option<f64> {
        self.map_at(0.95)
    }

    /// Human-readable table.
    pub fn to_text(&self) -> String {
        let mut out = String::from("class  gt    dets");
        for t in &self.thresholds {
            out.push_str(&format!("  AP@{t:.2}"));
        }
        out.push('\n');
        let ap = |v: Option<f64>| v.map_or("     -".to_string(), |v| format!("{v:.4}"));
        for c in &self.classes {
            out.push_str(&format!("{:<5}  {:<4}  {:<4}", c.class_id, c.total_gt, c.detections));
            for p in &c.per_threshold {
                out.push_str(&format!("  {:>7}", ap(p.ap)));
            }
            out.push('\n');
        }
        for s in &self.summary {
            out.push_str(&format!(
                "mAP@{:.2} = {}  (TP {} FP {} FN {})\n",
                s.threshold,
                ap(s.map),
                s.tp,
                s.fp,
                s.fn_
            ));
        }
        if let Some(m) = self.coco_map {
            out.push_str(&format!("mAP@[.50:.95] = {m:.4}\n"));
        }
        out
    }
}

type Slices<'a> = BTreeMap<(usize, &'a str), (Vec<Detection>, Vec<BBox>)>;

fn class_pass(slices: &Slices<'_>, class_id: usize, threshold: f64) -> (ClassThreshold, usize, usize) {
    let results: Vec<MatchResult> = slices
        .par_iter()
        .filter(|((c, _), _)| *c == class_id)
        .map(|(_, (d, g))| match_detections(d, g, threshold))
        .collect();
    let total_gt: usize = slices
        .iter()
        .filter(|((c, _), _)| *c == class_id)
        .map(|(_, (_, g))| g.len())
        .sum();
    let mut labeled: Vec<(f64, bool)> = results.iter().flat_map(|r| r.labeled.iter().copied()).collect();
    // Equal scores: true positives first, so the ranking is a function of
    // the multiset of outcomes and not of file order.
    labeled.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let tp = labeled.iter().filter(|l| l.1).count();
    let fn_: usize = results.iter().map(|r| r.false_negatives).sum();
    let entry = ClassThreshold {
        ap: average_precision(&labeled, total_gt),
        tp,
        fp: labeled.len() - tp,
        fn_,
        pr_curve: pr_curve(&labeled, total_gt),
    };
    (entry, total_gt, labeled.len())
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub fn evaluate(dets: &[ImageDetection], gts: &[GroundTruth], opts: &EvalOptions) -> Result<EvalReport> {
    if opts.thresholds.is_empty() {
        return Err(Error::invalid("at least one IoU threshold is required"));
    }
    for &t in &opts.thresholds {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::invalid(format!("IoU threshold {t} outside (0, 1]")));
        }
    }
    let mut slices: Slices<'_> = BTreeMap::new();
    for d in dets {
        slices
            .entry((d.detection.class_id, d.image_id.as_str()))
            .or_default()
            .0
            .push(d.detection);
    }
    for g in gts {
        if !g.bbox.is_valid() {
            return Err(Error::invalid(format!("invalid ground-truth box in {}", g.image_id)));
        }
        slices
            .entry((g.class_id, g.image_id.as_str()))
            .or_default()
            .1
            .push(g.bbox);
    }
    let classes: BTreeSet<usize> = slices.keys().map(|k| k.0).collect();

    let summarize = |thresholds: &[f64]| -> (Vec<ClassReport>, Vec<ThresholdSummary>) {
        let mut reports: Vec<ClassReport> = Vec::new();
        for &c in &classes {
            let mut per = Vec::new();
            let (mut total_gt, mut n) = (0, 0);
            for &t in thresholds {
                let (entry, g, d) = class_pass(&slices, c, t);
                total_gt = g;
                n = d;
                per.push(entry);
            }
            reports.push(ClassReport {
                class_id: c,
                total_gt,
                detections: n,
                per_threshold: per,
            });
        }
        let summary = thresholds
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let aps: Vec<f64> = reports.iter().filter_map(|r| r.per_threshold[i].ap).collect();
                ThresholdSummary {
                    threshold: t,
                    map: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
                    tp: reports.iter().map(|r| r.per_threshold[i].tp).sum(),
                    fp: reports.iter().map(|r| r.per_threshold[i].fp).sum(),
                    fn_: reports.iter().map(|r| r.per_threshold[i].fn_).sum(),
                }
            })
            .collect();
        (reports, summary)
    };

    let (classes_report, summary) = summarize(&opts.thresholds);
    let coco_map = if opts.coco {
        let (_, s) = summarize(&coco_thresholds());
        let maps: Option<Vec<f64>> = s.iter().map(|s| s.map).collect();
        maps.map(|m| m.iter().sum::<f64>() / m.len() as f64)
    } else {
        None
    };
    Ok(EvalReport {
        thresholds: opts.thresholds.clone(),
        classes: classes_report,
        summary,
        coco_map,
    })
}

/// Ground truth for every entry of a corpus manifest, keyed by image stem.
pub fn load_ground_truth(manifest: &Path) -> Result<Vec<GroundTruth>> {
    let mut out = Vec::new();
    for entry in read_manifest(manifest)? {
        let id = entry.image_id();
        for l in load_labels(&entry)? {
            out.push(GroundTruth {
                image_id: id.clone(),
                class_id: l.class_id,
                bbox: l.bbox,
            });
        }
    }
    Ok(out)
}

/// Evaluates a detection file against a corpus manifest.
pub fn evaluate_files(dets: &Path, manifest: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let text = fs::read_to_string(dets)?;
    let dets = parse_detections(&text, &dets.display().to_string())?;
    evaluate(&dets, &load_ground_truth(manifest)?, opts)
}
