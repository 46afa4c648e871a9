//! Class-wise post-processing of overlapping detections: greedy NMS,
//! Soft-NMS and weighted box fusion.
//!
//! All three process each class independently and break score ties by input
//! position, so the output is a deterministic function of the input list.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::detection::{BBox, Detection};
use crate::error::{Error, Result};

/// Intersection over union; degenerate boxes yield 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        log::warn!("IoU with a zero-area box ({a:?}, {b:?}) treated as 0");
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Nms,
    SoftNms,
    Wbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    /// `1 − IoU`, applied only above the IoU threshold.
    Linear,
    /// `exp(−IoU²/σ)`, applied to every remaining box.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub iou_threshold: f64,
    pub soft_sigma: f64,
    pub soft_score_floor: f64,
    pub decay: Decay,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::SoftNms,
            iou_threshold: 0.5,
            soft_sigma: 0.5,
            soft_score_floor: 0.001,
            decay: Decay::Gaussian,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "IoU threshold {} outside (0, 1)",
                self.iou_threshold
            )));
        }
        if self.soft_sigma.is_nan() || self.soft_sigma <= 0.0 {
            return Err(Error::invalid("soft-NMS sigma must be positive"));
        }
        if !(0.0..1.0).contains(&self.soft_score_floor) {
            return Err(Error::invalid("soft-NMS score floor must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Groups detections by class, keeping input positions.
fn by_class(dets: &[Detection]) -> BTreeMap<usize, Vec<(usize, Detection)>> {
    let mut groups: BTreeMap<usize, Vec<(usize, Detection)>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry(d.class_id).or_default().push((i, *d));
    }
    groups
}

/// Sorts by descending score, then ascending tag.
fn sort_ranked(items: &mut [(usize, Detection)]) {
    items.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
}

/// Greedy suppression: keep the best box, drop same-class boxes with
/// IoU above the threshold, repeat.
pub fn nms(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    let mut kept = Vec::new();
    for (_, mut group) in by_class(dets) {
        sort_ranked(&mut group);
        let mut alive = vec![true; group.len()];
        for i in 0..group.len() {
            if !alive[i] {
                continue;
            }
            kept.push(group[i]);
            for j in i + 1..group.len() {
                if alive[j] && iou(&group[i].1.bbox, &group[j].1.bbox) > cfg.iou_threshold {
                    alive[j] = false;
                }
            }
        }
    }
    sort_ranked(&mut kept);
    kept.into_iter().map(|(_, d)| d).collect()
}

/// Soft-NMS: repeatedly take the highest-scoring live box and decay the
/// scores of the remaining boxes by their overlap with it. Boxes falling
/// below the score floor are dropped.
pub fn soft_nms(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    let mut kept = Vec::new();
    for (_, mut live) in by_class(dets) {
        while !live.is_empty() {
            let best = (0..live.len())
                .min_by(|&a, &b| {
                    live[b]
                        .1
                        .score
                        .total_cmp(&live[a].1.score)
                        .then(live[a].0.cmp(&live[b].0))
                })
                .unwrap();
            let picked = live.swap_remove(best);
            for (_, d) in live.iter_mut() {
                let overlap = iou(&picked.1.bbox, &d.bbox);
                let factor = match cfg.decay {
                    Decay::Linear if overlap > cfg.iou_threshold => 1.0 - overlap,
                    Decay::Linear => 1.0,
                    Decay::Gaussian => (-(overlap * overlap) / cfg.soft_sigma).exp(),
                };
                d.score *= factor;
            }
            live.retain(|(_, d)| d.score >= cfg.soft_score_floor);
            kept.push(picked);
        }
    }
    sort_ranked(&mut kept);
    kept.into_iter().map(|(_, d)| d).collect()
}

struct Cluster {
    members: Vec<(usize, Detection)>,
    fused: Detection,
}

impl Cluster {
    fn new(member: (usize, Detection)) -> Self {
        Self {
            fused: member.1,
            members: vec![member],
        }
    }

    fn refuse(&mut self) {
        if self.members.len() == 1 {
            self.fused = self.members[0].1;
            return;
        }
        let total: f64 = self.members.iter().map(|(_, d)| d.score).sum();
        let weighted =
            |f: fn(&BBox) -> f64| self.members.iter().map(|(_, d)| d.score * f(&d.bbox)).sum::<f64>() / total;
        self.fused = Detection {
            class_id: self.members[0].1.class_id,
            score: total / self.members.len() as f64,
            bbox: BBox::new(
                weighted(|b| b.x1),
                weighted(|b| b.y1),
                weighted(|b| b.x2),
                weighted(|b| b.y2),
            ),
        };
    }
}

/// Weighted box fusion. Boxes are visited by descending score and join the
/// cluster whose running fused box overlaps them most (IoU above the
/// threshold). Fused coordinates are score-weighted means of the members and
/// the fused score is the members' mean score. Clusters whose fused boxes end
/// up overlapping above the threshold are merged until none do.
pub fn wbf(dets: &[Detection], cfg: &FusionConfig) -> Vec<Detection> {
    let mut out = Vec::new();
    for (_, mut group) in by_class(dets) {
        sort_ranked(&mut group);
        let mut clusters: Vec<Cluster> = Vec::new();
        for item in group {
            let best = clusters
                .iter()
                .enumerate()
                .map(|(ci, c)| (ci, iou(&c.fused.bbox, &item.1.bbox)))
                .filter(|&(_, o)| o > cfg.iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((ci, _)) => {
                    clusters[ci].members.push(item);
                    clusters[ci].refuse();
                }
                None => clusters.push(Cluster::new(item)),
            }
        }
        'merge: loop {
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    if iou(&clusters[i].fused.bbox, &clusters[j].fused.bbox) > cfg.iou_threshold {
                        let absorbed = clusters.remove(j);
                        clusters[i].members.extend(absorbed.members);
                        clusters[i].refuse();
                        continue 'merge;
                    }
                }
            }
            break;
        }
        for c in clusters {
            let tag = c.members.iter().map(|m| m.0).min().unwrap();
            out.push((tag, c.fused));
        }
    }
    sort_ranked(&mut out);
    out.into_iter().map(|(_, d)| d).collect()
}

/// Runs the configured method.
pub fn fuse(dets: &[Detection], cfg: &FusionConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    Ok(match cfg.method {
        FusionMethod::Nms => nms(dets, cfg),
        FusionMethod::SoftNms => soft_nms(dets, cfg),
        FusionMethod::Wbf => wbf(dets, cfg),
    })
}
