//! Prediction heads and YOLO-style decoding.
//!
//! Each level emits `a·(5 + C)` logit planes: per anchor `tx, ty, tw, th`,
//! objectness, then `C` class logits. Decoding uses
//!
//! * centre `= (2σ(t_xy) − 0.5 + cell) · stride`
//! * size `= (2σ(t_wh))² · anchor`
//! * score `= σ(obj) · max_c σ(cls_c)`, class = first arg-max.
//!
//! Boxes are clipped to the image and dropped if clipping leaves no area.

use std::fmt::Write as _;

use crate::blocks::Conv2d;
use crate::detection::{BBox, Detection};
use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::kernels::sigmoid;
use crate::tensor::{ConvParams, FeatureMap, Tensor};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Anchors per pyramid level, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTable {
    levels: Vec<Vec<Anchor>>,
}

impl AnchorTable {
    pub fn new(levels: Vec<Vec<Anchor>>) -> Result<Self> {
        let per = levels.first().map_or(0, Vec::len);
        if levels.is_empty() || per == 0 {
            return Err(Error::invalid("anchor table is empty"));
        }
        for (i, lvl) in levels.iter().enumerate() {
            if lvl.len() != per {
                return Err(Error::invalid(format!(
                    "level {i} has {} anchors, expected {per}",
                    lvl.len()
                )));
            }
            if lvl.iter().any(|a| !(a.w > 0.0 && a.h > 0.0) || !a.area().is_finite()) {
                return Err(Error::invalid(format!("level {i} has a non-positive anchor")));
            }
            if lvl.windows(2).any(|p| p[0].area() > p[1].area()) {
                return Err(Error::invalid(format!("level {i} anchors are not sorted by area")));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Vec<Anchor>] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &[Anchor] {
        &self.levels[i]
    }

    pub fn anchors_per_level(&self) -> usize {
        self.levels[0].len()
    }

    /// One line per level: `w,h w,h w,h`, two decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# anchors per level (w,h in pixels), finest level first\n");
        for lvl in &self.levels {
            let cells: Vec<String> = lvl.iter().map(|a| format!("{:.2},{:.2}", a.w, a.h)).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        }
        out
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut levels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| Error::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                reason,
            };
            let lvl = line
                .split_whitespace()
                .map(|cell| {
                    let (w, h) = cell
                        .split_once(',')
                        .ok_or_else(|| err(format!("anchor `{cell}` is not w,h")))?;
                    Ok(Anchor {
                        w: w.parse().map_err(|_| err(format!("bad width `{w}`")))?,
                        h: h.parse().map_err(|_| err(format!("bad height `{h}`")))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            levels.push(lvl);
        }
        Self::new(levels)
    }
}

fn shape_iou(a: Anchor, b: Anchor) -> f64 {
    let inter = a.w.min(b.w) * a.h.min(b.h);
    inter / (a.area() + b.area() - inter)
}

/// Clusters box sizes into `levels × per_level` anchors with IoU-distance
/// k-means, then assigns them to levels by ascending area.
///
/// Centres start at evenly spaced area quantiles, so the result does not
/// depend on the order of `sizes`.
pub fn kmeans_anchors(sizes: &[(f64, f64)], levels: usize, per_level: usize, iterations: usize) -> Result<AnchorTable> {
    let k = levels * per_level;
    if sizes.len() < k {
        return Err(Error::invalid(format!(
            "{} boxes are too few for {k} anchors",
            sizes.len()
        )));
    }
    let mut pts: Vec<Anchor> = sizes.iter().map(|&(w, h)| Anchor { w, h }).collect();
    pts.sort_by(|a, b| a.area().total_cmp(&b.area()).then(a.w.total_cmp(&b.w)));
    let mut centres: Vec<Anchor> = (0..k).map(|i| pts[((2 * i + 1) * pts.len()) / (2 * k)]).collect();
    for _ in 0..iterations {
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for p in &pts {
            let best = (0..k)
                .max_by(|&a, &b| {
                    shape_iou(*p, centres[a])
                        .total_cmp(&shape_iou(*p, centres[b]))
                        .then(b.cmp(&a))
                })
                .unwrap();
            sums[best].0 += p.w;
            sums[best].1 += p.h;
            sums[best].2 += 1;
        }
        let next: Vec<Anchor> = sums
            .iter()
            .zip(&centres)
            .map(|(&(w, h, n), &c)| {
                if n == 0 {
                    c
                } else {
                    Anchor {
                        w: w / n as f64,
                        h: h / n as f64,
                    }
                }
            })
            .collect();
        if next == centres {
            break;
        }
        centres = next;
    }
    centres.sort_by(|a, b| a.area().total_cmp(&b.area()));
    AnchorTable::new(centres.chunks(per_level).map(<[Anchor]>::to_vec).collect())
}

/// Raw per-level head output.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    /// `(a·(5 + C), h, w)` logits.
    pub logits: Tensor,
    pub stride: usize,
    pub anchors_per_cell: usize,
    pub num_classes: usize,
}

impl RawPrediction {
    pub fn channels_per_anchor(&self) -> usize {
        5 + self.num_classes
    }
}

/// 1×1 convolution producing per-anchor logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub conv: Conv2d,
    pub anchors_per_cell: usize,
    pub num_classes: usize,
}

impl Head {
    pub fn out_channels(anchors: usize, num_classes: usize) -> usize {
        anchors * (5 + num_classes)
    }

    pub fn init(rng: &mut WeightInit, in_channels: usize, anchors: usize, num_classes: usize) -> Self {
        Self {
            conv: Conv2d::init(
                rng,
                in_channels,
                Self::out_channels(anchors, num_classes),
                1,
                ConvParams::default(),
            ),
            anchors_per_cell: anchors,
            num_classes,
        }
    }

    pub fn param_count(in_channels: usize, anchors: usize, num_classes: usize) -> usize {
        Conv2d::param_count(in_channels, Self::out_channels(anchors, num_classes), 1, 1)
    }

    pub fn forward(&self, level: &FeatureMap) -> Result<RawPrediction> {
        if level.channels() != self.conv.in_channels() {
            return Err(Error::shape(format!(
                "head expects {} channels, level has {}",
                self.conv.in_channels(),
                level.channels()
            )));
        }
        if self.conv.out_channels() != Self::out_channels(self.anchors_per_cell, self.num_classes) {
            return Err(Error::shape(
                "head convolution width disagrees with anchors and classes",
            ));
        }
        Ok(RawPrediction {
            logits: self.conv.forward(&level.tensor)?,
            stride: level.stride,
            anchors_per_cell: self.anchors_per_cell,
            num_classes: self.num_classes,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.conv.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.conv.tensors_mut()
    }
}

pub fn head_forward(level: &FeatureMap, head: &Head) -> Result<RawPrediction> {
    head.forward(level)
}

/// Decodes one level into image-space detections scoring at least
/// `conf_threshold`. Output is ordered by cell (raster), then anchor.
pub fn decode(
    raw: &RawPrediction,
    anchors: &[Anchor],
    image_size: (usize, usize),
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    let (ch, h, w) = raw.logits.dims3()?;
    let per = raw.channels_per_anchor();
    if anchors.len() != raw.anchors_per_cell || ch != per * raw.anchors_per_cell {
        return Err(Error::shape(format!(
            "{ch} logit planes do not match {} anchors × {per}",
            anchors.len()
        )));
    }
    let (img_w, img_h) = (image_size.0 as f64, image_size.1 as f64);
    let stride = raw.stride as f64;
    let plane = |c: usize, y: usize, x: usize| raw.logits.data()[(c * h + y) * w + x] as f64;
    let mut out = Vec::new();
    for gy in 0..h {
        for gx in 0..w {
            for (a, anchor) in anchors.iter().enumerate() {
                let base = a * per;
                let obj = sigmoid(plane(base + 4, gy, gx));
                let (class_id, cls) = (0..raw.num_classes)
                    .map(|c| (c, sigmoid(plane(base + 5 + c, gy, gx))))
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
                let score = obj * cls;
                if score.is_nan() || score < conf_threshold {
                    continue;
                }
                let cx = (2.0 * sigmoid(plane(base, gy, gx)) - 0.5 + gx as f64) * stride;
                let cy = (2.0 * sigmoid(plane(base + 1, gy, gx)) - 0.5 + gy as f64) * stride;
                let bw = (2.0 * sigmoid(plane(base + 2, gy, gx))).powi(2) * anchor.w;
                let bh = (2.0 * sigmoid(plane(base + 3, gy, gx))).powi(2) * anchor.h;
                let bbox = BBox::from_center(cx, cy, bw, bh).clip(img_w, img_h);
                if bbox.is_valid() {
                    out.push(Detection { class_id, score, bbox });
                }
            }
        }
    }
    Ok(out)
}
