//! Boxes, detections and the detection text-line format
//! `image_id class_id score x1 y1 x2 y2` (floats with six decimals).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `(x1, y1)` top-left.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Positive width and height with finite corners.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// A detection tagged with the image it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub image_id: String,
    pub detection: Detection,
}

pub fn format_line(image_id: &str, d: &Detection) -> String {
    format!(
        "{image_id} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
        d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
    )
}

pub fn format_detections(dets: &[ImageDetection]) -> String {
    let mut out = String::new();
    for d in dets {
        writeln!(out, "{}", format_line(&d.image_id, &d.detection)).unwrap();
    }
    out
}

/// Parses detection lines; blank lines and `#` comments are skipped.
pub fn parse_detections(text: &str, source_name: &str) -> Result<Vec<ImageDetection>> {
    let mut out = Vec::new();
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
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[1]
            .parse()
            .map_err(|_| err(format!("bad class id `{}`", fields[1])))?;
        let mut nums = [0.0f64; 5];
        for (n, f) in nums.iter_mut().zip(&fields[2..]) {
            *n = f.parse().map_err(|_| err(format!("bad number `{f}`")))?;
        }
        let [score, x1, y1, x2, y2] = nums;
        if !(0.0..=1.0).contains(&score) {
            return Err(err(format!("score {score} outside [0, 1]")));
        }
        let bbox = BBox::new(x1, y1, x2, y2);
        if !bbox.is_valid() {
            return Err(err(format!("invalid box ({x1}, {y1}, {x2}, {y2})")));
        }
        out.push(ImageDetection {
            image_id: fields[0].to_string(),
            detection: Detection { class_id, score, bbox },
        });
    }
    Ok(out)
}
