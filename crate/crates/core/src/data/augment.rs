//! Geometric augmentations applied to pixels and labels together.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Label;
use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    #[serde(rename = "resize_0.67")]
    Resize067,
    #[serde(rename = "resize_0.85")]
    Resize085,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 7] = [
        AugmentOp::Resize067,
        AugmentOp::Resize085,
        AugmentOp::Rot90,
        AugmentOp::Rot180,
        AugmentOp::Rot270,
        AugmentOp::FlipH,
        AugmentOp::FlipV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Resize067 => "resize_0.67",
            AugmentOp::Resize085 => "resize_0.85",
            AugmentOp::Rot90 => "rot90",
            AugmentOp::Rot180 => "rot180",
            AugmentOp::Rot270 => "rot270",
            AugmentOp::FlipH => "flip_h",
            AugmentOp::FlipV => "flip_v",
        }
    }
}

impl fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown augmentation `{s}`")))
    }
}

/// Target side for a resize by `factor`: rounded to the nearest multiple of
/// 32, never below 32.
pub fn resized_dim(dim: usize, factor: f64) -> usize {
    (((dim as f64 * factor) / 32.0).round() as usize).max(1) * 32
}

/// Applies `op` to a `(1, h, w)` image and its labels. Rotations are
/// clockwise.
pub fn augment(image: &Tensor, labels: &[Label], op: AugmentOp) -> Result<(Tensor, Vec<Label>)> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return Err(Error::shape(format!("augment expects one channel, got {c}")));
    }
    let (wf, hf) = (w as f64, h as f64);
    let src = image.data();
    let map = |f: &dyn Fn(&BBox) -> BBox| -> Vec<Label> {
        labels
            .iter()
            .map(|l| Label {
                class_id: l.class_id,
                bbox: f(&l.bbox),
            })
            .collect()
    };
    let remap = |nh: usize, nw: usize, f: &dyn Fn(usize, usize) -> usize| -> Result<Tensor> {
        let mut out = Vec::with_capacity(nh * nw);
        for y in 0..nh {
            for x in 0..nw {
                out.push(src[f(y, x)]);
            }
        }
        Tensor::new(vec![1, nh, nw], out)
    };

    Ok(match op {
        AugmentOp::Resize067 | AugmentOp::Resize085 => {
            let factor = if op == AugmentOp::Resize067 { 0.67 } else { 0.85 };
            let (nh, nw) = (resized_dim(h, factor), resized_dim(w, factor));
            let img = resize_bilinear(image, nh, nw)?;
            let (sx, sy) = (nw as f64 / wf, nh as f64 / hf);
            let labels = map(&|b| BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy).clip(nw as f64, nh as f64));
            (img, labels)
        }
        AugmentOp::FlipH => (
            remap(h, w, &|y, x| y * w + (w - 1 - x))?,
            map(&|b| BBox::new(wf - b.x2, b.y1, wf - b.x1, b.y2)),
        ),
        AugmentOp::FlipV => (
            remap(h, w, &|y, x| (h - 1 - y) * w + x)?,
            map(&|b| BBox::new(b.x1, hf - b.y2, b.x2, hf - b.y1)),
        ),
        AugmentOp::Rot180 => (
            remap(h, w, &|y, x| (h - 1 - y) * w + (w - 1 - x))?,
            map(&|b| BBox::new(wf - b.x2, hf - b.y2, wf - b.x1, hf - b.y1)),
        ),
        AugmentOp::Rot90 => (
            remap(w, h, &|y, x| (h - 1 - x) * w + y)?,
            map(&|b| BBox::new(hf - b.y2, b.x1, hf - b.y1, b.x2)),
        ),
        AugmentOp::Rot270 => (
            remap(w, h, &|y, x| x * w + (w - 1 - y))?,
            map(&|b| BBox::new(b.y1, wf - b.x2, b.y2, wf - b.x1)),
        ),
    })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    let src = image.data();
    let axis = |o: usize, n_out: usize, n_in: usize| {
        let p = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, p - i0 as f64)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, ty) = axis(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, tx) = axis(ox, out_w, w);
                let top = plane[y0 * w + x0] as f64 * (1.0 - tx) + plane[y0 * w + x1] as f64 * tx;
                let bot = plane[y1 * w + x0] as f64 * (1.0 - tx) + plane[y1 * w + x1] as f64 * tx;
                out.push((top * (1.0 - ty) + bot * ty) as f32);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
