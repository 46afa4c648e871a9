//! Synthetic thermal scenes: a tilted linear background gradient, uniform
//! rectangles of raised intensity at the object sites, additive Gaussian
//! noise, clipped to `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Label;
use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::fusion::iou;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_objects: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    /// Intensity added to the background inside each object.
    pub contrast: f64,
    pub min_size: usize,
    pub max_size: usize,
    /// Background intensity at the coldest and hottest corner.
    pub background: (f64, f64),
    /// Largest IoU allowed between two objects. Zero keeps them disjoint.
    pub max_overlap: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// Defaults for a `size`x`size` scene.
    pub fn square(size: usize, n_objects: usize, seed: u64) -> Self {
        SceneSpec {
            width: size,
            height: size,
            n_objects,
            num_classes: 3,
            noise_sigma: 0.03,
            contrast: 0.3,
            min_size: 3,
            max_size: (size / 6).max(3),
            background: (0.2, 0.5),
            max_overlap: 0.0,
            max_attempts: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene size must be positive"));
        }
        if self.min_size < 3 {
            return Err(Error::invalid(format!(
                "object size {} below the 3 px minimum",
                self.min_size
            )));
        }
        if self.max_size < self.min_size || self.max_size > self.width.min(self.height) {
            return Err(Error::invalid(format!(
                "object size range {}..={} does not fit a {}x{} scene",
                self.min_size, self.max_size, self.width, self.height
            )));
        }
        if self.n_objects > 0 && self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and >= 0"));
        }
        let (lo, hi) = self.background;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::invalid("background range must lie in [0, 1]"));
        }
        if !self.contrast.is_finite() || !(0.0..=1.0).contains(&self.max_overlap) {
            return Err(Error::invalid("contrast or max_overlap out of range"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub low: f64,
    pub high: f64,
    /// Direction of increasing intensity, radians.
    pub angle: f64,
}

impl Gradient {
    /// Background intensity at pixel `(x, y)` of a `width`x`height` image.
    /// The extremes land exactly on two opposite corners.
    pub fn value(&self, x: usize, y: usize, width: usize, height: usize) -> f64 {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let proj = |x: f64, y: f64| x * c + y * s;
        let (wx, hy) = ((width - 1) as f64, (height - 1) as f64);
        let corners = [proj(0.0, 0.0), proj(wx, 0.0), proj(0.0, hy), proj(wx, hy)];
        let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let t = if hi > lo {
            ((proj(x as f64, y as f64) - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        self.low + (self.high - self.low) * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalScene {
    /// `(1, h, w)` intensities in `[0, 1]`.
    pub image: Tensor,
    pub objects: Vec<Label>,
    pub noise_sigma: f64,
    pub gradient: Gradient,
    pub seed: u64,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<ThermalScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gradient = Gradient {
        low: spec.background.0,
        high: spec.background.1,
        angle: rng.random_range(0.0..std::f64::consts::TAU),
    };

    let mut objects: Vec<Label> = Vec::with_capacity(spec.n_objects);
    for index in 0..spec.n_objects {
        let mut placed = None;
        for _ in 0..spec.max_attempts {
            let w = rng.random_range(spec.min_size..=spec.max_size);
            let h = rng.random_range(spec.min_size..=spec.max_size);
            let x = rng.random_range(0..=spec.width - w);
            let y = rng.random_range(0..=spec.height - h);
            let bbox = BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64);
            let clear = objects.iter().all(|o| {
                if spec.max_overlap == 0.0 {
                    !intersects(&o.bbox, &bbox)
                } else {
                    iou(&o.bbox, &bbox) <= spec.max_overlap
                }
            });
            if clear {
                placed = Some(bbox);
                break;
            }
        }
        let bbox = placed.ok_or(Error::Placement {
            index,
            requested: spec.n_objects,
            attempts: spec.max_attempts,
        })?;
        let class_id = rng.random_range(0..spec.num_classes);
        objects.push(Label { class_id, bbox });
    }

    let (w, h) = (spec.width, spec.height);
    let mut clean = vec![0f64; w * h];
    for y in 0..h {
        for x in 0..w {
            clean[y * w + x] = gradient.value(x, y, w, h);
        }
    }
    let mut covered = vec![false; w * h];
    for o in &objects {
        let b = &o.bbox;
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                covered[y * w + x] = true;
            }
        }
    }
    for (v, &c) in clean.iter_mut().zip(&covered) {
        if c {
            *v += spec.contrast;
        }
    }

    let data = if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        clean
            .iter()
            .map(|&v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            .collect()
    } else {
        clean.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect()
    };

    Ok(ThermalScene {
        image: Tensor::new(vec![1, h, w], data)?,
        objects,
        noise_sigma: spec.noise_sigma,
        gradient,
        seed: spec.seed,
    })
}

fn intersects(a: &BBox, b: &BBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}
