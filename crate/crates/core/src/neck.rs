//! Bi-FPN neck over four pyramid levels (strides 4, 8, 16, 32) followed by
//! per-level window attention.
//!
//! Fusion uses fast normalized weighting: each node computes
//! `Σ_i relu(w_i) / (Σ_j relu(w_j) + ε) · input_i` and then a 3×3
//! convolution. Cross-scale alignment is nearest-neighbour ×2 upsampling and
//! 2×2 max pooling.
//!
//! Dataflow for `L` levels (`in_l` = lateral-projected backbone level `l`,
//! level 0 is the finest):
//!
//! | node        | inputs                                   |
//! |-------------|------------------------------------------|
//! | `td_l`      | `in_l`, `up(td_{l+1})` for `l = L−2 … 1` (`td_{L−1} = in_{L−1}`) |
//! | `out_0`     | `in_0`, `up(td_1)`                       |
//! | `out_l`     | `in_l`, `td_l`, `down(out_{l−1})` for `l = 1 … L−2` |
//! | `out_{L−1}` | `in_{L−1}`, `down(out_{L−2})`            |
//!
//! Nodes are stored in evaluation order: `td_{L−2} … td_1, out_0 … out_{L−1}`.

use serde::{Deserialize, Serialize};

use crate::attention::WindowAttentionBlock;
use crate::blocks::Conv2d;
use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::{ConvParams, FeatureMap, Tensor};

pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const FUSION_EPS: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    /// Nearest-neighbour ×2.
    Up2,
    /// 2×2 max pooling.
    Down2,
}

pub fn resize_nearest(x: &FeatureMap, resize: Resize) -> Result<FeatureMap> {
    let (c, h, w) = x.dims();
    let src = x.tensor.data();
    match resize {
        Resize::Up2 => {
            if !x.stride.is_multiple_of(2) {
                return Err(Error::invalid(format!("cannot upsample stride {}", x.stride)));
            }
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        out[(ch * oh + y) * ow + xx] = src[(ch * h + y / 2) * w + xx / 2];
                    }
                }
            }
            FeatureMap::new(Tensor::new(vec![c, oh, ow], out)?, x.stride / 2)
        }
        Resize::Down2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(format!("cannot max-pool odd dims {h}x{w}")));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let at = |dy: usize, dx: usize| src[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                        out[(ch * oh + y) * ow + xx] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    }
                }
            }
            FeatureMap::new(Tensor::new(vec![c, oh, ow], out)?, x.stride * 2)
        }
    }
}

/// Learnable fusion scalars, kept raw and exposed through ReLU so the
/// effective weights are never negative.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub raw: Tensor,
    pub eps: f32,
}

impl FusionWeights {
    pub fn new(raw: Vec<f32>) -> Result<Self> {
        let n = raw.len();
        Ok(Self {
            raw: Tensor::new(vec![n], raw)?,
            eps: FUSION_EPS,
        })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            raw: Tensor::full(&[n], 1.0),
            eps: FUSION_EPS,
        }
    }

    pub fn len(&self) -> usize {
        self.raw.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.numel() == 0
    }

    pub fn weights(&self) -> Vec<f32> {
        self.raw.data().iter().map(|&w| w.max(0.0)).collect()
    }

    /// `w_i / (Σ_j w_j + ε)`; each in `[0, 1]`, summing to at most 1.
    pub fn coefficients(&self) -> Vec<f32> {
        let w = self.weights();
        let denom = w.iter().sum::<f32>() + self.eps;
        w.iter().map(|&v| v / denom).collect()
    }
}

/// Normalized weighted sum of aligned maps followed by `conv`.
pub fn weighted_fuse(inputs: &[&FeatureMap], weights: &FusionWeights, conv: &Conv2d) -> Result<FeatureMap> {
    if inputs.len() < 2 {
        return Err(Error::invalid("fusion needs at least two inputs"));
    }
    if weights.len() != inputs.len() {
        return Err(Error::shape(format!(
            "{} fusion weights for {} inputs",
            weights.len(),
            inputs.len()
        )));
    }
    let shape = inputs[0].tensor.shape();
    if let Some(bad) = inputs.iter().find(|m| m.tensor.shape() != shape) {
        return Err(Error::shape(format!(
            "fusion inputs disagree: {:?} vs {:?}",
            shape,
            bad.tensor.shape()
        )));
    }
    let mut acc = vec![0.0f32; inputs[0].tensor.numel()];
    for (m, coef) in inputs.iter().zip(weights.coefficients()) {
        if coef == 0.0 {
            continue;
        }
        for (a, &v) in acc.iter_mut().zip(m.tensor.data()) {
            *a += coef * v;
        }
    }
    let mixed = Tensor::new(shape.to_vec(), acc)?;
    FeatureMap::new(conv.forward(&mixed)?, inputs[0].stride)
}

/// Feature maps ordered finest to coarsest.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevels {
    levels: Vec<FeatureMap>,
}

impl PyramidLevels {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::invalid("a pyramid needs at least two levels"));
        }
        for pair in levels.windows(2) {
            let (_, h0, w0) = pair[0].dims();
            let (_, h1, w1) = pair[1].dims();
            if pair[1].stride != 2 * pair[0].stride || h0 != 2 * h1 || w0 != 2 * w1 {
                return Err(Error::shape(format!(
                    "levels must halve exactly: stride {} {h0}x{w0} then stride {} {h1}x{w1}",
                    pair[0].stride, pair[1].stride
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[FeatureMap] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<FeatureMap> {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionNode {
    pub weights: FusionWeights,
    pub conv: Conv2d,
}

/// Number of inputs of every node, in evaluation order.
pub fn node_arity(levels: usize) -> Vec<usize> {
    let mut arity = vec![2; levels.saturating_sub(2)];
    arity.push(2);
    arity.extend(std::iter::repeat_n(3, levels.saturating_sub(2)));
    arity.push(2);
    arity
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiFpn {
    pub channels: usize,
    pub nodes: Vec<FusionNode>,
}

impl BiFpn {
    pub fn init(rng: &mut WeightInit, levels: usize, channels: usize) -> Self {
        let nodes = node_arity(levels)
            .into_iter()
            .map(|k| FusionNode {
                weights: FusionWeights::uniform(k),
                conv: Conv2d::init(rng, channels, channels, 3, ConvParams::new(1, 1)),
            })
            .collect();
        Self { channels, nodes }
    }

    /// Uniform fusion weights and identity convolutions.
    pub fn identity(levels: usize, channels: usize) -> Self {
        let nodes = node_arity(levels)
            .into_iter()
            .map(|k| FusionNode {
                weights: FusionWeights::uniform(k),
                conv: Conv2d::identity(channels, 3),
            })
            .collect();
        Self { channels, nodes }
    }

    pub fn param_count(levels: usize, channels: usize) -> usize {
        node_arity(levels)
            .into_iter()
            .map(|k| k + Conv2d::param_count(channels, channels, 3, 1))
            .sum()
    }

    pub fn forward(&self, input: &PyramidLevels) -> Result<PyramidLevels> {
        let l = input.len();
        if self.nodes.len() != 2 * (l - 1) {
            return Err(Error::shape(format!(
                "{} fusion nodes for {l} levels",
                self.nodes.len()
            )));
        }
        let ins = input.levels();
        let mut nodes = self.nodes.iter();
        let mut fuse = |maps: &[&FeatureMap]| -> Result<FeatureMap> {
            let node = nodes.next().expect("node count checked above");
            weighted_fuse(maps, &node.weights, &node.conv)
        };

        // Top-down: td[l] for l = L-2 ..= 1, with td[L-1] = in[L-1].
        let mut td: Vec<Option<FeatureMap>> = vec![None; l];
        td[l - 1] = Some(ins[l - 1].clone());
        for lvl in (1..l - 1).rev() {
            let up = resize_nearest(td[lvl + 1].as_ref().unwrap(), Resize::Up2)?;
            td[lvl] = Some(fuse(&[&ins[lvl], &up])?);
        }
        let mut out = Vec::with_capacity(l);
        let up = resize_nearest(td[1].as_ref().unwrap(), Resize::Up2)?;
        out.push(fuse(&[&ins[0], &up])?);

        // Bottom-up.
        for lvl in 1..l {
            let down = resize_nearest(&out[lvl - 1], Resize::Down2)?;
            let node = if lvl < l - 1 {
                fuse(&[&ins[lvl], td[lvl].as_ref().unwrap(), &down])?
            } else {
                fuse(&[&ins[lvl], &down])?
            };
            out.push(node);
        }
        PyramidLevels::new(out)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.nodes
            .iter()
            .flat_map(|n| {
                let mut v = vec![&n.weights.raw];
                v.extend(n.conv.tensors());
                v
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.nodes
            .iter_mut()
            .flat_map(|n| {
                let mut v = vec![&mut n.weights.raw];
                v.extend(n.conv.tensors_mut());
                v
            })
            .collect()
    }
}

pub fn bifpn_pass(levels: &PyramidLevels, bifpn: &BiFpn) -> Result<PyramidLevels> {
    bifpn.forward(levels)
}

/// Applies one window attention block per level.
pub fn neck_refine(levels: &PyramidLevels, blocks: &[WindowAttentionBlock]) -> Result<PyramidLevels> {
    if blocks.len() != levels.len() {
        return Err(Error::shape(format!(
            "{} refinement blocks for {} levels",
            blocks.len(),
            levels.len()
        )));
    }
    let refined = levels
        .levels()
        .iter()
        .zip(blocks)
        .map(|(lvl, b)| b.forward(lvl))
        .collect::<Result<Vec<_>>>()?;
    PyramidLevels::new(refined)
}

/// Where window attention sits relative to Bi-FPN fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPlacement {
    #[default]
    AfterFusion,
    BeforeFusion,
}

/// Lateral 1×1 projections, one Bi-FPN pass and window-attention refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    pub lateral: Vec<Conv2d>,
    pub bifpn: BiFpn,
    pub refine: Vec<WindowAttentionBlock>,
    pub placement: AttentionPlacement,
}

impl Neck {
    pub fn forward(&self, backbone: &[FeatureMap]) -> Result<PyramidLevels> {
        if backbone.len() != self.lateral.len() {
            return Err(Error::shape(format!(
                "{} backbone levels for {} lateral projections",
                backbone.len(),
                self.lateral.len()
            )));
        }
        let projected = backbone
            .iter()
            .zip(&self.lateral)
            .map(|(m, conv)| FeatureMap::new(conv.forward(&m.tensor)?, m.stride))
            .collect::<Result<Vec<_>>>()?;
        let levels = PyramidLevels::new(projected)?;
        match self.placement {
            AttentionPlacement::AfterFusion => neck_refine(&self.bifpn.forward(&levels)?, &self.refine),
            AttentionPlacement::BeforeFusion => self.bifpn.forward(&neck_refine(&levels, &self.refine)?),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.lateral.iter().flat_map(|c| c.tensors()).collect();
        v.extend(self.bifpn.tensors());
        v.extend(self.refine.iter().flat_map(|b| b.tensors()));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.lateral.iter_mut().flat_map(|c| c.tensors_mut()).collect();
        v.extend(self.bifpn.tensors_mut());
        v.extend(self.refine.iter_mut().flat_map(|b| b.tensors_mut()));
        v
    }
}
