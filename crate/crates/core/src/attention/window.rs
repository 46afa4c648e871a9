//! Non-overlapping window attention.
//!
//! A `(c, h, w)` map is zero-padded on the bottom/right to multiples of the
//! window size and cut into `n = ⌈h/mh⌉·⌈w/mw⌉` tiles in raster order.
//! Padded cells are excluded as attention keys through an additive `-inf`
//! mask shared by all channels.

use rayon::prelude::*;

use super::{from_tokens, to_tokens, AttentionSpec, AttentionWeights};
use crate::blocks::Linear;
use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::{self, FeatureMap, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGrid {
    pub window_h: usize,
    pub window_w: usize,
    pub rows: usize,
    pub cols: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl WindowGrid {
    pub fn new(channels: usize, height: usize, width: usize, window_h: usize, window_w: usize) -> Result<Self> {
        if window_h == 0 || window_w == 0 {
            return Err(Error::invalid("window dimensions must be positive"));
        }
        let rows = height.div_ceil(window_h);
        let cols = width.div_ceil(window_w);
        Ok(Self {
            window_h,
            window_w,
            rows,
            cols,
            pad_h: rows * window_h - height,
            pad_w: cols * window_w - width,
            channels,
            height,
            width,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.rows * self.cols
    }

    pub fn window_len(&self) -> usize {
        self.window_h * self.window_w
    }

    /// Source pixel `(y, x)` of a window cell, or `None` for padding.
    pub fn source(&self, window: usize, cell: usize) -> Option<(usize, usize)> {
        let y = (window / self.cols) * self.window_h + cell / self.window_w;
        let x = (window % self.cols) * self.window_w + cell % self.window_w;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowMask {
    /// `(n, mh·mw)`: true where the cell holds real content.
    pub valid: Vec<bool>,
    /// `(n, mh·mw, mh·mw)` additive logits: 0 for real keys, `-inf` for padding.
    pub additive: Vec<f32>,
    pub window_len: usize,
}

impl WindowMask {
    fn new(grid: &WindowGrid) -> Self {
        let len = grid.window_len();
        let n = grid.n_windows();
        let valid: Vec<bool> = (0..n * len).map(|i| grid.source(i / len, i % len).is_some()).collect();
        let mut additive = Vec::with_capacity(n * len * len);
        for w in 0..n {
            let keys = &valid[w * len..(w + 1) * len];
            for _ in 0..len {
                additive.extend(keys.iter().map(|&k| if k { 0.0 } else { f32::NEG_INFINITY }));
            }
        }
        Self {
            valid,
            additive,
            window_len: len,
        }
    }

    pub fn window(&self, w: usize) -> &[f32] {
        let l2 = self.window_len * self.window_len;
        &self.additive[w * l2..(w + 1) * l2]
    }

    pub fn excluded_cells(&self) -> usize {
        self.valid.iter().filter(|&&v| !v).count()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }
}

/// Tiles `(c, h, w)` into `(n, mh, mw, c)` windows.
pub fn window_partition(x: &Tensor, mh: usize, mw: usize) -> Result<(Tensor, WindowGrid, WindowMask)> {
    let (c, h, w) = x.dims3()?;
    let grid = WindowGrid::new(c, h, w, mh, mw)?;
    let len = grid.window_len();
    let src = x.data();
    let mut out = vec![0.0f32; grid.n_windows() * len * c];
    for win in 0..grid.n_windows() {
        for cell in 0..len {
            if let Some((y, xx)) = grid.source(win, cell) {
                let dst = &mut out[(win * len + cell) * c..(win * len + cell + 1) * c];
                for (ch, d) in dst.iter_mut().enumerate() {
                    *d = src[(ch * h + y) * w + xx];
                }
            }
        }
    }
    let windows = Tensor::new(vec![grid.n_windows(), mh, mw, c], out)?;
    let mask = WindowMask::new(&grid);
    Ok((windows, grid, mask))
}

/// Reassembles the `(c, h, w)` map, dropping padded cells.
pub fn window_unpartition(windows: &Tensor, grid: &WindowGrid) -> Result<Tensor> {
    let expect = [grid.n_windows(), grid.window_h, grid.window_w, grid.channels];
    if windows.shape() != expect {
        return Err(Error::shape(format!(
            "windows {:?} inconsistent with grid {expect:?}",
            windows.shape()
        )));
    }
    let (c, h, w) = (grid.channels, grid.height, grid.width);
    let len = grid.window_len();
    let src = windows.data();
    let mut out = vec![0.0f32; c * h * w];
    for win in 0..grid.n_windows() {
        for cell in 0..len {
            if let Some((y, x)) = grid.source(win, cell) {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = src[(win * len + cell) * c + ch];
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    Linear,
}

/// Token normalization ahead of the attention and MLP sublayers: layer
/// normalization over channels, or a learned channel-mixing linear map.
#[derive(Clone, Debug, PartialEq)]
pub enum Norm {
    Layer { gamma: Tensor, beta: Tensor },
    Linear(Linear),
}

impl Norm {
    pub fn new(kind: NormKind, d: usize) -> Self {
        match kind {
            NormKind::LayerNorm => Norm::Layer {
                gamma: Tensor::full(&[d], 1.0),
                beta: Tensor::zeros(&[d]),
            },
            NormKind::Linear => Norm::Linear(Linear::identity(d)),
        }
    }

    pub fn param_count(kind: NormKind, d: usize) -> usize {
        match kind {
            NormKind::LayerNorm => 2 * d,
            NormKind::Linear => Linear::param_count(d, d),
        }
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        match self {
            Norm::Layer { gamma, beta } => tensor::layer_norm(tokens, gamma, beta, LAYER_NORM_EPS),
            Norm::Linear(l) => l.forward(tokens),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Norm::Layer { gamma, beta } => vec![gamma, beta],
            Norm::Linear(l) => l.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Norm::Layer { gamma, beta } => vec![gamma, beta],
            Norm::Linear(l) => l.tensors_mut(),
        }
    }
}

/// `ẑ = WA(LN(z)) + z`, `out = MLP(LN(ẑ)) + ẑ` with masked multi-head
/// attention inside each window and a `linear → GELU → linear` MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowAttentionBlock {
    pub spec: AttentionSpec,
    pub window_h: usize,
    pub window_w: usize,
    pub norm1: Norm,
    pub attention: AttentionWeights,
    pub norm2: Norm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl WindowAttentionBlock {
    pub fn init(rng: &mut WeightInit, spec: AttentionSpec, window: (usize, usize), norm: NormKind) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        Ok(Self {
            spec,
            window_h: window.0,
            window_w: window.1,
            norm1: Norm::new(norm, d),
            attention: AttentionWeights::init(rng, d, true),
            norm2: Norm::new(norm, d),
            mlp_in: Linear::init(rng, d, spec.mlp_hidden),
            mlp_out: Linear::init(rng, spec.mlp_hidden, d),
        })
    }

    /// Block whose attention and MLP weights are all zero.
    pub fn zeros(spec: AttentionSpec, window: (usize, usize), norm: NormKind) -> Self {
        let d = spec.embed_dim;
        Self {
            spec,
            window_h: window.0,
            window_w: window.1,
            norm1: Norm::new(norm, d),
            attention: AttentionWeights::zeros(d, true),
            norm2: Norm::new(norm, d),
            mlp_in: Linear::zeros(d, spec.mlp_hidden),
            mlp_out: Linear::zeros(spec.mlp_hidden, d),
        }
    }

    pub fn param_count(spec: &AttentionSpec, norm: NormKind) -> usize {
        let d = spec.embed_dim;
        2 * Norm::param_count(norm, d)
            + AttentionWeights::param_count(d, true)
            + Linear::param_count(d, spec.mlp_hidden)
            + Linear::param_count(spec.mlp_hidden, d)
    }

    /// Masked attention applied independently inside every window.
    pub fn window_attention(&self, x: &Tensor) -> Result<Tensor> {
        let (c, _, _) = x.dims3()?;
        if c != self.spec.embed_dim {
            return Err(Error::shape(format!(
                "window attention expects {} channels, got {c}",
                self.spec.embed_dim
            )));
        }
        let (windows, grid, mask) = window_partition(x, self.window_h, self.window_w)?;
        let chunk = grid.window_len() * c;
        let view = self.attention.view();
        let heads = self.spec.num_heads;
        let outs: Vec<Vec<f32>> = windows
            .data()
            .par_chunks(chunk)
            .enumerate()
            .map(|(w, tokens)| {
                let m = (!mask.all_valid()).then(|| mask.window(w));
                view.forward(tokens, c, heads, m).out
            })
            .collect();
        let attended = Tensor::new(windows.shape().to_vec(), outs.concat())?;
        window_unpartition(&attended, &grid)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let (_, h, w) = x.dims();
        let tokens = to_tokens(&x.tensor)?;
        let normed = from_tokens(&self.norm1.forward(&tokens)?, h, w)?;
        let wa = self.window_attention(&normed)?;
        let mid = tensor::add(&x.tensor, &wa)?;
        let mid_tokens = to_tokens(&mid)?;
        let mlp = self
            .mlp_out
            .forward(&tensor::gelu(&self.mlp_in.forward(&self.norm2.forward(&mid_tokens)?)?))?;
        let out = tensor::add(&mid_tokens, &mlp)?;
        FeatureMap::new(from_tokens(&out, h, w)?, x.stride)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.norm1.tensors();
        v.extend(self.attention.tensors());
        v.extend(self.norm2.tensors());
        v.extend(self.mlp_in.tensors());
        v.extend(self.mlp_out.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.norm1.tensors_mut();
        v.extend(self.attention.tensors_mut());
        v.extend(self.norm2.tensors_mut());
        v.extend(self.mlp_in.tensors_mut());
        v.extend(self.mlp_out.tensors_mut());
        v
    }
}

pub fn window_attention_block(x: &FeatureMap, block: &WindowAttentionBlock) -> Result<FeatureMap> {
    block.forward(x)
}
