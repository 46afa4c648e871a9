//! Brute-force `f64` reference implementations shared by the integration
//! tests. They are written from the definitions with plain loops and share no
//! code with the library beyond reading its tensors.

#![allow(dead_code)]

pub mod cases;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thermal_det::detection::{BBox, Detection};
use thermal_det::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense `(c, h, w)` map in `f64`.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map {
            c,
            h,
            w,
            v: vec![0.0; c * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Map {
            c: s[0],
            h: s[1],
            w: s[2],
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, val: f64) {
        self.v[(c * self.h + y) * self.w + x] = val;
    }

    pub fn concat(maps: &[Map]) -> Map {
        let (h, w) = (maps[0].h, maps[0].w);
        let mut v = Vec::new();
        for m in maps {
            v.extend_from_slice(&m.v);
        }
        Map {
            c: v.len() / (h * w),
            h,
            w,
            v,
        }
    }
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

/// Largest `|a − o| / max(|o|, 1)`.
pub fn rel_err(actual: &[f32], oracle: &[f64]) -> f64 {
    assert_eq!(actual.len(), oracle.len(), "length mismatch");
    actual
        .iter()
        .zip(oracle)
        .map(|(&a, &o)| (a as f64 - o).abs() / o.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Overwrites every parameter with `U(-bound, bound)` so that biases and
/// norm parameters are exercised too.
pub fn randomize(tensors: Vec<&mut Tensor>, rng: &mut ChaCha8Rng, bound: f32) {
    for t in tensors {
        for v in t.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
}

/// Cross-correlation with stride, zero padding, dilation and groups.
/// `weight` is `(out, in/groups, k, k)`.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &Map,
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
) -> Map {
    let span = dil * (k - 1) + 1;
    let oh = (x.h + 2 * pad - span) / stride + 1;
    let ow = (x.w + 2 * pad - span) / stride + 1;
    let cin_g = x.c / groups;
    let cout_g = out_c / groups;
    let mut out = Map::zeros(out_c, oh, ow);
    for o in 0..out_c {
        let g = o / cout_g;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for ci in 0..cin_g {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dil) as isize - pad as isize;
                            let ix = (ox * stride + kx * dil) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            let wv = weight[((o * cin_g + ci) * k + ky) * k + kx];
                            acc += wv * x.at(g * cin_g + ci, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(o, oy, ox, acc);
            }
        }
    }
    out
}

/// GhostConv from the definition: `m` primary maps, then for primary map
/// `i` the cheap maps `j = 0..s−1` at channel `m + i(s−1) + j`, each a
/// `d×d` filter slid over that single primary map.
#[allow(clippy::too_many_arguments)]
pub fn ghost(
    x: &Map,
    primary_w: &[f64],
    primary_b: &[f64],
    m: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cheap_w: &[f64],
    cheap_b: &[f64],
    s: usize,
    d: usize,
) -> Map {
    let p = conv(x, primary_w, primary_b, m, k, stride, pad, 1, 1);
    let mut out = Map::zeros(m * s, p.h, p.w);
    let r = (d / 2) as isize;
    for c in 0..m {
        for y in 0..p.h {
            for xx in 0..p.w {
                out.set(c, y, xx, p.at(c, y, xx));
            }
        }
    }
    for i in 0..m {
        for j in 0..s - 1 {
            let idx = i * (s - 1) + j;
            for y in 0..p.h {
                for xx in 0..p.w {
                    let mut acc = cheap_b[idx];
                    for dy in 0..d {
                        for dx in 0..d {
                            let sy = y as isize + dy as isize - r;
                            let sx = xx as isize + dx as isize - r;
                            if sy >= 0 && sx >= 0 && (sy as usize) < p.h && (sx as usize) < p.w {
                                acc += cheap_w[(idx * d + dy) * d + dx] * p.at(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(m + idx, y, xx, acc);
                }
            }
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(rows, d_in) · (d_in, d_out) + b`.
pub fn affine(x: &[f64], d_in: usize, w: &[f64], b: &[f64], d_out: usize) -> Vec<f64> {
    let rows = x.len() / d_in;
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for j in 0..d_out {
            let mut acc = b[j];
            for i in 0..d_in {
                acc += x[r * d_in + i] * w[i * d_out + j];
            }
            out[r * d_out + j] = acc;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for (i, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]);
        }
    }
    out
}

/// Weights of one attention layer in `f64`, `(d_in, d_out)` layout.
pub struct Attn {
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Option<(Vec<f64>, Vec<f64>)>,
}

impl Attn {
    pub fn from(w: &thermal_det::attention::AttentionWeights) -> Self {
        Attn {
            wq: f64s(&w.query.weight),
            bq: f64s(&w.query.bias),
            wk: f64s(&w.key.weight),
            bk: f64s(&w.key.bias),
            wv: f64s(&w.value.weight),
            bv: f64s(&w.value.bias),
            wo: w.output.as_ref().map(|o| (f64s(&o.weight), f64s(&o.bias))),
        }
    }
}

/// Multi-head attention where token `i` may only attend to the tokens in
/// `keys(i)`. Returns the output and the `(heads, t, t)` weights (zero for
/// excluded keys).
pub fn attention_subset(
    x: &[f64],
    d: usize,
    heads: usize,
    a: &Attn,
    keys: &dyn Fn(usize) -> Vec<usize>,
) -> (Vec<f64>, Vec<f64>) {
    let t = x.len() / d;
    let q = affine(x, d, &a.wq, &a.bq, d);
    let k = affine(x, d, &a.wk, &a.bk, d);
    let v = affine(x, d, &a.wv, &a.bv, d);
    let dk = d / heads;
    let mut z = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        for i in 0..t {
            let allowed = keys(i);
            let logits: Vec<f64> = allowed
                .iter()
                .map(|&j| {
                    (0..dk)
                        .map(|c| q[i * d + h * dk + c] * k[j * d + h * dk + c])
                        .sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let sum: f64 = e.iter().sum();
            for (n, &j) in allowed.iter().enumerate() {
                let p = e[n] / sum;
                probs[(h * t + i) * t + j] = p;
                for c in 0..dk {
                    z[i * d + h * dk + c] += p * v[j * d + h * dk + c];
                }
            }
        }
    }
    let out = match &a.wo {
        Some((w, b)) => affine(&z, d, w, b, d),
        None => z,
    };
    (out, probs)
}

pub fn attention(x: &[f64], d: usize, heads: usize, a: &Attn) -> (Vec<f64>, Vec<f64>) {
    let t = x.len() / d;
    attention_subset(x, d, heads, a, &|_| (0..t).collect())
}

/// `(c, h, w)` map to `(h·w, c)` tokens.
pub fn tokens(m: &Map) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.v.len());
    for y in 0..m.h {
        for x in 0..m.w {
            for c in 0..m.c {
                out.push(m.at(c, y, x));
            }
        }
    }
    out
}

pub fn untokens(t: &[f64], c: usize, h: usize, w: usize) -> Map {
    let mut m = Map::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                m.set(ch, y, x, t[(y * w + x) * c + ch]);
            }
        }
    }
    m
}

pub enum NormRef {
    Layer(Vec<f64>, Vec<f64>),
    Linear(Vec<f64>, Vec<f64>),
}

impl NormRef {
    pub fn from(n: &thermal_det::attention::Norm) -> Self {
        match n {
            thermal_det::attention::Norm::Layer { gamma, beta } => NormRef::Layer(f64s(gamma), f64s(beta)),
            thermal_det::attention::Norm::Linear(l) => NormRef::Linear(f64s(&l.weight), f64s(&l.bias)),
        }
    }

    pub fn apply(&self, x: &[f64], d: usize) -> Vec<f64> {
        match self {
            NormRef::Layer(g, b) => layer_norm(x, g, b, 1e-5),
            NormRef::Linear(w, b) => affine(x, d, w, b, d),
        }
    }
}

/// Window attention block: each real pixel attends to the real pixels of
/// its own `mh×mw` tile (tiles anchored at the top-left, partial tiles at
/// the bottom/right edges), then a pointwise GELU MLP, both residual.
pub fn window_block(x: &Map, b: &thermal_det::attention::WindowAttentionBlock) -> Map {
    let d = x.c;
    let (mh, mw) = (b.window_h, b.window_w);
    let heads = b.spec.num_heads;
    let n1 = NormRef::from(&b.norm1);
    let n2 = NormRef::from(&b.norm2);
    let attn = Attn::from(&b.attention);
    let normed = n1.apply(&tokens(x), d);
    let mut mid = tokens(x);
    for ty in (0..x.h).step_by(mh) {
        for tx in (0..x.w).step_by(mw) {
            let cells: Vec<(usize, usize)> = (ty..(ty + mh).min(x.h))
                .flat_map(|y| (tx..(tx + mw).min(x.w)).map(move |xx| (y, xx)))
                .collect();
            let mut local = Vec::with_capacity(cells.len() * d);
            for &(y, xx) in &cells {
                local.extend_from_slice(&normed[(y * x.w + xx) * d..(y * x.w + xx + 1) * d]);
            }
            let (out, _) = attention(&local, d, heads, &attn);
            for (n, &(y, xx)) in cells.iter().enumerate() {
                for c in 0..d {
                    mid[(y * x.w + xx) * d + c] += out[n * d + c];
                }
            }
        }
    }
    let hidden: Vec<f64> = affine(
        &n2.apply(&mid, d),
        d,
        &f64s(&b.mlp_in.weight),
        &f64s(&b.mlp_in.bias),
        b.spec.mlp_hidden,
    )
    .into_iter()
    .map(gelu)
    .collect();
    let mlp = affine(
        &hidden,
        b.spec.mlp_hidden,
        &f64s(&b.mlp_out.weight),
        &f64s(&b.mlp_out.bias),
        d,
    );
    let out: Vec<f64> = mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
    untokens(&out, d, x.h, x.w)
}

pub fn upsample(m: &Map) -> Map {
    let mut out = Map::zeros(m.c, 2 * m.h, 2 * m.w);
    for c in 0..m.c {
        for y in 0..2 * m.h {
            for x in 0..2 * m.w {
                out.set(c, y, x, m.at(c, y / 2, x / 2));
            }
        }
    }
    out
}

pub fn maxpool(m: &Map) -> Map {
    let mut out = Map::zeros(m.c, m.h / 2, m.w / 2);
    for c in 0..m.c {
        for y in 0..m.h / 2 {
            for x in 0..m.w / 2 {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(m.at(c, 2 * y + dy, 2 * x + dx));
                    }
                }
                out.set(c, y, x, best);
            }
        }
    }
    out
}

fn fuse_node(inputs: &[&Map], node: &thermal_det::neck::FusionNode) -> Map {
    let raw = f64s(&node.weights.raw);
    let w: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let denom: f64 = w.iter().sum::<f64>() + 1e-4;
    let mut mixed = Map::zeros(inputs[0].c, inputs[0].h, inputs[0].w);
    for (m, wi) in inputs.iter().zip(&w) {
        for (a, v) in mixed.v.iter_mut().zip(&m.v) {
            *a += wi / denom * v;
        }
    }
    let cv = &node.conv;
    conv(
        &mixed,
        &f64s(&cv.weight),
        &f64s(&cv.bias),
        cv.out_channels(),
        3,
        1,
        1,
        1,
        1,
    )
}

/// Four-level Bi-FPN written out node by node:
/// `td2 = F(p2, up p3)`, `td1 = F(p1, up td2)`, `o0 = F(p0, up td1)`,
/// `o1 = F(p1, td1, down o0)`, `o2 = F(p2, td2, down o1)`, `o3 = F(p3, down o2)`.
pub fn bifpn4(p: &[Map], b: &thermal_det::neck::BiFpn) -> Vec<Map> {
    let n = &b.nodes;
    let td2 = fuse_node(&[&p[2], &upsample(&p[3])], &n[0]);
    let td1 = fuse_node(&[&p[1], &upsample(&td2)], &n[1]);
    let o0 = fuse_node(&[&p[0], &upsample(&td1)], &n[2]);
    let o1 = fuse_node(&[&p[1], &td1, &maxpool(&o0)], &n[3]);
    let o2 = fuse_node(&[&p[2], &td2, &maxpool(&o1)], &n[4]);
    let o3 = fuse_node(&[&p[3], &maxpool(&o2)], &n[5]);
    vec![o0, o1, o2, o3]
}

/// Decodes every anchor of every cell with the YOLOv5 box formulas.
pub fn decode(
    logits: &Map,
    anchors: &[(f64, f64)],
    classes: usize,
    stride: f64,
    img: (f64, f64),
    conf: f64,
) -> Vec<Detection> {
    let per = 5 + classes;
    let mut out = Vec::new();
    for gy in 0..logits.h {
        for gx in 0..logits.w {
            for (a, &(aw, ah)) in anchors.iter().enumerate() {
                let l = |c: usize| logits.at(a * per + c, gy, gx);
                let mut best = (0, -1.0);
                for c in 0..classes {
                    let p = sigmoid(l(5 + c));
                    if p > best.1 {
                        best = (c, p);
                    }
                }
                let score = sigmoid(l(4)) * best.1;
                if score < conf {
                    continue;
                }
                let cx = (2.0 * sigmoid(l(0)) - 0.5 + gx as f64) * stride;
                let cy = (2.0 * sigmoid(l(1)) - 0.5 + gy as f64) * stride;
                let w = (2.0 * sigmoid(l(2))).powi(2) * aw;
                let h = (2.0 * sigmoid(l(3))).powi(2) * ah;
                let x1 = (cx - w / 2.0).clamp(0.0, img.0);
                let y1 = (cy - h / 2.0).clamp(0.0, img.1);
                let x2 = (cx + w / 2.0).clamp(0.0, img.0);
                let y2 = (cy + h / 2.0).clamp(0.0, img.1);
                if x2 > x1 && y2 > y1 {
                    out.push(Detection {
                        class_id: best.0,
                        score,
                        bbox: BBox::new(x1, y1, x2, y2),
                    });
                }
            }
        }
    }
    out
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Random detections on an integer pixel grid, sides 3..=10, inside
/// `extent×extent`.
pub fn grid_detections(rng: &mut ChaCha8Rng, n: usize, classes: usize, extent: u32) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let w = rng.random_range(3..=10) as f64;
            let h = rng.random_range(3..=10) as f64;
            let x = rng.random_range(0..extent - 10) as f64;
            let y = rng.random_range(0..extent - 10) as f64;
            Detection {
                class_id: rng.random_range(0..classes),
                score: rng.random_range(0.05..1.0),
                bbox: BBox::new(x, y, x + w, y + h),
            }
        })
        .collect()
}

/// Hard NMS by definition: a box survives iff no surviving same-class box
/// ranked above it overlaps it by more than `thr`.
pub fn hard_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let clear = kept
            .iter()
            .all(|&k| dets[k].class_id != dets[i].class_id || iou(&dets[k].bbox, &dets[i].bbox) <= thr);
        if clear {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}

pub mod slow_eval {
    //! Evaluation by exhaustive scanning: for every (class, threshold) the
    //! full detection × ground-truth IoU table is built per image.

    use super::iou;
    use std::collections::BTreeSet;
    use thermal_det::detection::ImageDetection;
    use thermal_det::eval::GroundTruth;

    pub fn ap_at(dets: &[ImageDetection], gts: &[GroundTruth], class: usize, thr: f64) -> Option<f64> {
        let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
        if g.is_empty() {
            return None;
        }
        let mut d: Vec<&ImageDetection> = dets.iter().filter(|d| d.detection.class_id == class).collect();
        // Within an image, equal scores are ordered by box coordinates.
        d.sort_by(|a, b| {
            let (x, y) = (&a.detection, &b.detection);
            y.score
                .total_cmp(&x.score)
                .then(x.bbox.x1.total_cmp(&y.bbox.x1))
                .then(x.bbox.y1.total_cmp(&y.bbox.y1))
                .then(x.bbox.x2.total_cmp(&y.bbox.x2))
                .then(x.bbox.y2.total_cmp(&y.bbox.y2))
        });
        let mut used = vec![false; g.len()];
        let mut outcomes: Vec<(f64, bool)> = Vec::new();
        for det in &d {
            let table: Vec<(usize, f64)> = g
                .iter()
                .enumerate()
                .filter(|(j, gt)| gt.image_id == det.image_id && !used[*j])
                .map(|(j, gt)| (j, iou(&det.detection.bbox, &gt.bbox)))
                .collect();
            // Highest IoU; equal IoUs go to the ground truth with the
            // smallest coordinates.
            let best = table
                .iter()
                .copied()
                .fold(None::<(usize, f64)>, |acc, (j, o)| match acc {
                    None => Some((j, o)),
                    Some((bj, bo)) => {
                        let (a, b) = (&g[j].bbox, &g[bj].bbox);
                        let smaller = (a.x1, a.y1, a.x2, a.y2) < (b.x1, b.y1, b.x2, b.y2);
                        if o > bo || (o == bo && smaller) {
                            Some((j, o))
                        } else {
                            acc
                        }
                    }
                });
            let tp = matches!(best, Some((_, o)) if o >= thr);
            if let (true, Some((j, _))) = (tp, best) {
                used[j] = true;
            }
            outcomes.push((det.detection.score, tp));
        }
        outcomes.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
        // Precision at each recall level, envelope from the right, area.
        let n = g.len() as f64;
        let mut pts = Vec::new();
        let mut tp = 0.0;
        for (i, o) in outcomes.iter().enumerate() {
            if o.1 {
                tp += 1.0;
            }
            pts.push((tp / n, tp / (i + 1) as f64));
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for i in 0..pts.len() {
            let p_env = pts[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (pts[i].0 - prev_r) * p_env;
            prev_r = pts[i].0;
        }
        Some(ap)
    }

    pub fn map_at(dets: &[ImageDetection], gts: &[GroundTruth], thr: f64) -> Option<f64> {
        let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
        if classes.is_empty() {
            return None;
        }
        let aps: Vec<f64> = classes.iter().map(|&c| ap_at(dets, gts, c, thr).unwrap()).collect();
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}
