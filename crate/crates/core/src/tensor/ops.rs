use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        Self::new(1, 0)
    }
}

/// 2-D cross-correlation (no kernel flip, the deep-learning convention)
/// of a `(c, h, w)` input with `(n, c, k, k)` filters plus a per-filter bias.
pub fn conv2d(input: &Tensor, filters: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_with(input, filters, bias, ConvParams::new(stride, padding))
}

/// Cross-correlation with dilation and channel groups. Filters are
/// `(n, c / groups, kh, kw)`; output channel `o` reads input group
/// `o / (n / groups)`.
pub fn conv2d_with(input: &Tensor, filters: &Tensor, bias: &Tensor, params: ConvParams) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (n, cg, kh, kw) = match filters.shape()[..] {
        [n, cg, kh, kw] => (n, cg, kh, kw),
        _ => {
            return Err(Error::shape(format!(
                "filters must be (out, in, kh, kw), got {:?}",
                filters.shape()
            )))
        }
    };
    let ConvParams {
        stride,
        padding,
        dilation,
        groups,
    } = params;
    if stride == 0 || dilation == 0 || groups == 0 {
        return Err(Error::invalid("stride, dilation and groups must be positive"));
    }
    if c % groups != 0 || n % groups != 0 || cg * groups != c {
        return Err(Error::shape(format!(
            "input has {c} channels but filters expect {cg} per group over {groups} group(s)"
        )));
    }
    if bias.shape() != [n] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {n} filters",
            bias.shape()
        )));
    }
    let eff_kh = dilation * (kh - 1) + 1;
    let eff_kw = dilation * (kw - 1) + 1;
    if eff_kh > h + 2 * padding || eff_kw > w + 2 * padding {
        return Err(Error::shape(format!(
            "kernel {eff_kh}x{eff_kw} exceeds padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - eff_kh) / stride + 1;
    let ow = (w + 2 * padding - eff_kw) / stride + 1;
    let per_group_out = n / groups;

    let x = input.data();
    let f = filters.data();
    let mut out = vec![0.0f32; n * oh * ow];
    for (o, plane) in out.chunks_mut(oh * ow).enumerate() {
        plane.fill(bias.data()[o]);
        let group = o / per_group_out;
        for ci in 0..cg {
            let src = &x[(group * cg + ci) * h * w..(group * cg + ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = f[((o * cg + ci) * kh + ky) * kw + kx];
                    let dy = (ky * dilation) as isize - padding as isize;
                    let dx = (kx * dilation) as isize - padding as isize;
                    for oy in 0..oh {
                        let iy = (oy * stride) as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + dx;
                            if ix >= 0 && ix < w as isize {
                                *d += wv * src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, oh, ow], out)
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(kernels::gelu)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(kernels::sigmoid)
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    let mut row = vec![0.0f32; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (k, r) in row.iter_mut().enumerate() {
                *r = out[base + k * inner];
            }
            kernels::softmax_in_place(&mut row);
            for (k, r) in row.iter().enumerate() {
                out[base + k * inner] = *r;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Matrix product over the last axis with a `(d_in, d_out)` weight, plus bias.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d_in = *x.shape().last().unwrap();
    let (w_in, d_out) = match weight.shape()[..] {
        [a, b] => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "linear weight must be (d_in, d_out), got {:?}",
                weight.shape()
            )))
        }
    };
    if w_in != d_in {
        return Err(Error::shape(format!(
            "input last dimension {d_in} does not match weight rows {w_in}"
        )));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match d_out {d_out}",
            bias.shape()
        )));
    }
    let out = kernels::affine(x.data(), d_in, weight.data(), bias.data(), d_out);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(shape, out)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = *x.shape().last().unwrap();
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(format!(
            "gamma/beta shapes {:?}/{:?} do not match last dimension {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut out = vec![0.0f32; x.numel()];
    for (row, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        kernels::layer_norm_row(row, gamma.data(), beta.data(), eps, dst);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Elementwise sum of equally shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("cannot add {:?} and {:?}", a.shape(), b.shape())));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
    )
}

/// Concatenates `(c_i, h, w)` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
    let (_, h, w) = first.dims3()?;
    let mut channels = 0;
    let mut data = Vec::new();
    for p in parts {
        let (c, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(format!("spatial dims {ph}x{pw} differ from {h}x{w}")));
        }
        channels += c;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![channels, h, w], data)
}
