//! Backbone building blocks: plain convolution, GhostConv, the Ghost
//! bottleneck and ASPP.
//!
//! A GhostConv computes `m` primary maps with an ordinary `k×k` convolution,
//! then derives `s − 1` further maps from each primary map with a depthwise
//! `d×d` convolution. The primary maps are kept, so the block emits
//! `n = m·s` channels laid out as `[primary 0..m | cheap maps]`, where cheap
//! map `j` of primary `i` sits at channel `m + i·(s − 1) + j`.
//!
//! Batch normalization is not modelled; any inference-time affine is assumed
//! folded into the conv bias.

use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::{self, concat_channels, conv2d_with, ConvParams, Tensor};

/// Convolution weights plus geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub params: ConvParams,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, params: ConvParams) -> Result<Self> {
        let [n, _, kh, kw] = weight.shape()[..] else {
            return Err(Error::shape(format!(
                "conv weight must be rank 4, got {:?}",
                weight.shape()
            )));
        };
        if kh != kw {
            return Err(Error::shape(format!("non-square kernel {kh}x{kw}")));
        }
        if bias.shape() != [n] {
            return Err(Error::shape(format!(
                "bias {:?} does not match {n} filters",
                bias.shape()
            )));
        }
        Ok(Self { weight, bias, params })
    }

    /// All-zero weights and bias.
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, params: ConvParams) -> Self {
        Self {
            weight: Tensor::zeros(&[out_channels, in_channels / params.groups, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
            params,
        }
    }

    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(
        rng: &mut WeightInit,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        params: ConvParams,
    ) -> Self {
        let per_group = in_channels / params.groups;
        Self {
            weight: rng.uniform_fan_in(&[out_channels, per_group, kernel, kernel], per_group * kernel * kernel),
            bias: Tensor::zeros(&[out_channels]),
            params,
        }
    }

    /// Per-channel identity `k×k` kernel (centre tap 1) with zero bias.
    pub fn identity(channels: usize, kernel: usize) -> Self {
        let mut conv = Self::zeros(channels, channels, kernel, ConvParams::new(1, kernel / 2));
        let centre = kernel / 2;
        for c in 0..channels {
            conv.weight.data_mut()[((c * channels + c) * kernel + centre) * kernel + centre] = 1.0;
        }
        conv
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1] * self.params.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_with(x, &self.weight, &self.bias, self.params)
    }

    /// Weights plus biases of a convolution with this geometry.
    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize, groups: usize) -> usize {
        out_channels * (in_channels / groups) * kernel * kernel + out_channels
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Dense layer over the last axis, weight stored `(d_in, d_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [_, d_out] = weight.shape()[..] else {
            return Err(Error::shape(format!(
                "linear weight must be (d_in, d_out), got {:?}",
                weight.shape()
            )));
        };
        if bias.shape() != [d_out] {
            return Err(Error::shape(format!(
                "bias {:?} does not match d_out {d_out}",
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn init(rng: &mut WeightInit, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: rng.uniform_fan_in(&[d_in, d_out], d_in),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::linear(x, &self.weight, &self.bias)
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GhostConvSpec {
    pub in_channels: usize,
    pub primary_out: usize,
    pub total_out: usize,
    pub primary_kernel: usize,
    pub cheap_kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl GhostConvSpec {
    /// Spec with "same" padding for the primary kernel.
    pub fn new(in_channels: usize, total_out: usize, ratio: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            primary_out: total_out / ratio.max(1),
            total_out,
            primary_kernel: kernel,
            cheap_kernel: 3,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.primary_out;
        let n = self.total_out;
        if self.in_channels == 0 || m == 0 || n == 0 {
            return Err(Error::invalid("ghost conv channel counts must be positive"));
        }
        if m > n || !n.is_multiple_of(m) {
            return Err(Error::invalid(format!(
                "total_out {n} must be a positive multiple of primary_out {m}"
            )));
        }
        if self.primary_kernel == 0 || self.cheap_kernel.is_multiple_of(2) || self.stride == 0 {
            return Err(Error::invalid(
                "kernels must be positive, cheap kernel odd, stride positive",
            ));
        }
        Ok(())
    }

    /// `s = n / m`: maps per primary map, the primary map included.
    pub fn ratio(&self) -> usize {
        self.total_out / self.primary_out
    }

    pub fn cheap_maps(&self) -> usize {
        self.primary_out * (self.ratio() - 1)
    }

    pub fn param_count(&self) -> GhostParamCount {
        let c = self.in_channels;
        let k = self.primary_kernel;
        let d = self.cheap_kernel;
        GhostParamCount {
            primary_weights: c * k * k * self.primary_out,
            cheap_weights: self.cheap_maps() * d * d,
            standard_weights: c * k * k * self.total_out,
            bias: self.total_out,
        }
    }
}

/// Parameter budget of a GhostConv next to the plain convolution with the
/// same input and output widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GhostParamCount {
    pub primary_weights: usize,
    pub cheap_weights: usize,
    pub standard_weights: usize,
    pub bias: usize,
}

impl GhostParamCount {
    pub fn ghost_weights(&self) -> usize {
        self.primary_weights + self.cheap_weights
    }

    pub fn ghost_total(&self) -> usize {
        self.ghost_weights() + self.bias
    }

    pub fn standard_total(&self) -> usize {
        self.standard_weights + self.bias
    }

    pub fn ratio(&self) -> f64 {
        self.ghost_total() as f64 / self.standard_total() as f64
    }
}

pub fn ghost_param_count(spec: &GhostConvSpec) -> GhostParamCount {
    spec.param_count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GhostConv {
    pub spec: GhostConvSpec,
    pub primary: Conv2d,
    /// Depthwise `(m·(s−1), 1, d, d)` filters; absent when `s = 1`.
    pub cheap: Option<Conv2d>,
}

impl GhostConv {
    pub fn new(spec: GhostConvSpec, primary: Conv2d, cheap: Option<Conv2d>) -> Result<Self> {
        spec.validate()?;
        let m = spec.primary_out;
        let k = spec.primary_kernel;
        if primary.weight.shape() != [m, spec.in_channels, k, k] {
            return Err(Error::shape(format!(
                "primary filters {:?} do not match spec ({m}, {}, {k}, {k})",
                primary.weight.shape(),
                spec.in_channels
            )));
        }
        let cheap_maps = spec.cheap_maps();
        match (&cheap, cheap_maps) {
            (None, 0) => {}
            (Some(c), n) if n > 0 => {
                let d = spec.cheap_kernel;
                if c.weight.shape() != [n, 1, d, d] || c.params.groups != m {
                    return Err(Error::shape(format!(
                        "cheap filters {:?} (groups {}) do not match ({n}, 1, {d}, {d}) over {m} groups",
                        c.weight.shape(),
                        c.params.groups
                    )));
                }
            }
            _ => {
                return Err(Error::shape(format!(
                    "spec needs {cheap_maps} cheap maps but cheap filters are {}",
                    if cheap.is_some() { "present" } else { "absent" }
                )))
            }
        }
        Ok(Self { spec, primary, cheap })
    }

    fn cheap_params(spec: &GhostConvSpec) -> ConvParams {
        ConvParams::new(1, spec.cheap_kernel / 2).with_groups(spec.primary_out)
    }

    fn primary_params(spec: &GhostConvSpec) -> ConvParams {
        ConvParams::new(spec.stride, spec.padding)
    }

    pub fn zeros(spec: GhostConvSpec) -> Result<Self> {
        spec.validate()?;
        let primary = Conv2d::zeros(
            spec.in_channels,
            spec.primary_out,
            spec.primary_kernel,
            Self::primary_params(&spec),
        );
        let cheap = (spec.ratio() > 1).then(|| {
            Conv2d::zeros(
                spec.primary_out,
                spec.cheap_maps(),
                spec.cheap_kernel,
                Self::cheap_params(&spec),
            )
        });
        Self::new(spec, primary, cheap)
    }

    pub fn init(rng: &mut WeightInit, spec: GhostConvSpec) -> Result<Self> {
        spec.validate()?;
        let primary = Conv2d::init(
            rng,
            spec.in_channels,
            spec.primary_out,
            spec.primary_kernel,
            Self::primary_params(&spec),
        );
        let cheap = (spec.ratio() > 1).then(|| {
            Conv2d::init(
                rng,
                spec.primary_out,
                spec.cheap_maps(),
                spec.cheap_kernel,
                Self::cheap_params(&spec),
            )
        });
        Self::new(spec, primary, cheap)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, _, _) = x.dims3()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "ghost conv expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        let primary = self.primary.forward(x)?;
        match &self.cheap {
            None => Ok(primary),
            Some(cheap) => {
                let derived = cheap.forward(&primary)?;
                concat_channels(&[&primary, &derived])
            }
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.primary.tensors();
        if let Some(c) = &self.cheap {
            v.extend(c.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.primary.tensors_mut();
        if let Some(c) = &mut self.cheap {
            v.extend(c.tensors_mut());
        }
        v
    }
}

/// Applies a GhostConv given its spec and raw filters.
pub fn ghost_conv(x: &Tensor, spec: GhostConvSpec, primary: &Conv2d, cheap: Option<&Conv2d>) -> Result<Tensor> {
    GhostConv::new(spec, primary.clone(), cheap.cloned())?.forward(x)
}

/// `ghost_conv → GELU → ghost_conv`, optionally adding the input back.
#[derive(Clone, Debug, PartialEq)]
pub struct GhostBottleneck {
    pub expand: GhostConv,
    pub project: GhostConv,
    pub residual: bool,
}

impl GhostBottleneck {
    pub fn new(expand: GhostConv, project: GhostConv, residual: bool) -> Result<Self> {
        if expand.spec.total_out != project.spec.in_channels {
            return Err(Error::shape(format!(
                "expand emits {} channels but project expects {}",
                expand.spec.total_out, project.spec.in_channels
            )));
        }
        if residual {
            let same_width = expand.spec.in_channels == project.spec.total_out;
            let unit_stride = expand.spec.stride == 1 && project.spec.stride == 1;
            let same_size = [&expand.spec, &project.spec]
                .iter()
                .all(|s| 2 * s.padding + 1 == s.primary_kernel);
            if !(same_width && unit_stride && same_size) {
                return Err(Error::shape(
                    "residual bottleneck needs matching widths, stride 1 and size-preserving padding",
                ));
            }
        }
        Ok(Self {
            expand,
            project,
            residual,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = tensor::gelu(&self.expand.forward(x)?);
        let y = self.project.forward(&hidden)?;
        if self.residual {
            tensor::add(&y, x)
        } else {
            Ok(y)
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.expand.tensors();
        v.extend(self.project.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.expand.tensors_mut();
        v.extend(self.project.tensors_mut());
        v
    }
}

pub fn ghost_bottleneck(x: &Tensor, expand: &GhostConv, project: &GhostConv, use_residual: bool) -> Result<Tensor> {
    GhostBottleneck::new(expand.clone(), project.clone(), use_residual)?.forward(x)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AsppSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation_rates: Vec<usize>,
}

impl AsppSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("ASPP channel counts must be positive"));
        }
        if self.dilation_rates.first() != Some(&1) {
            return Err(Error::invalid("ASPP dilation rates must start at 1"));
        }
        if self.dilation_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("ASPP dilation rates must be strictly increasing"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let branches = self.dilation_rates.len();
        branches * Conv2d::param_count(self.in_channels, self.out_channels, 3, 1)
            + Conv2d::param_count(branches * self.out_channels, self.out_channels, 1, 1)
    }
}

/// Parallel dilated 3×3 branches (padding = rate, so `h×w` is kept),
/// concatenated and projected back with a 1×1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Aspp {
    pub spec: AsppSpec,
    pub branches: Vec<Conv2d>,
    pub project: Conv2d,
}

impl Aspp {
    pub fn new(spec: AsppSpec, branches: Vec<Conv2d>, project: Conv2d) -> Result<Self> {
        spec.validate()?;
        if branches.len() != spec.dilation_rates.len() {
            return Err(Error::shape(format!(
                "{} branches for {} dilation rates",
                branches.len(),
                spec.dilation_rates.len()
            )));
        }
        for (b, &rate) in branches.iter().zip(&spec.dilation_rates) {
            let expect = [spec.out_channels, spec.in_channels, 3, 3];
            if b.weight.shape() != expect || b.params != Self::branch_params(rate) {
                return Err(Error::shape(format!(
                    "branch at rate {rate} has filters {:?} / {:?}",
                    b.weight.shape(),
                    b.params
                )));
            }
        }
        let concat = spec.out_channels * spec.dilation_rates.len();
        if project.weight.shape() != [spec.out_channels, concat, 1, 1] {
            return Err(Error::shape(format!(
                "projection filters {:?} do not map {concat} -> {}",
                project.weight.shape(),
                spec.out_channels
            )));
        }
        Ok(Self {
            spec,
            branches,
            project,
        })
    }

    pub fn branch_params(rate: usize) -> ConvParams {
        ConvParams::new(1, rate).with_dilation(rate)
    }

    pub fn init(rng: &mut WeightInit, spec: AsppSpec) -> Result<Self> {
        spec.validate()?;
        let branches = spec
            .dilation_rates
            .iter()
            .map(|&r| Conv2d::init(rng, spec.in_channels, spec.out_channels, 3, Self::branch_params(r)))
            .collect();
        let project = Conv2d::init(
            rng,
            spec.out_channels * spec.dilation_rates.len(),
            spec.out_channels,
            1,
            ConvParams::default(),
        );
        Self::new(spec, branches, project)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let outs = self.branches.iter().map(|b| b.forward(x)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = outs.iter().collect();
        self.project.forward(&concat_channels(&refs)?)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.branches.iter().flat_map(|b| b.tensors()).collect();
        v.extend(self.project.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.branches.iter_mut().flat_map(|b| b.tensors_mut()).collect();
        v.extend(self.project.tensors_mut());
        v
    }
}

pub fn aspp(x: &Tensor, spec: &AsppSpec, branches: &[Conv2d], project: &Conv2d) -> Result<Tensor> {
    Aspp::new(spec.clone(), branches.to_vec(), project.clone())?.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(c: usize, m: usize, n: usize) -> GhostConvSpec {
        GhostConvSpec {
            in_channels: c,
            primary_out: m,
            total_out: n,
            primary_kernel: 3,
            cheap_kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    #[test]
    fn param_count_closed_form() {
        let count = ghost_param_count(&spec(16, 8, 16));
        assert_eq!(count.ghost_weights(), 1224);
        assert_eq!(count.primary_weights, 1152);
        assert_eq!(count.cheap_weights, 72);
        assert_eq!(count.bias, 16);
        assert_eq!(count.standard_weights, 2304);
        assert_eq!(count.ghost_total(), 1240);
        assert_eq!(count.standard_total(), 2320);

        let one = ghost_param_count(&spec(16, 8, 8));
        assert_eq!(one.ghost_total(), one.standard_total());
        assert_eq!(one.ghost_total(), Conv2d::param_count(16, 8, 3, 1));
    }

    #[test]
    fn spec_validation() {
        assert!(spec(4, 3, 8).validate().is_err());
        assert!(spec(4, 8, 4).validate().is_err());
        assert!(spec(4, 0, 4).validate().is_err());
        assert!(spec(4, 2, 6).validate().is_ok());
    }

    #[test]
    fn identity_cheap_filters_duplicate_primary_maps() {
        let s = spec(2, 2, 4);
        let mut rng = WeightInit::new(3);
        let mut g = GhostConv::init(&mut rng, s).unwrap();
        let cheap = g.cheap.as_mut().unwrap();
        cheap.weight = Tensor::zeros(&[2, 1, 3, 3]);
        cheap.weight.data_mut()[4] = 1.0;
        cheap.weight.data_mut()[9 + 4] = 1.0;
        let x = Tensor::from_fn(&[2, 6, 6], |i| ((i * 7) % 11) as f32 / 11.0 - 0.4);
        let y = g.forward(&x).unwrap();
        assert_eq!(y.shape(), [4, 6, 6]);
        let d = y.data();
        assert_eq!(&d[..72], &d[72..]);
    }

    #[test]
    fn ratio_one_is_plain_convolution() {
        let s = spec(3, 4, 4);
        let mut rng = WeightInit::new(9);
        let g = GhostConv::init(&mut rng, s).unwrap();
        assert!(g.cheap.is_none());
        let x = Tensor::from_fn(&[3, 5, 5], |i| (i as f32 * 0.37).cos());
        assert_eq!(g.forward(&x).unwrap(), g.primary.forward(&x).unwrap());
    }

    #[test]
    fn ghost_rejects_wrong_input_width() {
        let g = GhostConv::zeros(spec(3, 2, 4)).unwrap();
        assert!(g.forward(&Tensor::zeros(&[2, 4, 4])).is_err());
    }

    #[test]
    fn bottleneck_zero_weights() {
        let x = Tensor::from_fn(&[4, 5, 5], |i| i as f32 * 0.1 - 3.0);
        let e = GhostConv::zeros(spec(4, 2, 4)).unwrap();
        let p = GhostConv::zeros(spec(4, 2, 4)).unwrap();
        assert_eq!(ghost_bottleneck(&x, &e, &p, true).unwrap(), x);
        let y = ghost_bottleneck(&x, &e, &p, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_residual_requires_matching_shapes() {
        let e = GhostConv::zeros(spec(4, 2, 4)).unwrap();
        let p = GhostConv::zeros(spec(4, 3, 6)).unwrap();
        assert!(GhostBottleneck::new(e.clone(), p.clone(), true).is_err());
        assert!(GhostBottleneck::new(e, p, false).is_ok());
        let mut strided = spec(4, 2, 4);
        strided.stride = 2;
        let e = GhostConv::zeros(strided).unwrap();
        let p = GhostConv::zeros(spec(4, 2, 4)).unwrap();
        assert!(GhostBottleneck::new(e, p, true).is_err());
    }

    #[test]
    fn aspp_single_rate_with_identity_projection_is_plain_conv() {
        let spec = AsppSpec {
            in_channels: 2,
            out_channels: 3,
            dilation_rates: vec![1],
        };
        let mut rng = WeightInit::new(1);
        let mut a = Aspp::init(&mut rng, spec).unwrap();
        a.project = Conv2d::identity(3, 1);
        let x = Tensor::from_fn(&[2, 6, 6], |i| (i as f32 * 0.21).sin());
        let plain = tensor::conv2d(&x, &a.branches[0].weight, &a.branches[0].bias, 1, 1).unwrap();
        assert_eq!(a.forward(&x).unwrap(), plain);
    }

    #[test]
    fn aspp_zero_input_is_bias_only() {
        let spec = AsppSpec {
            in_channels: 2,
            out_channels: 2,
            dilation_rates: vec![1, 2, 3],
        };
        let mut rng = WeightInit::new(5);
        let mut a = Aspp::init(&mut rng, spec).unwrap();
        a.project.bias = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let y = a.forward(&Tensor::zeros(&[2, 8, 8])).unwrap();
        assert_eq!(y.shape(), [2, 8, 8]);
        assert!(y.data()[..64].iter().all(|&v| v == 0.5));
        assert!(y.data()[64..].iter().all(|&v| v == -0.25));
    }

    #[test]
    fn aspp_rate_validation() {
        for rates in [vec![2, 3], vec![1, 3, 2], vec![1, 1], vec![]] {
            let s = AsppSpec {
                in_channels: 1,
                out_channels: 1,
                dilation_rates: rates,
            };
            assert!(s.validate().is_err());
        }
    }
}
