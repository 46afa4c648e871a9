use super::{attention, from_tokens, to_tokens, AttentionSpec, AttentionWeights};
use crate::blocks::{Conv2d, Linear};
use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::{self, concat_channels, ConvParams, FeatureMap, Tensor};

/// Transformer block at the end of the backbone.
///
/// The backbone map and the ASPP output are concatenated and projected to
/// `d_model` with a 1×1 convolution, flattened to `h·w` tokens, then passed
/// through `z = f + Attn(f)` and `out = z + W₂·GELU(W₁·z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerEncoder {
    pub spec: AttentionSpec,
    pub fuse: Conv2d,
    pub attention: AttentionWeights,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerEncoder {
    pub fn init(rng: &mut WeightInit, in_channels: usize, aspp_channels: usize, spec: AttentionSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.embed_dim;
        Ok(Self {
            spec,
            fuse: Conv2d::init(rng, in_channels + aspp_channels, d, 1, ConvParams::default()),
            attention: AttentionWeights::init(rng, d, true),
            ff_in: Linear::init(rng, d, spec.mlp_hidden),
            ff_out: Linear::init(rng, spec.mlp_hidden, d),
        })
    }

    pub fn param_count(in_channels: usize, aspp_channels: usize, spec: &AttentionSpec) -> usize {
        let d = spec.embed_dim;
        Conv2d::param_count(in_channels + aspp_channels, d, 1, 1)
            + AttentionWeights::param_count(d, true)
            + Linear::param_count(d, spec.mlp_hidden)
            + Linear::param_count(spec.mlp_hidden, d)
    }

    /// The fused `(d_model, h, w)` projection fed to the attention layer.
    pub fn fused_input(&self, x: &FeatureMap, aspp_out: &FeatureMap) -> Result<Tensor> {
        let (_, h, w) = x.dims();
        let (_, ah, aw) = aspp_out.dims();
        if (h, w) != (ah, aw) {
            return Err(Error::shape(format!(
                "backbone map is {h}x{w} but ASPP output is {ah}x{aw}"
            )));
        }
        self.fuse.forward(&concat_channels(&[&x.tensor, &aspp_out.tensor])?)
    }

    pub fn forward(&self, x: &FeatureMap, aspp_out: &FeatureMap) -> Result<FeatureMap> {
        let (_, h, w) = x.dims();
        let fused = to_tokens(&self.fused_input(x, aspp_out)?)?;
        let z = tensor::add(&fused, &attention(&fused, &self.attention, &self.spec)?)?;
        let ff = self.ff_out.forward(&tensor::gelu(&self.ff_in.forward(&z)?))?;
        let out = tensor::add(&z, &ff)?;
        FeatureMap::new(from_tokens(&out, h, w)?, x.stride)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.fuse.tensors();
        v.extend(self.attention.tensors());
        v.extend(self.ff_in.tensors());
        v.extend(self.ff_out.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.fuse.tensors_mut();
        v.extend(self.attention.tensors_mut());
        v.extend(self.ff_in.tensors_mut());
        v.extend(self.ff_out.tensors_mut());
        v
    }
}

pub fn transformer_encoder(x: &FeatureMap, aspp_out: &FeatureMap, encoder: &TransformerEncoder) -> Result<FeatureMap> {
    encoder.forward(x, aspp_out)
}
