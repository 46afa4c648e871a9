//! Multi-head scaled dot-product attention, the transformer encoder that
//! closes the backbone, and window attention for the neck.

mod encoder;
mod window;

pub use encoder::{transformer_encoder, TransformerEncoder};
pub use window::{
    window_attention_block, window_partition, window_unpartition, Norm, NormKind, WindowAttentionBlock, WindowGrid,
    WindowMask,
};

use crate::blocks::Linear;
use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::kernels::{self, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("attention dimensions must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Query/key/value projections and an optional output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Option<Linear>,
}

impl AttentionWeights {
    pub fn zeros(d: usize, with_output: bool) -> Self {
        Self {
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: with_output.then(|| Linear::zeros(d, d)),
        }
    }

    pub fn init(rng: &mut WeightInit, d: usize, with_output: bool) -> Self {
        Self {
            query: Linear::init(rng, d, d),
            key: Linear::init(rng, d, d),
            value: Linear::init(rng, d, d),
            output: with_output.then(|| Linear::init(rng, d, d)),
        }
    }

    pub fn param_count(d: usize, with_output: bool) -> usize {
        (3 + with_output as usize) * Linear::param_count(d, d)
    }

    fn check(&self, spec: &AttentionSpec) -> Result<()> {
        spec.validate()?;
        let d = spec.embed_dim;
        let mut all = vec![&self.query, &self.key, &self.value];
        all.extend(self.output.as_ref());
        for l in all {
            if l.weight.shape() != [d, d] {
                return Err(Error::shape(format!(
                    "attention projection {:?} does not match d_model {d}",
                    l.weight.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn view(&self) -> AttentionView<'_, f32> {
        fn pair(l: &Linear) -> (&[f32], &[f32]) {
            (l.weight.data(), l.bias.data())
        }
        AttentionView {
            query: pair(&self.query),
            key: pair(&self.key),
            value: pair(&self.value),
            output: self.output.as_ref().map(pair),
        }
    }

    /// Copies every weight to `f64` for verification.
    pub fn to_f64(&self) -> AttentionWeights64 {
        let pair = |l: &Linear| -> (Vec<f64>, Vec<f64>) {
            (
                l.weight.data().iter().map(|&v| v as f64).collect(),
                l.bias.data().iter().map(|&v| v as f64).collect(),
            )
        };
        AttentionWeights64 {
            query: pair(&self.query),
            key: pair(&self.key),
            value: pair(&self.value),
            output: self.output.as_ref().map(pair),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.query.tensors();
        v.extend(self.key.tensors());
        v.extend(self.value.tensors());
        if let Some(o) = &self.output {
            v.extend(o.tensors());
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.query.tensors_mut();
        v.extend(self.key.tensors_mut());
        v.extend(self.value.tensors_mut());
        if let Some(o) = &mut self.output {
            v.extend(o.tensors_mut());
        }
        v
    }
}

/// Owned `f64` copy of [`AttentionWeights`].
#[derive(Clone, Debug)]
pub struct AttentionWeights64 {
    pub query: (Vec<f64>, Vec<f64>),
    pub key: (Vec<f64>, Vec<f64>),
    pub value: (Vec<f64>, Vec<f64>),
    pub output: Option<(Vec<f64>, Vec<f64>)>,
}

impl AttentionWeights64 {
    pub fn view(&self) -> AttentionView<'_, f64> {
        fn pair(p: &(Vec<f64>, Vec<f64>)) -> (&[f64], &[f64]) {
            (&p.0, &p.1)
        }
        AttentionView {
            query: pair(&self.query),
            key: pair(&self.key),
            value: pair(&self.value),
            output: self.output.as_ref().map(pair),
        }
    }
}

/// Borrowed `(weight, bias)` slices of every projection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionView<'a, T> {
    pub query: (&'a [T], &'a [T]),
    pub key: (&'a [T], &'a [T]),
    pub value: (&'a [T], &'a [T]),
    pub output: Option<(&'a [T], &'a [T])>,
}

/// Intermediate values of one attention evaluation.
pub struct AttentionTrace<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Per-head attention weights, `(heads, t, t)`.
    pub probs: Vec<T>,
    /// Concatenated head outputs before the output projection.
    pub heads: Vec<T>,
    pub out: Vec<T>,
}

impl<T: Real> AttentionView<'_, T> {
    /// Runs attention over `t = x.len() / d` tokens. `mask` is an additive
    /// `(t, t)` logit mask (`-inf` excludes a key).
    pub fn forward(&self, x: &[T], d: usize, heads: usize, mask: Option<&[T]>) -> AttentionTrace<T> {
        let t = x.len() / d;
        let q = kernels::affine(x, d, self.query.0, self.query.1, d);
        let k = kernels::affine(x, d, self.key.0, self.key.1, d);
        let v = kernels::affine(x, d, self.value.0, self.value.1, d);
        let d_k = d / heads;
        let scale = T::one() / T::from_usize(d_k).unwrap().sqrt();
        let mut probs = vec![T::zero(); heads * t * t];
        let mut z = vec![T::zero(); t * d];
        for h in 0..heads {
            let off = h * d_k;
            for i in 0..t {
                let row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let qi = &q[i * d + off..i * d + off + d_k];
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[j * d + off..j * d + off + d_k];
                    let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                    *r = dot * scale + mask.map_or(T::zero(), |m| m[i * t + j]);
                }
                kernels::softmax_in_place(row);
                let zi = &mut z[i * d + off..i * d + off + d_k];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &v[j * d + off..j * d + off + d_k];
                    for (zc, &vc) in zi.iter_mut().zip(vj) {
                        *zc = *zc + p * vc;
                    }
                }
            }
        }
        let out = match self.output {
            Some((w, b)) => kernels::affine(&z, d, w, b, d),
            None => z.clone(),
        };
        AttentionTrace {
            q,
            k,
            v,
            probs,
            heads: z,
            out,
        }
    }

    /// Gradient of `⟨dy, forward(x)⟩` with respect to `x`.
    pub fn backward_input(&self, x: &[T], d: usize, heads: usize, mask: Option<&[T]>, dy: &[T]) -> Vec<T> {
        let t = x.len() / d;
        let tr = self.forward(x, d, heads, mask);
        let dz = match self.output {
            Some((w, _)) => kernels::affine_backward_input(dy, d, w, d),
            None => dy.to_vec(),
        };
        let d_k = d / heads;
        let scale = T::one() / T::from_usize(d_k).unwrap().sqrt();
        let mut dq = vec![T::zero(); t * d];
        let mut dk = vec![T::zero(); t * d];
        let mut dv = vec![T::zero(); t * d];
        for h in 0..heads {
            let off = h * d_k;
            for i in 0..t {
                let p = &tr.probs[(h * t + i) * t..(h * t + i + 1) * t];
                let dzi = &dz[i * d + off..i * d + off + d_k];
                let dp: Vec<T> = (0..t)
                    .map(|j| {
                        let vj = &tr.v[j * d + off..j * d + off + d_k];
                        dzi.iter().zip(vj).map(|(&a, &b)| a * b).sum()
                    })
                    .collect();
                for j in 0..t {
                    for c in 0..d_k {
                        dv[j * d + off + c] = dv[j * d + off + c] + p[j] * dzi[c];
                    }
                }
                let ds = kernels::softmax_backward(p, &dp);
                for j in 0..t {
                    let g = ds[j] * scale;
                    for c in 0..d_k {
                        dq[i * d + off + c] = dq[i * d + off + c] + g * tr.k[j * d + off + c];
                        dk[j * d + off + c] = dk[j * d + off + c] + g * tr.q[i * d + off + c];
                    }
                }
            }
        }
        let mut dx = kernels::affine_backward_input(&dq, d, self.query.0, d);
        for (a, b) in dx.iter_mut().zip(kernels::affine_backward_input(&dk, d, self.key.0, d)) {
            *a = *a + b;
        }
        for (a, b) in dx
            .iter_mut()
            .zip(kernels::affine_backward_input(&dv, d, self.value.0, d))
        {
            *a = *a + b;
        }
        dx
    }
}

/// Output and per-head attention weights of [`attention_with_weights`].
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Tensor,
    /// `(heads, t, t)` row-stochastic attention weights.
    pub weights: Tensor,
}

/// Multi-head `softmax(QKᵀ/√d_k)·V` over `(t, d_model)` tokens.
pub fn attention(tokens: &Tensor, weights: &AttentionWeights, spec: &AttentionSpec) -> Result<Tensor> {
    Ok(attention_with_weights(tokens, weights, spec, None)?.output)
}

/// Like [`attention`] but also returns the attention weights. `mask` is an
/// additive `(t, t)` logit mask.
pub fn attention_with_weights(
    tokens: &Tensor,
    weights: &AttentionWeights,
    spec: &AttentionSpec,
    mask: Option<&[f32]>,
) -> Result<AttentionOutput> {
    weights.check(spec)?;
    let [t, d] = tokens.shape()[..] else {
        return Err(Error::shape(format!(
            "attention expects (tokens, d_model), got {:?}",
            tokens.shape()
        )));
    };
    if d != spec.embed_dim {
        return Err(Error::shape(format!(
            "token width {d} does not match d_model {}",
            spec.embed_dim
        )));
    }
    if let Some(m) = mask {
        if m.len() != t * t {
            return Err(Error::shape(format!("mask has {} entries for {t} tokens", m.len())));
        }
    }
    let tr = weights.view().forward(tokens.data(), d, spec.num_heads, mask);
    Ok(AttentionOutput {
        output: Tensor::new(vec![t, d], tr.out)?,
        weights: Tensor::new(vec![spec.num_heads, t, t], tr.probs)?,
    })
}

/// `(c, h, w)` → `(h·w, c)` token matrix in raster order.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let src = x.data();
    let mut out = vec![0.0; hw * c];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = src[ch * hw + p];
        }
    }
    Tensor::new(vec![hw, c], out)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [hw, c] = tokens.shape()[..] else {
        return Err(Error::shape("tokens must be rank 2"));
    };
    if hw != h * w {
        return Err(Error::shape(format!("{hw} tokens cannot fill {h}x{w}")));
    }
    let src = tokens.data();
    let mut out = vec![0.0; hw * c];
    for p in 0..hw {
        for ch in 0..c {
            out[ch * hw + p] = src[p * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: usize, heads: usize) -> AttentionSpec {
        AttentionSpec {
            embed_dim: d,
            num_heads: heads,
            mlp_hidden: 2 * d,
        }
    }

    #[test]
    fn single_token_returns_value_projection() {
        let mut rng = WeightInit::new(11);
        let w = AttentionWeights::init(&mut rng, 4, false);
        let x = Tensor::new(vec![1, 4], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
        let z = attention(&x, &w, &spec(4, 2)).unwrap();
        assert_eq!(z, w.value.forward(&x).unwrap());
    }

    #[test]
    fn zero_query_gives_mean_of_values() {
        let mut rng = WeightInit::new(12);
        let mut w = AttentionWeights::init(&mut rng, 4, false);
        w.query = Linear::zeros(4, 4);
        let x = Tensor::from_fn(&[5, 4], |i| (i as f32 * 0.9).sin());
        let z = attention(&x, &w, &spec(4, 2)).unwrap();
        let v = w.value.forward(&x).unwrap();
        for c in 0..4 {
            let mean: f32 = (0..5).map(|r| v.at(&[r, c])).sum::<f32>() / 5.0;
            for r in 0..5 {
                assert!((z.at(&[r, c]) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = WeightInit::new(13);
        let w = AttentionWeights::init(&mut rng, 8, true);
        let x = Tensor::from_fn(&[6, 8], |i| ((i * 13) % 7) as f32 - 3.0);
        let out = attention_with_weights(&x, &w, &spec(8, 4), None).unwrap();
        for row in out.weights.data().chunks(6) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_width_mismatch() {
        let w = AttentionWeights::zeros(4, false);
        assert!(attention(&Tensor::zeros(&[2, 3]), &w, &spec(4, 2)).is_err());
        assert!(attention(&Tensor::zeros(&[2, 4]), &w, &spec(4, 3)).is_err());
    }

    #[test]
    fn token_layout_round_trip() {
        let x = Tensor::from_fn(&[3, 2, 5], |i| i as f32);
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.at(&[6, 2]), x.at(&[2, 1, 1]));
        assert_eq!(from_tokens(&t, 2, 5).unwrap(), x);
    }
}
