//! Scalar-generic slice kernels shared by the `f32` tensor ops and the `f64`
//! gradient checks.

use num_traits::{Float, FromPrimitive};
use std::fmt::Debug;
use std::iter::Sum;

/// Floating-point scalar usable by the kernels.
pub trait Real: Float + FromPrimitive + Sum + Debug + Send + Sync + 'static {
    fn erf(self) -> Self;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// `0.5·x·(1 + erf(x/√2))`, the exact-erf GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of [`gelu`]: `Φ(x) + x·φ(x)`.
pub fn gelu_derivative<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid_derivative<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() - s)
}

/// In-place softmax of a row with max subtraction. Entries equal to `-inf`
/// receive exactly zero weight; at least one entry must be finite.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Vector-Jacobian product of softmax: given `p = softmax(x)` and upstream
/// `dp`, returns `dx = p ⊙ (dp − ⟨dp, p⟩)`.
pub fn softmax_backward<T: Real>(p: &[T], dp: &[T]) -> Vec<T> {
    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - dot)).collect()
}

/// Normalizes `row` to zero mean and unit variance, then applies `gamma` and `beta`.
pub fn layer_norm_row<T: Real>(row: &[T], gamma: &[T], beta: &[T], eps: T, out: &mut [T]) {
    let n = T::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (row[i] - mean) * inv_std * gamma[i] + beta[i];
    }
}

/// Gradient of [`layer_norm_row`] with respect to its input row.
pub fn layer_norm_row_backward<T: Real>(row: &[T], gamma: &[T], eps: T, dy: &[T]) -> Vec<T> {
    let n = T::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    let inv_std = T::one() / (var + eps).sqrt();
    let xhat: Vec<T> = row.iter().map(|&x| (x - mean) * inv_std).collect();
    let dxhat: Vec<T> = dy.iter().zip(gamma).map(|(&d, &g)| d * g).collect();
    let mean_dxhat = dxhat.iter().copied().sum::<T>() / n;
    let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
    dxhat
        .iter()
        .zip(&xhat)
        .map(|(&d, &xh)| inv_std * (d - mean_dxhat - xh * mean_dxhat_xhat))
        .collect()
}

/// Row-wise affine map: `out[r, j] = bias[j] + Σ_i x[r, i]·weight[i, j]` with
/// `weight` stored `(d_in, d_out)`.
pub fn affine<T: Real>(x: &[T], d_in: usize, weight: &[T], bias: &[T], d_out: usize) -> Vec<T> {
    let rows = x.len() / d_in;
    let mut out = Vec::with_capacity(rows * d_out);
    for r in 0..rows {
        out.extend_from_slice(bias);
        let dst = &mut out[r * d_out..(r + 1) * d_out];
        for (i, &xi) in x[r * d_in..(r + 1) * d_in].iter().enumerate() {
            let w_row = &weight[i * d_out..(i + 1) * d_out];
            for (o, &w) in dst.iter_mut().zip(w_row) {
                *o = *o + xi * w;
            }
        }
    }
    out
}

/// Gradient of [`affine`] with respect to `x`: `dx = dy · weightᵀ`.
pub fn affine_backward_input<T: Real>(dy: &[T], d_out: usize, weight: &[T], d_in: usize) -> Vec<T> {
    let rows = dy.len() / d_out;
    let mut dx = vec![T::zero(); rows * d_in];
    for r in 0..rows {
        for i in 0..d_in {
            let w_row = &weight[i * d_out..(i + 1) * d_out];
            dx[r * d_in + i] = dy[r * d_out..(r + 1) * d_out]
                .iter()
                .zip(w_row)
                .map(|(&a, &b)| a * b)
                .sum();
        }
    }
    dx
}
