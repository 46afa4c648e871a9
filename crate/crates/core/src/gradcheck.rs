//! Ready-made gradient checks of the differentiable paths, run in `f64`
//! through the same generic kernels as the `f32` model.
//!
//! Each check draws inputs from a seeded generator, contracts the output with
//! fixed random cotangents `c` into the scalar `⟨c, f(x)⟩`, and compares the
//! hand-written backward pass with central differences.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::kernels;
use crate::tensor::{grad_check, GradCheckReport};

type Scalar = fn(f64) -> f64;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Gelu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Attention,
}

impl GradModule {
    pub const ALL: [GradModule; 5] = [
        GradModule::Gelu,
        GradModule::Sigmoid,
        GradModule::Softmax,
        GradModule::LayerNorm,
        GradModule::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradModule::Gelu => "gelu",
            GradModule::Sigmoid => "sigmoid",
            GradModule::Softmax => "softmax",
            GradModule::LayerNorm => "layer_norm",
            GradModule::Attention => "attention",
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradModule::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown gradcheck module `{s}`")))
    }
}

fn draw(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs the check for `module` with inputs drawn from `seed`.
pub fn check_module(module: GradModule, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match module {
        GradModule::Gelu | GradModule::Sigmoid => {
            let x = draw(&mut rng, 16, 4.0);
            let c = draw(&mut rng, 16, 1.0);
            let (f, df): (Scalar, Scalar) = if module == GradModule::Gelu {
                (kernels::gelu, kernels::gelu_derivative)
            } else {
                (kernels::sigmoid, kernels::sigmoid_derivative)
            };
            let analytic: Vec<f64> = x.iter().zip(&c).map(|(&v, &ci)| ci * df(v)).collect();
            grad_check(
                |v| v.iter().zip(&c).map(|(&v, &ci)| ci * f(v)).sum(),
                &x,
                &analytic,
                STEP,
                TOLERANCE,
            )
        }
        GradModule::Softmax => {
            let x = draw(&mut rng, 7, 3.0);
            let c = draw(&mut rng, 7, 1.0);
            let mut p = x.clone();
            kernels::softmax_in_place(&mut p);
            let analytic = kernels::softmax_backward(&p, &c);
            grad_check(
                |v| {
                    let mut p = v.to_vec();
                    kernels::softmax_in_place(&mut p);
                    dot(&p, &c)
                },
                &x,
                &analytic,
                STEP,
                TOLERANCE,
            )
        }
        GradModule::LayerNorm => {
            let d = 6;
            let x = draw(&mut rng, d, 2.0);
            let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
            let beta = draw(&mut rng, d, 0.5);
            let c = draw(&mut rng, d, 1.0);
            let eps = 1e-5;
            let analytic = kernels::layer_norm_row_backward(&x, &gamma, eps, &c);
            grad_check(
                |v| {
                    let mut out = vec![0.0; d];
                    kernels::layer_norm_row(v, &gamma, &beta, eps, &mut out);
                    dot(&out, &c)
                },
                &x,
                &analytic,
                STEP,
                TOLERANCE,
            )
        }
        GradModule::Attention => {
            let (tokens, d, heads) = (3, 4, 2);
            let weights = AttentionWeights::init(&mut WeightInit::new(seed), d, true).to_f64();
            let view = weights.view();
            let x = draw(&mut rng, tokens * d, 1.5);
            let c = draw(&mut rng, tokens * d, 1.0);
            let analytic = view.backward_input(&x, d, heads, None, &c);
            grad_check(
                |v| dot(&view.forward(v, d, heads, None).out, &c),
                &x,
                &analytic,
                STEP,
                TOLERANCE,
            )
        }
    }
}
