//! Randomized small instances (≤ 8 channels, ≤ 16×16) compared against the
//! oracles. Every function returns the worst relative error of one case.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;
use thermal_det::attention::{attention, AttentionSpec, AttentionWeights, NormKind, WindowAttentionBlock};
use thermal_det::blocks::{Aspp, AsppSpec, GhostConv, GhostConvSpec};
use thermal_det::init::WeightInit;
use thermal_det::neck::{BiFpn, PyramidLevels};
use thermal_det::tensor::{conv2d_with, ConvParams};
use thermal_det::FeatureMap;

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n.is_multiple_of(*d)).collect()
}

pub fn conv(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let groups = *[1, 1, 2, 4].choose(rng).unwrap();
        let cin = groups * rng.random_range(1..=8 / groups);
        let cout = groups * rng.random_range(1..=8 / groups);
        let k = rng.random_range(1..=5);
        let stride = rng.random_range(1..=3);
        let dil = rng.random_range(1..=3);
        let pad = rng.random_range(0..=k);
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let span = dil * (k - 1) + 1;
        if h + 2 * pad < span || w + 2 * pad < span {
            continue;
        }
        let x = random_tensor(rng, &[cin, h, w], 1.0);
        let f = random_tensor(rng, &[cout, cin / groups, k, k], 1.0);
        let b = random_tensor(rng, &[cout], 1.0);
        let params = ConvParams::new(stride, pad).with_dilation(dil).with_groups(groups);
        let got = conv2d_with(&x, &f, &b, params).unwrap();
        let want = super::conv(
            &Map::from_tensor(&x),
            &f64s(&f),
            &f64s(&b),
            cout,
            k,
            stride,
            pad,
            dil,
            groups,
        );
        assert_eq!(got.shape(), [cout, want.h, want.w]);
        return rel_err(got.data(), &want.v);
    }
}

pub fn ghost(rng: &mut ChaCha8Rng) -> f64 {
    let s = rng.random_range(1..=3);
    let m = rng.random_range(1..=8 / s);
    let cin = rng.random_range(1..=8);
    let k = *[1, 3, 5].choose(rng).unwrap();
    let d = *[1, 3, 5].choose(rng).unwrap();
    let stride = rng.random_range(1..=2);
    let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
    let mut spec = GhostConvSpec::new(cin, m * s, s, k, stride);
    spec.cheap_kernel = d;
    let mut g = GhostConv::init(&mut WeightInit::new(rng.random()), spec).unwrap();
    randomize(g.tensors_mut(), rng, 1.0);
    let x = random_tensor(rng, &[cin, h, w], 1.0);
    let got = g.forward(&x).unwrap();
    let (cw, cb) = match &g.cheap {
        Some(c) => (f64s(&c.weight), f64s(&c.bias)),
        None => (vec![], vec![]),
    };
    let want = super::ghost(
        &Map::from_tensor(&x),
        &f64s(&g.primary.weight),
        &f64s(&g.primary.bias),
        m,
        k,
        stride,
        k / 2,
        &cw,
        &cb,
        s,
        d,
    );
    assert_eq!(got.shape(), [m * s, want.h, want.w]);
    rel_err(got.data(), &want.v)
}

pub fn aspp(rng: &mut ChaCha8Rng) -> f64 {
    let cin = rng.random_range(1..=8);
    let cout = rng.random_range(1..=8);
    let mut rates = vec![1];
    for _ in 0..rng.random_range(0..=3) {
        let next = rates.last().unwrap() + rng.random_range(1..=3);
        rates.push(next);
    }
    let spec = AsppSpec {
        in_channels: cin,
        out_channels: cout,
        dilation_rates: rates.clone(),
    };
    let mut a = Aspp::init(&mut WeightInit::new(rng.random()), spec).unwrap();
    randomize(a.tensors_mut(), rng, 0.5);
    let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
    let x = random_tensor(rng, &[cin, h, w], 1.0);
    let got = a.forward(&x).unwrap();
    let xm = Map::from_tensor(&x);
    let branches: Vec<Map> = a
        .branches
        .iter()
        .zip(&rates)
        .map(|(b, &r)| super::conv(&xm, &f64s(&b.weight), &f64s(&b.bias), cout, 3, 1, r, r, 1))
        .collect();
    let cat = Map::concat(&branches);
    let want = super::conv(
        &cat,
        &f64s(&a.project.weight),
        &f64s(&a.project.bias),
        cout,
        1,
        1,
        0,
        1,
        1,
    );
    rel_err(got.data(), &want.v)
}

fn attention_spec(rng: &mut ChaCha8Rng) -> AttentionSpec {
    let d = *[2, 4, 6, 8].choose(rng).unwrap();
    let heads = *divisors(d).choose(rng).unwrap();
    AttentionSpec {
        embed_dim: d,
        num_heads: heads,
        mlp_hidden: rng.random_range(1..=16),
    }
}

pub fn attention_case(rng: &mut ChaCha8Rng) -> f64 {
    let spec = attention_spec(rng);
    let d = spec.embed_dim;
    let t = rng.random_range(1..=16);
    let with_output = rng.random_bool(0.5);
    let mut w = AttentionWeights::init(&mut WeightInit::new(rng.random()), d, with_output);
    randomize(w.tensors_mut(), rng, 1.0);
    let x = random_tensor(rng, &[t, d], 1.5);
    let got = attention(&x, &w, &spec).unwrap();
    let (want, _) = super::attention(&f64s(&x), d, spec.num_heads, &Attn::from(&w));
    rel_err(got.data(), &want)
}

pub fn window_block(rng: &mut ChaCha8Rng) -> f64 {
    let spec = attention_spec(rng);
    let norm = if rng.random_bool(0.5) {
        NormKind::LayerNorm
    } else {
        NormKind::Linear
    };
    let window = (rng.random_range(1..=8), rng.random_range(1..=8));
    let mut b = WindowAttentionBlock::init(&mut WeightInit::new(rng.random()), spec, window, norm).unwrap();
    randomize(b.tensors_mut(), rng, 0.7);
    let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
    let x = FeatureMap::new(random_tensor(rng, &[spec.embed_dim, h, w], 1.0), 8).unwrap();
    let got = b.forward(&x).unwrap();
    assert_eq!(got.stride, 8);
    let want = super::window_block(&Map::from_tensor(&x.tensor), &b);
    rel_err(got.tensor.data(), &want.v)
}

pub fn bifpn(rng: &mut ChaCha8Rng) -> f64 {
    let c = rng.random_range(1..=8);
    let (h0, w0) = (8 * rng.random_range(1..=2), 8 * rng.random_range(1..=2));
    // Convolutions keep their fan-in scaled weights: with unit-range weights
    // the four chained 3×3 convolutions amplify magnitudes until f32
    // rounding alone exceeds the tolerance.
    let mut b = BiFpn::init(&mut WeightInit::new(rng.random()), 4, c);
    for node in &mut b.nodes {
        randomize(vec![&mut node.weights.raw, &mut node.conv.bias], rng, 1.0);
    }
    let maps: Vec<Tensor> = (0..4)
        .map(|l| random_tensor(rng, &[c, h0 >> l, w0 >> l], 1.0))
        .collect();
    let levels = PyramidLevels::new(
        maps.iter()
            .enumerate()
            .map(|(l, t)| FeatureMap::new(t.clone(), 4 << l).unwrap())
            .collect(),
    )
    .unwrap();
    let got = b.forward(&levels).unwrap();
    let want = super::bifpn4(&maps.iter().map(Map::from_tensor).collect::<Vec<_>>(), &b);
    got.levels()
        .iter()
        .zip(&want)
        .map(|(g, w)| rel_err(g.tensor.data(), &w.v))
        .fold(0.0, f64::max)
}
