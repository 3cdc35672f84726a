//! Random instances for each fast kernel, scored against the nested-loop
//! references. Each runner returns the largest absolute deviation seen.

#![allow(dead_code)]

use std::collections::BTreeMap;

use d3r_core::fpu::conv_block;
use d3r_core::kernels::{Kernel2D, KernelFamily};
use d3r_core::nn::ops::{self, ActivationKind, ConvSpec, Padding2d};
use d3r_core::nn::{Init, Mode, Param};
use d3r_core::spu::{dcblock_forward, DcBlock};
use ndarray::{Array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, DcWeights, Map};

pub const INSTANCES: u64 = 20;

pub fn rand4(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Map {
    Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xC0FFEE ^ tag)
}

/// Grouped, strided, dilated, asymmetrically padded convolution.
pub fn conv2d_general(n: u64) -> f64 {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let b = r.random_range(1..=2);
        let groups = [1, 2, 4][r.random_range(0..3)];
        let c_in = groups * r.random_range(1..=8 / groups);
        let c_out = groups * r.random_range(1..=8 / groups);
        let k = r.random_range(1..=5);
        let dilation = r.random_range(1..=3);
        let stride = r.random_range(1..=2);
        let ek = ops::effective_kernel(k, dilation);
        let h = r.random_range(ek..=16);
        let w = r.random_range(ek..=16);
        let pad = Padding2d {
            top: r.random_range(0..=2),
            bottom: r.random_range(0..=2),
            left: r.random_range(0..=2),
            right: r.random_range(0..=2),
        };
        let x = rand4(&mut r, (b, c_in, h, w));
        let wt = rand4(&mut r, (c_out, c_in / groups, k, k));
        let bias = Array1::from_shape_fn(c_out, |_| r.random_range(-1.0..1.0));
        let spec = ConvSpec { stride, dilation, padding: pad, groups };
        let got = ops::conv2d_with(&x, wt.view(), Some(bias.view()), &spec).unwrap();
        let ho = (h + pad.top + pad.bottom - ek) / stride + 1;
        let wo = (w + pad.left + pad.right - ek) / stride + 1;
        let want = oracle::conv(&x, &wt, Some(&bias), stride, dilation, pad.top, pad.left, groups, ho, wo);
        worst = worst.max(oracle::max_abs_diff(&got, &want));
    }
    worst
}

/// The symmetric-padding, stride-1 entry point.
pub fn conv2d(n: u64) -> f64 {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let b = r.random_range(1..=2);
        let c_in = r.random_range(1..=8);
        let c_out = r.random_range(1..=8);
        let k = [1, 3, 5][r.random_range(0..3)];
        let dilation = r.random_range(1..=2);
        let pad = r.random_range(0..=dilation * (k - 1) / 2 + 1);
        let ek = ops::effective_kernel(k, dilation);
        let h = r.random_range(ek..=16);
        let w = r.random_range(ek..=16);
        let x = rand4(&mut r, (b, c_in, h, w));
        let wt = rand4(&mut r, (c_out, c_in, k, k));
        let bias = Array1::from_shape_fn(c_out, |_| r.random_range(-1.0..1.0));
        let got = ops::conv2d(&x, wt.view(), Some(bias.view()), dilation, pad, 1).unwrap();
        worst = worst.max(oracle::max_abs_diff(&got, &oracle::conv_sym(&x, &wt, Some(&bias), 1, dilation, pad, 1)));
    }
    worst
}

pub fn pointwise_conv(n: u64) -> f64 {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for i in 0..n {
        let shape = (r.random_range(1..=2), r.random_range(1..=8), r.random_range(1..=16), r.random_range(1..=16));
        let c_out = r.random_range(1..=8);
        let x = rand4(&mut r, shape);
        let wt = rand4(&mut r, (c_out, shape.1, 1, 1));
        let bias = Array1::from_shape_fn(c_out, |_| r.random_range(-1.0..1.0));
        let b = (i % 2 == 0).then_some(&bias);
        let got = ops::pointwise_conv(&x, wt.view(), b.map(|v| v.view())).unwrap();
        worst = worst.max(oracle::max_abs_diff(&got, &oracle::pointwise(&x, &wt, b)));
    }
    worst
}

pub fn avg_pool(n: u64) -> f64 {
    let mut r = rng(4);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let k = r.random_range(1..=4);
        let stride = r.random_range(1..=3);
        let pad = r.random_range(0..=k / 2);
        let shape = (r.random_range(1..=2), r.random_range(1..=8), r.random_range(k..=16), r.random_range(k..=16));
        let x = rand4(&mut r, shape);
        let got = ops::avg_pool(&x, k, stride, pad).unwrap();
        worst = worst.max(oracle::max_abs_diff(&got, &oracle::avg_pool(&x, k, stride, pad)));
    }
    worst
}

pub fn conv_block_cases(n: u64) -> f64 {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let k = r.random_range(2..=5);
        let s = r.random_range(1..=3);
        let kernels: Vec<Kernel2D> = (0..s)
            .map(|_| Kernel2D {
                values: Array2::from_shape_fn((k, k), |_| r.random_range(-1.0..1.0)),
                family: KernelFamily::Gabor,
                angle: 0.0,
                scale: 1.0,
                meta: BTreeMap::new(),
            })
            .collect();
        let shape = (r.random_range(1..=2), r.random_range(1..=8), r.random_range(1..=16), r.random_range(1..=16));
        let x = rand4(&mut r, shape);
        let got = conv_block(&x, &kernels, ActivationKind::Relu).unwrap();
        let raw: Vec<Array2<f64>> = kernels.iter().map(|k| k.values.clone()).collect();
        worst = worst.max(oracle::max_abs_diff(&got, &oracle::conv_block(&x, &raw)));
    }
    worst
}

pub fn dc_weights(block: &DcBlock<f64>) -> DcWeights {
    let vec = |p: &Param<f64>| p.value.iter().copied().collect::<Vec<_>>();
    DcWeights {
        branch_a: oracle::w4(&block.branch_a.weight.value),
        branch_b: oracle::w4(&block.branch_b.weight.value),
        proj_a: block.proj_a.as_ref().map(|p| oracle::w4(&p.weight.value)),
        proj_b: block.proj_b.as_ref().map(|p| oracle::w4(&p.weight.value)),
        fuse: oracle::w4(&block.fuse.weight.value),
        scale: vec(&block.norm.scale),
        shift: vec(&block.norm.shift),
        eps: block.norm.eps,
    }
}

/// Training-mode forward (batch statistics), random norm affine.
pub fn dcblock(n: u64) -> f64 {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for i in 0..n {
        let c_in = 2 * r.random_range(1..=4);
        let c_out = 2 * r.random_range(1..=4);
        let shape = (r.random_range(1..=2), c_in, r.random_range(3..=16), r.random_range(3..=16));
        let mut block = DcBlock::<f64>::new(c_in, c_out, Init::new(i), "dc").unwrap();
        block.norm.scale.value.mapv_inplace(|_| r.random_range(0.5..1.5));
        block.norm.shift.value.mapv_inplace(|_| r.random_range(-0.5..0.5));
        let x = rand4(&mut r, shape);
        let got = dcblock_forward(&mut block, &x, Mode::Train).unwrap();
        worst = worst.max(oracle::max_abs_diff(&got, &oracle::dcblock(&x, &dc_weights(&block))));
    }
    worst
}

/// Every runner with its name.
pub fn all(n: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv2d(n)),
        ("conv2d (stride/groups/asymmetric padding)", conv2d_general(n)),
        ("pointwise_conv", pointwise_conv(n)),
        ("avg_pool", avg_pool(n)),
        ("conv_block", conv_block_cases(n)),
        ("dcblock_forward", dcblock(n)),
    ]
}
