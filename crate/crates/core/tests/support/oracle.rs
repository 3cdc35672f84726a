//! Nested-loop reference implementations. Deliberately naive: one output
//! value at a time, straight from the definition.

#![allow(dead_code)]

use ndarray::{Array1, Array4, ArrayD, Ix4};

pub type Map = Array4<f64>;

pub fn w4(p: &ArrayD<f64>) -> Map {
    p.clone().into_dimensionality::<Ix4>().expect("4-d weight")
}

/// Grouped, strided, dilated cross-correlation with zero padding
/// `(top, left)` and output size `(ho, wo)`.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &Map,
    w: &Map,
    bias: Option<&Array1<f64>>,
    stride: usize,
    dilation: usize,
    top: usize,
    left: usize,
    groups: usize,
    ho: usize,
    wo: usize,
) -> Map {
    let (b, c_in, h, wd) = x.dim();
    let (c_out, cg, kh, kw) = w.dim();
    assert_eq!(cg * groups, c_in);
    let og = c_out / groups;
    let mut y = Map::zeros((b, c_out, ho, wo));
    for bi in 0..b {
        for o in 0..c_out {
            let g = o / og;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = bias.map(|v| v[o]).unwrap_or(0.0);
                    for ci in 0..cg {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let i = (oh * stride + ki * dilation) as isize - top as isize;
                                let j = (ow * stride + kj * dilation) as isize - left as isize;
                                if i < 0 || j < 0 || i >= h as isize || j >= wd as isize {
                                    continue;
                                }
                                s += x[[bi, g * cg + ci, i as usize, j as usize]] * w[[o, ci, ki, kj]];
                            }
                        }
                    }
                    y[[bi, o, oh, ow]] = s;
                }
            }
        }
    }
    y
}

/// Symmetric-padding form: output size from the usual formula.
pub fn conv_sym(x: &Map, w: &Map, bias: Option<&Array1<f64>>, stride: usize, dilation: usize, pad: usize, groups: usize) -> Map {
    let (_, _, h, wd) = x.dim();
    let k = w.dim().2;
    let ek = k + (k - 1) * (dilation - 1);
    let ho = (h + 2 * pad - ek) / stride + 1;
    let wo = (wd + 2 * pad - ek) / stride + 1;
    conv(x, w, bias, stride, dilation, pad, pad, groups, ho, wo)
}

pub fn pointwise(x: &Map, w: &Map, bias: Option<&Array1<f64>>) -> Map {
    let (b, c_in, h, wd) = x.dim();
    let c_out = w.dim().0;
    let mut y = Map::zeros((b, c_out, h, wd));
    for bi in 0..b {
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..wd {
                    let mut s = bias.map(|v| v[o]).unwrap_or(0.0);
                    for c in 0..c_in {
                        s += w[[o, c, 0, 0]] * x[[bi, c, i, j]];
                    }
                    y[[bi, o, i, j]] = s;
                }
            }
        }
    }
    y
}

/// Average over the in-bounds cells of each window.
pub fn avg_pool(x: &Map, k: usize, stride: usize, pad: usize) -> Map {
    let (b, c, h, w) = x.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut y = Map::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut s = 0.0;
                    let mut n = 0usize;
                    for di in 0..k {
                        for dj in 0..k {
                            let i = (oh * stride + di) as isize - pad as isize;
                            let j = (ow * stride + dj) as isize - pad as isize;
                            if i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w {
                                s += x[[bi, ci, i as usize, j as usize]];
                                n += 1;
                            }
                        }
                    }
                    y[[bi, ci, oh, ow]] = if n == 0 { 0.0 } else { s / n as f64 };
                }
            }
        }
    }
    y
}

pub fn relu(x: &Map) -> Map {
    x.mapv(|v| v.max(0.0))
}

/// Every channel filtered by every kernel (output channel `c·S + s`), same
/// size, then relu and a 3×3 stride-1 pad-1 average pool.
pub fn conv_block(x: &Map, kernels: &[ndarray::Array2<f64>]) -> Map {
    let (b, c, h, w) = x.dim();
    let s_n = kernels.len();
    let k = kernels[0].dim().0;
    let (top, left) = (k / 2, k / 2);
    let mut y = Map::zeros((b, c * s_n, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for (si, kr) in kernels.iter().enumerate() {
                for i in 0..h {
                    for j in 0..w {
                        let mut s = 0.0;
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (i + ki) as isize - top as isize;
                                let jj = (j + kj) as isize - left as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    s += x[[bi, ci, ii as usize, jj as usize]] * kr[[ki, kj]];
                                }
                            }
                        }
                        y[[bi, ci * s_n + si, i, j]] = s;
                    }
                }
            }
        }
    }
    avg_pool(&relu(&y), 3, 1, 1)
}

/// Batch-statistics normalisation (biased variance).
pub fn batch_norm(x: &Map, scale: &[f64], shift: &[f64], eps: f64) -> Map {
    let (b, c, h, w) = x.dim();
    let n = (b * h * w) as f64;
    let mut y = x.clone();
    for ci in 0..c {
        let mut m = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    m += x[[bi, ci, i, j]];
                }
            }
        }
        m /= n;
        let mut v = 0.0;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    v += (x[[bi, ci, i, j]] - m).powi(2);
                }
            }
        }
        v /= n;
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    y[[bi, ci, i, j]] = scale[ci] * (x[[bi, ci, i, j]] - m) / (v + eps).sqrt() + shift[ci];
                }
            }
        }
    }
    y
}

pub fn channels(x: &Map, lo: usize, hi: usize) -> Map {
    x.slice(ndarray::s![.., lo..hi, .., ..]).to_owned()
}

pub fn concat(a: &Map, b: &Map) -> Map {
    ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()]).expect("same B,H,W")
}

/// Weights of a dual-branch dilated block, as plain arrays.
pub struct DcWeights {
    pub branch_a: Map,
    pub branch_b: Map,
    pub proj_a: Option<Map>,
    pub proj_b: Option<Map>,
    pub fuse: Map,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub eps: f64,
}

/// Halves through a 3×3 conv at dilation 1 and 2, each plus its (projected)
/// input, concatenated, 1×1 fused, batch-normalised, relu.
pub fn dcblock(x: &Map, p: &DcWeights) -> Map {
    let c = x.dim().1;
    let (xa, xb) = (channels(x, 0, c / 2), channels(x, c / 2, c));
    let branch = |xh: &Map, w: &Map, proj: &Option<Map>, d: usize| {
        let y = conv_sym(xh, w, None, 1, d, d, 1);
        let r = match proj {
            Some(pw) => pointwise(xh, pw, None),
            None => xh.clone(),
        };
        y + r
    };
    let a = branch(&xa, &p.branch_a, &p.proj_a, 1);
    let b = branch(&xb, &p.branch_b, &p.proj_b, 2);
    let f = pointwise(&concat(&a, &b), &p.fuse, None);
    relu(&batch_norm(&f, &p.scale, &p.shift, p.eps))
}

pub fn max_abs_diff(a: &Map, b: &Map) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
