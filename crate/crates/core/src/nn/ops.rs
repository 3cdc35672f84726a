//! Pure forward/backward functions for every primitive.
//!
//! Convolution is cross-correlation (no kernel flip), computed per batch item
//! and group as `W_g · im2col(x)`.

use ndarray::{
    linalg::general_mat_mul, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4,
    ArrayViewMut2,
};

use super::{dims4, FeatureMap, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding2d {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding2d {
    pub fn same(p: usize) -> Self {
        Self { top: p, bottom: p, left: p, right: p }
    }

    pub fn is_symmetric(&self) -> bool {
        self.top == self.bottom && self.left == self.right && self.top == self.left
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding2d,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: 1, dilation: 1, padding: Padding2d::default(), groups: 1 }
    }
}

impl ConvSpec {
    /// `k×k`, stride 1, `padding = dilation·(k−1)/2`: keeps the spatial size.
    pub fn preserving(k: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: Padding2d::same(dilation * (k - 1) / 2),
            groups: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: Padding2d) -> Self {
        self.padding = padding;
        self
    }
}

/// `k + (k−1)(d−1)`.
pub fn effective_kernel(k: usize, dilation: usize) -> usize {
    k + (k - 1) * (dilation - 1)
}

fn out_extent(n: usize, pad_lo: usize, pad_hi: usize, k: usize, spec: &ConvSpec) -> Option<usize> {
    let span = effective_kernel(k, spec.dilation);
    let padded = n + pad_lo + pad_hi;
    if padded < span {
        return None;
    }
    Some((padded - span) / spec.stride + 1)
}

struct ConvGeom {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    cg: usize,
    og: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_geometry<T>(
    input_shape: &[usize],
    weight: &ArrayView4<T>,
    spec: &ConvSpec,
) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    let (b, c_in, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let ws = weight.shape();
    let (c_out, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
        return Err(Error::arg(OP, "groups, stride and dilation must be ≥ 1"));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::arg(OP, "empty kernel"));
    }
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(Error::shape(
            OP,
            format!("channels in={c_in} out={c_out} not divisible by groups={}", spec.groups),
        ));
    }
    if cg * spec.groups != c_in {
        return Err(Error::shape(
            OP,
            format!(
                "weight expects {} input channels ({cg} per group × {} groups) but input has {c_in}",
                cg * spec.groups,
                spec.groups
            ),
        ));
    }
    let p = &spec.padding;
    let ho = out_extent(h, p.top, p.bottom, kh, spec);
    let wo = out_extent(w, p.left, p.right, kw, spec);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::shape(
            OP,
            format!("input {h}×{w} too small for kernel {kh}×{kw} at dilation {}", spec.dilation),
        ));
    };
    Ok(ConvGeom { b, c_in, h, w, c_out, cg, og: c_out / spec.groups, kh, kw, ho, wo })
}

fn is_pointwise(g: &ConvGeom, spec: &ConvSpec) -> bool {
    g.kh == 1 && g.kw == 1 && spec.stride == 1 && spec.padding == Padding2d::default()
}

/// Unfold one group of one batch item into `[cg·kh·kw, ho·wo]`.
fn im2col<T: Scalar>(x: &[T], c0: usize, g: &ConvGeom, spec: &ConvSpec, col: &mut [T]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    let s = spec.stride as isize;
    let d = spec.dilation as isize;
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let hw = g.h * g.w;
    let p = g.pixels();
    for ci in 0..g.cg {
        let plane = &x[(c0 + ci) * hw..(c0 + ci + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[r * p..(r + 1) * p];
                for oh in 0..ho {
                    let ih = oh as isize * s + ki as isize * d - pt;
                    let row = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h {
                        row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let off = kj as isize * d - pl;
                    for (ow, v) in row.iter_mut().enumerate() {
                        let iw = ow as isize * s + off;
                        *v = if iw >= 0 && iw < w { src[iw as usize] } else { T::zero() };
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`].
fn col2im<T: Scalar>(col: &[T], c0: usize, g: &ConvGeom, spec: &ConvSpec, dx: &mut [T]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    let s = spec.stride as isize;
    let d = spec.dilation as isize;
    let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
    let hw = g.h * g.w;
    let p = g.pixels();
    for ci in 0..g.cg {
        let plane = &mut dx[(c0 + ci) * hw..(c0 + ci + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[r * p..(r + 1) * p];
                for oh in 0..ho {
                    let ih = oh as isize * s + ki as isize * d - pt;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let off = kj as isize * d - pl;
                    for (ow, &v) in src[oh * wo..(oh + 1) * wo].iter().enumerate() {
                        let iw = ow as isize * s + off;
                        if iw >= 0 && iw < w {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// General 2-D convolution (stride, dilation, asymmetric padding, groups).
pub fn conv2d_with<T: Scalar>(
    input: &FeatureMap<T>,
    weight: ArrayView4<T>,
    bias: Option<ArrayView1<T>>,
    spec: &ConvSpec,
) -> Result<FeatureMap<T>> {
    let g = conv_geometry(input.shape(), &weight, spec)?;
    if let Some(b) = &bias {
        if b.len() != g.c_out {
            return Err(Error::shape("conv2d", format!("bias len {} ≠ C_out {}", b.len(), g.c_out)));
        }
    }
    let x = input.as_standard_layout();
    let x = x.as_slice().expect("standard layout");
    let wmat = weight.as_standard_layout();
    let wmat = wmat.as_slice().expect("standard layout");
    let (r, p) = (g.rows(), g.pixels());
    let pointwise = is_pointwise(&g, spec);
    let mut out = Array4::<T>::zeros((g.b, g.c_out, g.ho, g.wo));
    let out_s = out.as_slice_mut().expect("fresh array");
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); r * p] };
    let in_item = g.c_in * g.h * g.w;
    let out_item = g.c_out * p;
    for bi in 0..g.b {
        let xb = &x[bi * in_item..(bi + 1) * in_item];
        for gi in 0..spec.groups {
            let c0 = gi * g.cg;
            let wg = ArrayView2::from_shape((g.og, r), &wmat[gi * g.og * r..(gi + 1) * g.og * r])
                .expect("weight block");
            let ob = &mut out_s[bi * out_item + gi * g.og * p..bi * out_item + (gi + 1) * g.og * p];
            let mut ov = ArrayViewMut2::from_shape((g.og, p), ob).expect("out block");
            if pointwise {
                let cv = ArrayView2::from_shape((r, p), &xb[c0 * p..(c0 + g.cg) * p])
                    .expect("input block");
                general_mat_mul(T::one(), &wg, &cv, T::zero(), &mut ov);
            } else {
                im2col(xb, c0, &g, spec, &mut col);
                let cv = ArrayView2::from_shape((r, p), &col[..]).expect("col block");
                general_mat_mul(T::one(), &wg, &cv, T::zero(), &mut ov);
            }
        }
        if let Some(bias) = &bias {
            for (co, &bv) in bias.iter().enumerate() {
                let start = bi * out_item + co * p;
                for v in &mut out_s[start..start + p] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Which gradients [`conv2d_backward`] should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGrads {
    pub input: bool,
    pub weight: bool,
}

impl ConvGrads {
    pub const ALL: ConvGrads = ConvGrads { input: true, weight: true };
}

/// Gradients of [`conv2d_with`]: `(d_input, d_weight, d_bias)`.
/// Skipped gradients come back as `None` / zeros.
pub fn conv2d_backward<T: Scalar>(
    input: &FeatureMap<T>,
    weight: ArrayView4<T>,
    grad_out: &FeatureMap<T>,
    spec: &ConvSpec,
    want: ConvGrads,
) -> Result<(Option<FeatureMap<T>>, Array4<T>, Array1<T>)> {
    let g = conv_geometry(input.shape(), &weight, spec)?;
    if grad_out.shape() != [g.b, g.c_out, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {:?} vs expected {:?}", grad_out.shape(), [g.b, g.c_out, g.ho, g.wo]),
        ));
    }
    let x = input.as_standard_layout();
    let x = x.as_slice().expect("standard layout");
    let wmat = weight.as_standard_layout();
    let wmat = wmat.as_slice().expect("standard layout");
    let go = grad_out.as_standard_layout();
    let go = go.as_slice().expect("standard layout");
    let (r, p) = (g.rows(), g.pixels());
    let pointwise = is_pointwise(&g, spec);
    let mut dw = Array4::<T>::zeros(weight.raw_dim());
    let mut db = Array1::<T>::zeros(g.c_out);
    let mut dx = want.input.then(|| Array4::<T>::zeros((g.b, g.c_in, g.h, g.w)));
    let mut col = vec![T::zero(); r * p];
    let in_item = g.c_in * g.h * g.w;
    let out_item = g.c_out * p;
    for bi in 0..g.b {
        for (o, d) in db.iter_mut().enumerate() {
            let base = bi * out_item + o * p;
            *d += go[base..base + p].iter().fold(T::zero(), |a, &v| a + v);
        }
    }
    if want.weight {
        let dw_s = dw.as_slice_mut().expect("fresh array");
        for bi in 0..g.b {
            let xb = &x[bi * in_item..(bi + 1) * in_item];
            for gi in 0..spec.groups {
                let c0 = gi * g.cg;
                let gob = &go[bi * out_item + gi * g.og * p..bi * out_item + (gi + 1) * g.og * p];
                let gv = ArrayView2::from_shape((g.og, p), gob).expect("grad block");
                let cv = if pointwise {
                    ArrayView2::from_shape((r, p), &xb[c0 * p..(c0 + g.cg) * p]).expect("input block")
                } else {
                    im2col(xb, c0, &g, spec, &mut col);
                    ArrayView2::from_shape((r, p), &col[..]).expect("col block")
                };
                let mut dwg = ArrayViewMut2::from_shape(
                    (g.og, r),
                    &mut dw_s[gi * g.og * r..(gi + 1) * g.og * r],
                )
                .expect("dw block");
                general_mat_mul(T::one(), &gv, &cv.t(), T::one(), &mut dwg);
            }
        }
    }
    if let Some(dx) = dx.as_mut() {
        let dx_s = dx.as_slice_mut().expect("fresh array");
        let mut dcol = vec![T::zero(); r * p];
        for bi in 0..g.b {
            let dxb = &mut dx_s[bi * in_item..(bi + 1) * in_item];
            for gi in 0..spec.groups {
                let c0 = gi * g.cg;
                let gob = &go[bi * out_item + gi * g.og * p..bi * out_item + (gi + 1) * g.og * p];
                let gv = ArrayView2::from_shape((g.og, p), gob).expect("grad block");
                let wg = ArrayView2::from_shape((g.og, r), &wmat[gi * g.og * r..(gi + 1) * g.og * r])
                    .expect("weight block");
                if pointwise {
                    let mut dv = ArrayViewMut2::from_shape((r, p), &mut dxb[c0 * p..(c0 + g.cg) * p])
                        .expect("dx block");
                    general_mat_mul(T::one(), &wg.t(), &gv, T::one(), &mut dv);
                } else {
                    let mut dv = ArrayViewMut2::from_shape((r, p), &mut dcol[..]).expect("dcol");
                    general_mat_mul(T::one(), &wg.t(), &gv, T::zero(), &mut dv);
                    col2im(&dcol, c0, &g, spec, dxb);
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Convolution with symmetric padding and stride 1. Kernels must be odd.
pub fn conv2d<T: Scalar>(
    input: &FeatureMap<T>,
    weight: ArrayView4<T>,
    bias: Option<ArrayView1<T>>,
    dilation: usize,
    padding: usize,
    groups: usize,
) -> Result<FeatureMap<T>> {
    let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::arg(
            "conv2d",
            format!("kernel {kh}×{kw} must be odd with symmetric padding"),
        ));
    }
    let spec = ConvSpec {
        stride: 1,
        dilation,
        padding: Padding2d::same(padding),
        groups,
    };
    conv2d_with(input, weight, bias, &spec)
}

/// 1×1 convolution: each output channel is an affine combination of the input
/// channels at the same pixel.
pub fn pointwise_conv<T: Scalar>(
    input: &FeatureMap<T>,
    weight: ArrayView4<T>,
    bias: Option<ArrayView1<T>>,
) -> Result<FeatureMap<T>> {
    let ws = weight.shape();
    if ws[2] != 1 || ws[3] != 1 {
        return Err(Error::shape("pointwise_conv", format!("weight {ws:?} is not 1×1")));
    }
    if ws[1] != input.shape()[1] {
        return Err(Error::shape(
            "pointwise_conv",
            format!("weight C_in {} ≠ input C {}", ws[1], input.shape()[1]),
        ));
    }
    conv2d_with(input, weight, bias, &ConvSpec::default())
}

/// Per-channel statistics kept from a training-mode normalisation forward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: FeatureMap<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance.
    pub batch_var: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Training-mode normalisation over the batch and spatial axes.
pub fn channel_norm_train<T: Scalar>(
    x: &FeatureMap<T>,
    scale: ArrayView1<T>,
    shift: ArrayView1<T>,
    eps: f64,
) -> Result<(FeatureMap<T>, NormCache<T>)> {
    let (b, c, h, w) = dims4(x);
    check_norm_params("channel_norm", c, &scale, &shift)?;
    let n = b * h * w;
    if n < 2 {
        return Err(Error::arg(
            "channel_norm",
            "training mode needs at least two values per channel (B·H·W ≥ 2)",
        ));
    }
    let nt = T::lit(n as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let plane = x.slice(ndarray::s![.., ci, .., ..]);
        let m = plane.iter().fold(T::zero(), |a, &v| a + v) / nt;
        let v = plane.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m)) / nt;
        mean[ci] = m;
        var[ci] = v;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
    let mut xhat = x.as_standard_layout().into_owned();
    let mut y = Array4::<T>::zeros((b, c, h, w));
    for ((idx, xh), out) in xhat.indexed_iter_mut().zip(y.iter_mut()) {
        let ci = idx.1;
        *xh = (*xh - mean[ci]) * inv_std[ci];
        *out = scale[ci] * *xh + shift[ci];
    }
    Ok((y, NormCache { xhat, inv_std, batch_mean: mean, batch_var: var }))
}

/// Eval-mode normalisation: `scale·(x − m)/sqrt(v + eps) + shift`.
pub fn channel_norm_eval<T: Scalar>(
    x: &FeatureMap<T>,
    scale: ArrayView1<T>,
    shift: ArrayView1<T>,
    running_mean: ArrayView1<T>,
    running_var: ArrayView1<T>,
    eps: f64,
) -> Result<FeatureMap<T>> {
    let c = x.shape()[1];
    check_norm_params("channel_norm", c, &scale, &shift)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("channel_norm", "running statistics length ≠ C"));
    }
    let mut y = x.as_standard_layout().into_owned();
    for ((_, ci, _, _), v) in y.indexed_iter_mut() {
        let inv = T::one() / (running_var[ci] + T::lit(eps)).sqrt();
        *v = scale[ci] * (*v - running_mean[ci]) * inv + shift[ci];
    }
    Ok(y)
}

fn check_norm_params<T>(
    op: &'static str,
    c: usize,
    scale: &ArrayView1<T>,
    shift: &ArrayView1<T>,
) -> Result<()> {
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(
            op,
            format!("scale/shift lengths {}/{} ≠ C {c}", scale.len(), shift.len()),
        ));
    }
    Ok(())
}

/// Returns `(d_input, d_scale, d_shift)` for the training-mode pass.
pub fn channel_norm_backward_train<T: Scalar>(
    grad_out: &FeatureMap<T>,
    cache: &NormCache<T>,
    scale: ArrayView1<T>,
) -> (FeatureMap<T>, Array1<T>, Array1<T>) {
    let (b, c, h, w) = dims4(grad_out);
    let nt = T::lit((b * h * w) as f64);
    let mut dscale = Array1::<T>::zeros(c);
    let mut dshift = Array1::<T>::zeros(c);
    for ((idx, &g), &xh) in grad_out.indexed_iter().zip(cache.xhat.iter()) {
        dshift[idx.1] += g;
        dscale[idx.1] += g * xh;
    }
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    for ((idx, d), (&g, &xh)) in dx
        .indexed_iter_mut()
        .zip(grad_out.iter().zip(cache.xhat.iter()))
    {
        let ci = idx.1;
        *d = scale[ci] * cache.inv_std[ci] / nt * (nt * g - dshift[ci] - xh * dscale[ci]);
    }
    (dx, dscale, dshift)
}

pub fn channel_norm_backward_eval<T: Scalar>(
    grad_out: &FeatureMap<T>,
    x: &FeatureMap<T>,
    scale: ArrayView1<T>,
    running_mean: ArrayView1<T>,
    running_var: ArrayView1<T>,
    eps: f64,
) -> (FeatureMap<T>, Array1<T>, Array1<T>) {
    let c = grad_out.shape()[1];
    let inv: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
    let mut dscale = Array1::<T>::zeros(c);
    let mut dshift = Array1::<T>::zeros(c);
    let mut dx = Array4::<T>::zeros(grad_out.raw_dim());
    for ((idx, d), (&g, &xv)) in dx.indexed_iter_mut().zip(grad_out.iter().zip(x.iter())) {
        let ci = idx.1;
        dshift[ci] += g;
        dscale[ci] += g * (xv - running_mean[ci]) * inv[ci];
        *d = g * scale[ci] * inv[ci];
    }
    (dx, dscale, dshift)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Sigmoid,
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn activation<T: Scalar>(x: &FeatureMap<T>, kind: ActivationKind) -> FeatureMap<T> {
    match kind {
        ActivationKind::Relu => x.mapv(|v| if v > T::zero() { v } else { T::zero() }),
        ActivationKind::Sigmoid => x.mapv(sigmoid),
    }
}

/// `input` is the forward input, `output` the forward output.
pub fn activation_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    input: &FeatureMap<T>,
    output: &FeatureMap<T>,
    kind: ActivationKind,
) -> FeatureMap<T> {
    let mut dx = grad_out.to_owned();
    match kind {
        ActivationKind::Relu => {
            ndarray::Zip::from(&mut dx).and(input).for_each(|d, &x| {
                if x <= T::zero() {
                    *d = T::zero();
                }
            });
        }
        ActivationKind::Sigmoid => {
            ndarray::Zip::from(&mut dx)
                .and(output)
                .for_each(|d, &y| *d *= y * (T::one() - y));
        }
    }
    dx
}

fn pool_out(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if n + 2 * padding < k {
        return Err(Error::shape("avg_pool", format!("extent {n} + 2·{padding} < window {k}")));
    }
    Ok((n + 2 * padding - k) / stride + 1)
}

/// Window mean that excludes padded cells from the divisor.
pub fn avg_pool<T: Scalar>(
    x: &FeatureMap<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<FeatureMap<T>> {
    if stride < 1 || k < 1 {
        return Err(Error::arg("avg_pool", format!("k={k}, stride={stride} must be ≥ 1")));
    }
    let (b, c, h, w) = dims4(x);
    let (ho, wo) = (pool_out(h, k, stride, padding)?, pool_out(w, k, stride, padding)?);
    let mut y = Array4::<T>::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.slice(ndarray::s![bi, ci, .., ..]);
            for oh in 0..ho {
                let (h0, h1) = window(oh, stride, padding, k, h);
                for ow in 0..wo {
                    let (w0, w1) = window(ow, stride, padding, k, w);
                    let mut s = T::zero();
                    for i in h0..h1 {
                        for j in w0..w1 {
                            s += plane[[i, j]];
                        }
                    }
                    let count = (h1 - h0) * (w1 - w0);
                    y[[bi, ci, oh, ow]] = if count == 0 { T::zero() } else { s / T::lit(count as f64) };
                }
            }
        }
    }
    Ok(y)
}

fn window(o: usize, stride: usize, padding: usize, k: usize, n: usize) -> (usize, usize) {
    let start = (o * stride) as isize - padding as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + k as isize).max(0) as usize).min(n);
    (lo.min(hi), hi)
}

pub fn avg_pool_backward<T: Scalar>(
    grad_out: &FeatureMap<T>,
    input_shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
) -> FeatureMap<T> {
    let (b, c, h, w) = input_shape;
    let (_, _, ho, wo) = dims4(grad_out);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for oh in 0..ho {
                let (h0, h1) = window(oh, stride, padding, k, h);
                for ow in 0..wo {
                    let (w0, w1) = window(ow, stride, padding, k, w);
                    let count = (h1 - h0) * (w1 - w0);
                    if count == 0 {
                        continue;
                    }
                    let g = grad_out[[bi, ci, oh, ow]] / T::lit(count as f64);
                    for i in h0..h1 {
                        for j in w0..w1 {
                            dx[[bi, ci, i, j]] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn upsample_nearest<T: Scalar>(x: &FeatureMap<T>, factor: usize) -> Result<FeatureMap<T>> {
    if factor < 2 {
        return Err(Error::arg("upsample_nearest", format!("factor {factor} < 2")));
    }
    let (b, c, h, w) = dims4(x);
    let y = Array4::from_shape_fn((b, c, h * factor, w * factor), |(bi, ci, i, j)| {
        x[[bi, ci, i / factor, j / factor]]
    });
    Ok(y)
}

pub fn upsample_nearest_backward<T: Scalar>(grad_out: &FeatureMap<T>, factor: usize) -> FeatureMap<T> {
    let (b, c, h, w) = dims4(grad_out);
    let mut dx = Array4::<T>::zeros((b, c, h / factor, w / factor));
    for ((bi, ci, i, j), &g) in grad_out.indexed_iter() {
        dx[[bi, ci, i / factor, j / factor]] += g;
    }
    dx
}

/// Per-channel spatial mean, `[B, C]`.
pub fn global_avg_pool<T: Scalar>(x: &FeatureMap<T>) -> Array2<T> {
    let (b, c, h, w) = dims4(x);
    let n = T::lit((h * w) as f64);
    Array2::from_shape_fn((b, c), |(bi, ci)| {
        x.slice(ndarray::s![bi, ci, .., ..]).iter().fold(T::zero(), |a, &v| a + v) / n
    })
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Array2<T>, h: usize, w: usize) -> FeatureMap<T> {
    let (b, c) = grad_out.dim();
    let n = T::lit((h * w) as f64);
    Array4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| grad_out[[bi, ci]] / n)
}

/// `y = x·Wᵀ + b` with `x: [B, D_in]`, `W: [D_out, D_in]`.
pub fn affine<T: Scalar>(
    x: &Array2<T>,
    weight: ArrayView2<T>,
    bias: Option<ArrayView1<T>>,
) -> Result<Array2<T>> {
    let (d_out, d_in) = weight.dim();
    if x.ncols() != d_in {
        return Err(Error::shape("affine", format!("input dim {} ≠ weight D_in {d_in}", x.ncols())));
    }
    let mut y = x.dot(&weight.t());
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(Error::shape("affine", format!("bias len {} ≠ D_out {d_out}", b.len())));
        }
        y += &b;
    }
    Ok(y)
}

/// Returns `(d_x, d_weight, d_bias)`.
pub fn affine_backward<T: Scalar>(
    grad_out: &Array2<T>,
    x: &Array2<T>,
    weight: ArrayView2<T>,
) -> (Array2<T>, Array2<T>, Array1<T>) {
    let dx = grad_out.dot(&weight);
    let dw = grad_out.t().dot(x);
    let db = grad_out.sum_axis(ndarray::Axis(0));
    (dx, dw, db)
}
