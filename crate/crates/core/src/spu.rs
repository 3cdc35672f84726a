//! Spatial branch: two dilated channel-split blocks around a channel gate.
//!
//! ```text
//! F [C] → DCBlock → F_mid [C/2] → F_mid ⊙ CA(F_mid) → DCBlock → F_out [C]
//! ```

use ndarray::{Array2, Axis, Ix2};

use crate::nn::layers::{Activation, Affine, ChannelNorm, Conv2d};
use crate::nn::ops::{self, effective_kernel, ActivationKind, ConvSpec};
use crate::nn::{concat_channels, dims4, join, slice_channels, FeatureMap, Init, Layer, Mode, ParamVisitor, Scalar};
use crate::{Error, Result};

pub const BRANCH_KERNEL: usize = 3;
pub const DILATIONS: [usize; 2] = [1, 2];
pub const CA_REDUCTION: usize = 4;

/// Receptive field of a chain of `(kernel, dilation)` convolutions.
pub fn receptive_field(chain: &[(usize, usize)]) -> usize {
    1 + chain.iter().map(|&(k, d)| effective_kernel(k, d) - 1).sum::<usize>()
}

/// Channel-split block: the first half of the input goes through a dilation-1
/// 3×3 conv, the second half through a dilation-2 one; each branch adds its
/// own input back (projected by a 1×1 conv when widths differ), and a 1×1
/// conv + norm + activation fuses the two halves.
///
/// None of the convs carry a bias: every path ends in the norm layer.
#[derive(Debug, Clone)]
pub struct DcBlock<T> {
    pub branch_a: Conv2d<T>,
    pub branch_b: Conv2d<T>,
    pub proj_a: Option<Conv2d<T>>,
    pub proj_b: Option<Conv2d<T>>,
    pub fuse: Conv2d<T>,
    pub norm: ChannelNorm<T>,
    act: Activation<T>,
    c_in: usize,
    c_out: usize,
}

impl<T: Scalar> DcBlock<T> {
    pub fn new(c_in: usize, c_out: usize, init: Init, name: &str) -> Result<Self> {
        if c_in % 2 != 0 || c_out % 2 != 0 || c_in == 0 || c_out == 0 {
            return Err(Error::shape(
                "dcblock",
                format!("channel counts must be even and positive, got C_in={c_in}, C_out={c_out}"),
            ));
        }
        let (hi, ho) = (c_in / 2, c_out / 2);
        let branch = |d: usize, tag: &str| {
            Conv2d::new(hi, ho, BRANCH_KERNEL, ConvSpec::preserving(BRANCH_KERNEL, d), false, &mut init.rng(&join(name, tag)))
        };
        let proj = |tag: &str| {
            (hi != ho).then(|| Conv2d::new(hi, ho, 1, ConvSpec::default(), false, &mut init.rng(&join(name, tag))))
        };
        Ok(Self {
            branch_a: branch(DILATIONS[0], "branch_a"),
            branch_b: branch(DILATIONS[1], "branch_b"),
            proj_a: proj("proj_a"),
            proj_b: proj("proj_b"),
            fuse: Conv2d::new(c_out, c_out, 1, ConvSpec::default(), false, &mut init.rng(&join(name, "fuse"))),
            norm: ChannelNorm::new(c_out),
            act: Activation::new(ActivationKind::Relu),
            c_in,
            c_out,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    fn branch_forward(
        conv: &mut Conv2d<T>,
        proj: &mut Option<Conv2d<T>>,
        x: &FeatureMap<T>,
        mode: Mode,
    ) -> Result<FeatureMap<T>> {
        let y = conv.forward(x, mode)?;
        let r = match proj {
            Some(p) => p.forward(x, mode)?,
            None => x.clone(),
        };
        Ok(y + r)
    }

    fn branch_backward(conv: &mut Conv2d<T>, proj: &mut Option<Conv2d<T>>, g: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let dx = conv.backward(g)?;
        Ok(match proj {
            Some(p) => dx + p.backward(g)?,
            None => dx + g,
        })
    }
}

impl<T: Scalar> Layer<T> for DcBlock<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let (_, c, h, w) = dims4(x);
        if c != self.c_in {
            return Err(Error::shape("dcblock", format!("input has {c} channels, expected {}", self.c_in)));
        }
        if h < BRANCH_KERNEL || w < BRANCH_KERNEL {
            return Err(Error::shape("dcblock", format!("spatial size {h}×{w} is below 3×3")));
        }
        let half = self.c_in / 2;
        let a = Self::branch_forward(&mut self.branch_a, &mut self.proj_a, &slice_channels(x, 0, half), mode)?;
        let b = Self::branch_forward(&mut self.branch_b, &mut self.proj_b, &slice_channels(x, half, c), mode)?;
        let y = self.fuse.forward(&concat_channels(&[&a, &b])?, mode)?;
        let y = self.norm.forward(&y, mode)?;
        self.act.forward(&y, mode)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.act.backward(grad_out)?;
        let g = self.norm.backward(&g)?;
        let g = self.fuse.backward(&g)?;
        let half = self.c_out / 2;
        let da = Self::branch_backward(&mut self.branch_a, &mut self.proj_a, &slice_channels(&g, 0, half))?;
        let db = Self::branch_backward(&mut self.branch_b, &mut self.proj_b, &slice_channels(&g, half, self.c_out))?;
        concat_channels(&[&da, &db])
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.branch_a.visit_params(&join(prefix, "branch_a"), f);
        self.branch_b.visit_params(&join(prefix, "branch_b"), f);
        if let Some(p) = self.proj_a.as_mut() {
            p.visit_params(&join(prefix, "proj_a"), f);
        }
        if let Some(p) = self.proj_b.as_mut() {
            p.visit_params(&join(prefix, "proj_b"), f);
        }
        self.fuse.visit_params(&join(prefix, "fuse"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

/// Stateless form of [`DcBlock`].
pub fn dcblock_forward<T: Scalar>(block: &mut DcBlock<T>, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
    block.forward(x, mode)
}

/// Squeeze-and-excitation gate: `F · sigmoid(W₂ relu(W₁ gap(F)))` per channel.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    pub fc1: Affine<T>,
    pub fc2: Affine<T>,
    cache: Option<GateCache<T>>,
}

#[derive(Debug, Clone)]
struct GateCache<T> {
    x: FeatureMap<T>,
    hidden_pre: Array2<T>,
    gate: Array2<T>,
}

fn check_reduction(c: usize, r: usize) -> Result<()> {
    if r == 0 || c == 0 || c % r != 0 {
        return Err(Error::shape("channel_attention", format!("reduction r={r} does not divide C={c}")));
    }
    Ok(())
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(c: usize, r: usize, init: Init, name: &str) -> Result<Self> {
        check_reduction(c, r)?;
        Ok(Self {
            fc1: Affine::new(c, c / r, &mut init.rng(&join(name, "fc1"))),
            fc2: Affine::new(c / r, c, &mut init.rng(&join(name, "fc2"))),
            cache: None,
        })
    }

    /// All bottleneck weights and biases zero, so every gate is exactly 0.5.
    pub fn zeros(c: usize, r: usize) -> Result<Self> {
        check_reduction(c, r)?;
        Ok(Self { fc1: Affine::zeros(c, c / r), fc2: Affine::zeros(c / r, c), cache: None })
    }

    pub fn channels(&self) -> usize {
        self.fc1.weight.shape()[1]
    }

    /// Gates for already pooled `[B, C]` descriptors (no caching).
    pub fn gates(&self, pooled: &Array2<T>) -> Result<Array2<T>> {
        let w1 = self.fc1.weight.value.view().into_dimensionality::<Ix2>().expect("rank-2 weight");
        let b1 = self.fc1.bias.value.view().into_dimensionality().expect("rank-1 bias");
        let w2 = self.fc2.weight.value.view().into_dimensionality::<Ix2>().expect("rank-2 weight");
        let b2 = self.fc2.bias.value.view().into_dimensionality().expect("rank-1 bias");
        let h = ops::affine(pooled, w1, Some(b1))?.mapv(|v| v.max(T::zero()));
        Ok(ops::affine(&h, w2, Some(b2))?.mapv(ops::sigmoid))
    }
}

fn apply_gate<T: Scalar>(x: &FeatureMap<T>, gate: &Array2<T>) -> FeatureMap<T> {
    let g = gate.view().insert_axis(Axis(2)).insert_axis(Axis(3));
    x * &g
}

impl<T: Scalar> Layer<T> for ChannelAttention<T> {
    fn forward(&mut self, x: &FeatureMap<T>, _mode: Mode) -> Result<FeatureMap<T>> {
        let c = x.shape()[1];
        if c != self.channels() {
            return Err(Error::shape(
                "channel_attention",
                format!("input has {c} channels, expected {}", self.channels()),
            ));
        }
        let pooled = ops::global_avg_pool(x);
        let hidden_pre = self.fc1.forward(&pooled)?;
        let hidden = hidden_pre.mapv(|v| v.max(T::zero()));
        let gate = self.fc2.forward(&hidden)?.mapv(ops::sigmoid);
        let y = apply_gate(x, &gate);
        self.cache = Some(GateCache { x: x.clone(), hidden_pre, gate });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::arg("channel_attention", "backward called before forward"))?;
        let (_, _, h, w) = dims4(&cache.x);
        let direct = apply_gate(grad_out, &cache.gate);
        let dgate = (grad_out * &cache.x).sum_axis(Axis(3)).sum_axis(Axis(2));
        let dz2 = dgate * &cache.gate.mapv(|g| g * (T::one() - g));
        let dh = self.fc2.backward(&dz2)?;
        let dz1 = ndarray::Zip::from(&dh)
            .and(&cache.hidden_pre)
            .map_collect(|&d, &z| if z > T::zero() { d } else { T::zero() });
        let dpooled = self.fc1.backward(&dz1)?;
        Ok(direct + ops::global_avg_pool_backward(&dpooled, h, w))
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.fc1.visit_params(&join(prefix, "fc1"), f);
        self.fc2.visit_params(&join(prefix, "fc2"), f);
    }
}

/// Stateless form of [`ChannelAttention`]: the gated map.
pub fn channel_attention<T: Scalar>(ca: &mut ChannelAttention<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    ca.forward(x, Mode::Eval)
}

/// `C → C/2 → C` spatial branch.
#[derive(Debug, Clone)]
pub struct DilatedSpu<T> {
    pub dc1: DcBlock<T>,
    pub ca: ChannelAttention<T>,
    pub dc2: DcBlock<T>,
    channels: usize,
}

/// Reduction actually used for a gate over `c` channels: [`CA_REDUCTION`]
/// when it divides `c`, otherwise the largest smaller divisor.
pub fn spu_reduction(c: usize) -> usize {
    (1..=CA_REDUCTION).rev().find(|r| c % r == 0).unwrap_or(1)
}

impl<T: Scalar> DilatedSpu<T> {
    pub fn new(c: usize, init: Init, name: &str) -> Result<Self> {
        if c == 0 || c % 4 != 0 {
            return Err(Error::shape("dilated_spu", format!("C={c} is not divisible by 4")));
        }
        let mid = c / 2;
        Ok(Self {
            dc1: DcBlock::new(c, mid, init, &join(name, "dc1"))?,
            ca: ChannelAttention::new(mid, spu_reduction(mid), init, &join(name, "ca"))?,
            dc2: DcBlock::new(mid, c, init, &join(name, "dc2"))?,
            channels: c,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `F_mid` (before gating) for inspection.
    pub fn mid(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        self.dc1.forward(x, mode)
    }
}

impl<T: Scalar> Layer<T> for DilatedSpu<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let (b, c, h, w) = dims4(x);
        if c != self.channels {
            return Err(Error::shape("dilated_spu", format!("input has {c} channels, expected {}", self.channels)));
        }
        let mid = self.dc1.forward(x, mode)?;
        debug_assert_eq!(mid.shape(), [b, c / 2, h, w]);
        let gated = self.ca.forward(&mid, mode)?;
        let out = self.dc2.forward(&gated, mode)?;
        debug_assert_eq!(out.shape(), [b, c, h, w]);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.dc2.backward(grad_out)?;
        let g = self.ca.backward(&g)?;
        self.dc1.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.dc1.visit_params(&join(prefix, "dc1"), f);
        self.ca.visit_params(&join(prefix, "ca"), f);
        self.dc2.visit_params(&join(prefix, "dc2"), f);
    }
}

/// Stateless form of [`DilatedSpu`].
pub fn dilated_spu_forward<T: Scalar>(spu: &mut DilatedSpu<T>, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
    spu.forward(x, mode)
}

/// Zero every learnable weight in a layer (norm scale stays 1, shift 0).
pub fn zero_weights<T: Scalar>(layer: &mut dyn Layer<T>) {
    layer.visit_params("", &mut |name, p| {
        if p.requires_grad && !name.ends_with("norm.scale") {
            p.value.fill(T::zero());
        }
    });
}
