//! Frequency branch: channel groups filtered by fixed kernel groups, then a
//! learned pointwise fusion.
//!
//! ```text
//! F = [F¹ … Fᴺ]                      (split by channel)
//! Mⁿ = pool(act(Fⁿ ⊛ bankⁿ))          (depthwise, every channel × every scale kernel)
//! out = act(norm(PWC(concat(M¹ … Mᴺ))))
//! ```

use ndarray::Array4;
use rand::Rng;

use crate::kernels::{Kernel2D, KernelBank};
use crate::nn::layers::{Activation, AvgPool, ChannelNorm, Conv2d};
use crate::nn::ops::{ActivationKind, ConvSpec, Padding2d};
use crate::nn::{concat_channels, join, slice_channels, FeatureMap, Layer, Mode, Param, ParamVisitor, Scalar};
use crate::{Error, Result};

pub const POOL_K: usize = 3;
pub const POOL_STRIDE: usize = 1;
pub const POOL_PADDING: usize = 1;

/// Split into `n` consecutive channel groups.
pub fn split_channels<T: Scalar>(f: &FeatureMap<T>, n: usize) -> Result<Vec<FeatureMap<T>>> {
    let c = f.shape()[1];
    if n == 0 || c % n != 0 {
        return Err(Error::shape("split_channels", format!("C={c} is not divisible by N={n}")));
    }
    let g = c / n;
    Ok((0..n).map(|i| slice_channels(f, i * g, (i + 1) * g)).collect())
}

/// Padding that keeps `H×W` for a `k×k` kernel; even kernels pad more on the
/// top/left.
pub fn preserving_padding(k: usize) -> Padding2d {
    if k % 2 == 1 {
        Padding2d::same(k / 2)
    } else {
        Padding2d { top: k / 2, left: k / 2, bottom: k / 2 - 1, right: k / 2 - 1 }
    }
}

/// Fixed depthwise filtering of one channel group: each input channel meets
/// each kernel (output channel `c·S + s`), then activation and a 3×3
/// stride-1 average pool.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    conv: Conv2d<T>,
    act: Activation<T>,
    pool: AvgPool,
    n_kernels: usize,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(channels: usize, kernels: &[Kernel2D], activation: ActivationKind) -> Result<Self> {
        let Some(first) = kernels.first() else {
            return Err(Error::arg("conv_block", "empty kernel list"));
        };
        let k = first.size();
        if kernels.iter().any(|kr| kr.values.dim() != (k, k)) {
            return Err(Error::arg("conv_block", "kernels must share one size"));
        }
        let s = kernels.len();
        let mut w = Array4::<T>::zeros((channels * s, 1, k, k));
        for c in 0..channels {
            for (si, kr) in kernels.iter().enumerate() {
                for ((i, j), &v) in kr.values.indexed_iter() {
                    w[[c * s + si, 0, i, j]] = T::lit(v);
                }
            }
        }
        let spec = ConvSpec::default()
            .with_padding(preserving_padding(k))
            .with_groups(channels);
        let weight = Param::buffer(w.into_dyn());
        Ok(Self {
            conv: Conv2d::from_params(weight, None, spec),
            act: Activation::new(activation),
            pool: AvgPool::new(POOL_K, POOL_STRIDE, POOL_PADDING),
            n_kernels: s,
        })
    }

    pub fn n_kernels(&self) -> usize {
        self.n_kernels
    }
}

impl<T: Scalar> Layer<T> for ConvBlock<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.act.forward(&y, mode)?;
        Layer::<T>::forward(&mut self.pool, &y, mode)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = Layer::<T>::backward(&mut self.pool, grad_out)?;
        let g = self.act.backward(&g)?;
        self.conv.backward(&g)
    }

    /// Fixed kernels are not parameters.
    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_, T>) {}
}

/// Stateless form of [`ConvBlock`].
pub fn conv_block<T: Scalar>(
    group: &FeatureMap<T>,
    kernels: &[Kernel2D],
    activation: ActivationKind,
) -> Result<FeatureMap<T>> {
    ConvBlock::new(group.shape()[1], kernels, activation)?.forward(group, Mode::Eval)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FpuConfig {
    pub channels: usize,
    pub out_channels: usize,
    pub activation: ActivationKind,
}

pub struct Fpu<T> {
    pub bank: KernelBank,
    blocks: Vec<ConvBlock<T>>,
    pub pwc: Conv2d<T>,
    pub norm: ChannelNorm<T>,
    act: Activation<T>,
    channels: usize,
}

impl<T: Scalar> Fpu<T> {
    /// The pointwise fusion has no bias: it feeds a normalisation layer.
    pub fn new(cfg: FpuConfig, bank: KernelBank, rng: &mut impl Rng) -> Result<Self> {
        let n = bank.n_groups();
        if n == 0 || cfg.channels % n != 0 {
            return Err(Error::shape(
                "fpu",
                format!("C={} is not divisible by N={n}", cfg.channels),
            ));
        }
        let per_group = cfg.channels / n;
        let blocks = bank
            .groups
            .iter()
            .map(|g| ConvBlock::new(per_group, g, cfg.activation))
            .collect::<Result<Vec<_>>>()?;
        let mid = cfg.channels * bank.n_scales();
        let pwc = Conv2d::new(mid, cfg.out_channels, 1, ConvSpec::default(), false, rng);
        Ok(Self {
            bank,
            blocks,
            pwc,
            norm: ChannelNorm::new(cfg.out_channels),
            act: Activation::new(cfg.activation),
            channels: cfg.channels,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.blocks.len()
    }

    pub fn mid_channels(&self) -> usize {
        self.channels * self.bank.n_scales()
    }

    /// The concatenated group responses that feed the pointwise fusion.
    pub fn mid(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        if x.shape()[1] != self.channels {
            return Err(Error::shape(
                "fpu_forward",
                format!("input has {} channels, expected {}", x.shape()[1], self.channels),
            ));
        }
        let groups = split_channels(x, self.blocks.len())?;
        let outs = groups
            .iter()
            .zip(self.blocks.iter_mut())
            .map(|(g, b)| b.forward(g, mode))
            .collect::<Result<Vec<_>>>()?;
        concat_channels(&outs.iter().collect::<Vec<_>>())
    }
}

impl<T: Scalar> Layer<T> for Fpu<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let mid = self.mid(x, mode)?;
        let y = self.pwc.forward(&mid, mode)?;
        let y = self.norm.forward(&y, mode)?;
        self.act.forward(&y, mode)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.act.backward(grad_out)?;
        let g = self.norm.backward(&g)?;
        let g = self.pwc.backward(&g)?;
        let parts = split_channels(&g, self.blocks.len())?;
        let dxs = parts
            .iter()
            .zip(self.blocks.iter_mut())
            .map(|(p, b)| b.backward(p))
            .collect::<Result<Vec<_>>>()?;
        concat_channels(&dxs.iter().collect::<Vec<_>>())
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.pwc.visit_params(&join(prefix, "pwc"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

/// Stateless form of the whole branch.
pub fn fpu_forward<T: Scalar>(fpu: &mut Fpu<T>, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
    fpu.forward(x, mode)
}
