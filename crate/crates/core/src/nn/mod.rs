//! Differentiable building blocks.
//!
//! Every primitive exists twice: as a pure function in [`ops`] (forward and
//! backward taking all state explicitly) and as a stateful [`Layer`] in
//! [`layers`] that caches what its backward pass needs. Composite blocks
//! elsewhere in the crate are built from the layers.

pub mod gradcheck;
pub mod layers;
pub mod ops;

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array4, ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Floating point element type. Training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `[batch, channels, height, width]`, always in standard (row-major) layout.
pub type FeatureMap<T> = Array4<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor (or a non-learnable buffer such as running statistics).
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub requires_grad: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, requires_grad: true }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad, requires_grad: false }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// Uniform in `[-bound, bound]` with `bound = 1 / sqrt(fan_in)`.
    pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..=bound)))
            .collect::<Vec<_>>();
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/len agree"))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Callback used to walk a model's parameters in a stable order.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;

/// A stateful block with a hand-written backward pass.
///
/// `backward` must be called after `forward` with a gradient shaped like the
/// forward output; it accumulates into parameter grads and returns the input
/// gradient.
pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>>;
    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>>;
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>);

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic per-module parameter initialisation.
///
/// Each module draws from its own stream keyed by its name, so adding or
/// removing a module never shifts the initial values of the others.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(self.seed, fnv1a(name.as_bytes())))
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finaliser over two words.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn dims4<T>(x: &FeatureMap<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Concatenate along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&FeatureMap<T>]) -> Result<FeatureMap<T>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let out = ndarray::concatenate(ndarray::Axis(1), &views)
        .map_err(|e| Error::shape("concat_channels", e.to_string()))?;
    Ok(out.as_standard_layout().into_owned())
}

/// Channels `[start, end)` as an owned standard-layout map.
pub fn slice_channels<T: Scalar>(x: &FeatureMap<T>, start: usize, end: usize) -> FeatureMap<T> {
    x.slice(ndarray::s![.., start..end, .., ..])
        .as_standard_layout()
        .into_owned()
}

/// Cast between element types (used to build 64-bit twins of 32-bit models).
pub fn cast<A: Scalar, B: Scalar>(x: &ArrayD<A>) -> ArrayD<B> {
    x.mapv(|v| B::lit(v.to_f64().unwrap_or(f64::NAN)))
}
