use ndarray::{Array2, ArrayD, Ix1, Ix2, Ix4, IxDyn};
use rand::Rng;

use super::ops::{self, ActivationKind, ConvSpec, NormCache, NORM_EPS, NORM_MOMENTUM};
use super::{dims4, join, FeatureMap, Layer, Mode, Param, ParamVisitor, Scalar};
use crate::{Error, Result};

fn missing_cache(op: &'static str) -> Error {
    Error::arg(op, "backward called before forward")
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: ConvSpec,
    /// When false, `backward` returns zeros instead of the input gradient.
    pub input_grad: bool,
    input: Option<FeatureMap<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Weight `[c_out, c_in/groups, k, k]` drawn uniform in ±1/sqrt(fan_in); zero bias.
    pub fn new(c_in: usize, c_out: usize, k: usize, spec: ConvSpec, bias: bool, rng: &mut impl Rng) -> Self {
        let cg = c_in / spec.groups;
        let fan_in = cg * k * k;
        let weight = Param::uniform_fan_in(&[c_out, cg, k, k], fan_in, rng);
        let bias = bias.then(|| Param::zeros(&[c_out]));
        Self::from_params(weight, bias, spec)
    }

    pub fn from_params(weight: Param<T>, bias: Option<Param<T>>, spec: ConvSpec) -> Self {
        Self { weight, bias, spec, input_grad: true, input: None }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward_ref(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let w = self.weight.value.view().into_dimensionality::<Ix4>().expect("rank-4 weight");
        let b = self
            .bias
            .as_ref()
            .map(|b| b.value.view().into_dimensionality::<Ix1>().expect("rank-1 bias"));
        ops::conv2d_with(x, w, b, &self.spec)
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn forward(&mut self, x: &FeatureMap<T>, _mode: Mode) -> Result<FeatureMap<T>> {
        let y = self.forward_ref(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let w = self.weight.value.view().into_dimensionality::<Ix4>().expect("rank-4 weight");
        let want = ops::ConvGrads { input: self.input_grad, weight: self.weight.requires_grad };
        let (dx, dw, db) = ops::conv2d_backward(x, w, grad_out, &self.spec, want)?;
        if want.weight {
            self.weight.grad += &dw.into_dyn();
        }
        if let Some(b) = self.bias.as_mut() {
            b.grad += &db.into_dyn();
        }
        Ok(dx.unwrap_or_else(|| FeatureMap::zeros(x.raw_dim())))
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Batch normalisation over `(B, H, W)` per channel.
#[derive(Debug, Clone)]
pub struct ChannelNorm<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<NormState<T>>,
}

#[derive(Debug, Clone)]
enum NormState<T> {
    Train(NormCache<T>),
    Eval(FeatureMap<T>),
}

impl<T: Scalar> ChannelNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            scale: Param::filled(&[c], T::one()),
            shift: Param::zeros(&[c]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[c]))),
            running_var: Param::buffer(ArrayD::from_elem(IxDyn(&[c]), T::one())),
            eps: NORM_EPS,
            momentum: NORM_MOMENTUM,
            cache: None,
        }
    }
}

fn vec1<T: Scalar>(p: &Param<T>) -> ndarray::ArrayView1<'_, T> {
    p.value.view().into_dimensionality::<Ix1>().expect("rank-1 param")
}

impl<T: Scalar> Layer<T> for ChannelNorm<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        match mode {
            Mode::Train => {
                let (y, cache) = ops::channel_norm_train(x, vec1(&self.scale), vec1(&self.shift), self.eps)?;
                let (b, _, h, w) = dims4(x);
                let n = (b * h * w) as f64;
                let m = T::lit(self.momentum);
                let unbias = T::lit(n / (n - 1.0));
                for (ci, (&bm, &bv)) in cache.batch_mean.iter().zip(&cache.batch_var).enumerate() {
                    let rm = &mut self.running_mean.value[ci];
                    *rm = (T::one() - m) * *rm + m * bm;
                    let rv = &mut self.running_var.value[ci];
                    *rv = (T::one() - m) * *rv + m * bv * unbias;
                }
                self.cache = Some(NormState::Train(cache));
                Ok(y)
            }
            Mode::Eval => {
                let y = ops::channel_norm_eval(
                    x,
                    vec1(&self.scale),
                    vec1(&self.shift),
                    vec1(&self.running_mean),
                    vec1(&self.running_var),
                    self.eps,
                )?;
                self.cache = Some(NormState::Eval(x.clone()));
                Ok(y)
            }
        }
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (dx, dscale, dshift) = match self.cache.as_ref().ok_or_else(|| missing_cache("channel_norm"))? {
            NormState::Train(cache) => ops::channel_norm_backward_train(grad_out, cache, vec1(&self.scale)),
            NormState::Eval(x) => ops::channel_norm_backward_eval(
                grad_out,
                x,
                vec1(&self.scale),
                vec1(&self.running_mean),
                vec1(&self.running_var),
                self.eps,
            ),
        };
        self.scale.grad += &dscale.into_dyn();
        self.shift.grad += &dshift.into_dyn();
        Ok(dx)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "scale"), &mut self.scale);
        f(&join(prefix, "shift"), &mut self.shift);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Debug, Clone)]
pub struct Activation<T> {
    pub kind: ActivationKind,
    cache: Option<(FeatureMap<T>, FeatureMap<T>)>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, cache: None }
    }
}

impl<T: Scalar> Layer<T> for Activation<T> {
    fn forward(&mut self, x: &FeatureMap<T>, _mode: Mode) -> Result<FeatureMap<T>> {
        let y = ops::activation(x, self.kind);
        self.cache = Some((x.clone(), y.clone()));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let (x, y) = self.cache.as_ref().ok_or_else(|| missing_cache("activation"))?;
        Ok(ops::activation_backward(grad_out, x, y, self.kind))
    }

    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_, T>) {}
}

#[derive(Debug, Clone)]
pub struct AvgPool {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    input_shape: Option<(usize, usize, usize, usize)>,
}

impl AvgPool {
    pub fn new(k: usize, stride: usize, padding: usize) -> Self {
        Self { k, stride, padding, input_shape: None }
    }
}

impl<T: Scalar> Layer<T> for AvgPool {
    fn forward(&mut self, x: &FeatureMap<T>, _mode: Mode) -> Result<FeatureMap<T>> {
        self.input_shape = Some(dims4(x));
        ops::avg_pool(x, self.k, self.stride, self.padding)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let shape = self.input_shape.ok_or_else(|| missing_cache("avg_pool"))?;
        Ok(ops::avg_pool_backward(grad_out, shape, self.k, self.stride, self.padding))
    }

    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_, T>) {}
}

#[derive(Debug, Clone)]
pub struct Upsample {
    pub factor: usize,
}

impl<T: Scalar> Layer<T> for Upsample {
    fn forward(&mut self, x: &FeatureMap<T>, _mode: Mode) -> Result<FeatureMap<T>> {
        ops::upsample_nearest(x, self.factor)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        Ok(ops::upsample_nearest_backward(grad_out, self.factor))
    }

    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_, T>) {}
}

/// Dense layer on `[B, D]` vectors; not a [`Layer`] since it does not act on feature maps.
#[derive(Debug, Clone)]
pub struct Affine<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array2<T>>,
}

impl<T: Scalar> Affine<T> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::uniform_fan_in(&[d_out, d_in], d_in, rng),
            bias: Param::zeros(&[d_out]),
            input: None,
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { weight: Param::zeros(&[d_out, d_in]), bias: Param::zeros(&[d_out]), input: None }
    }

    pub fn forward(&mut self, x: &Array2<T>) -> Result<Array2<T>> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("rank-2 weight");
        let y = ops::affine(x, w, Some(vec1(&self.bias)))?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Array2<T>) -> Result<Array2<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("affine"))?;
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("rank-2 weight");
        let (dx, dw, db) = ops::affine_backward(grad_out, x, w);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        Ok(dx)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Convolution → channel norm → activation.
#[derive(Debug, Clone)]
pub struct ConvNormAct<T> {
    pub conv: Conv2d<T>,
    pub norm: ChannelNorm<T>,
    pub act: Activation<T>,
}

impl<T: Scalar> ConvNormAct<T> {
    pub fn new(conv: Conv2d<T>, act: ActivationKind) -> Self {
        let c = conv.c_out();
        Self { conv, norm: ChannelNorm::new(c), act: Activation::new(act) }
    }
}

impl<T: Scalar> Layer<T> for ConvNormAct<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let y = self.conv.forward(x, mode)?;
        let y = self.norm.forward(&y, mode)?;
        self.act.forward(&y, mode)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.act.backward(grad_out)?;
        let g = self.norm.backward(&g)?;
        self.conv.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

/// Named layers applied in order.
pub struct Sequential<T> {
    layers: Vec<(String, Box<dyn Layer<T> + Send>)>,
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Self { layers: Vec::new() }
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, name: &str, layer: impl Layer<T> + Send + 'static) -> Self {
        self.layers.push((name.to_string(), Box::new(layer)));
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let mut y = x.clone();
        for (_, l) in &mut self.layers {
            y = l.forward(&y, mode)?;
        }
        Ok(y)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = grad_out.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (name, l) in &mut self.layers {
            l.visit_params(&join(prefix, name), f);
        }
    }
}
