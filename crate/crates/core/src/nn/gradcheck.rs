//! Central-difference gradient checking in 64-bit.
//!
//! The relative error of an entry is `|a − n| / max(|a|, |n|, 1e-8)` where `a`
//! is the analytic and `n` the numeric derivative.

use ndarray::Array4;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{FeatureMap, Layer, Mode, Param, ParamVisitor};
use crate::Result;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Check at most this many entries per tensor (chosen deterministically).
    pub max_entries: Option<usize>,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, max_entries: None, mode: Mode::Train, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<GradCheckEntry>,
    pub input_max_rel_error: f64,
    pub pass: bool,
    pub epsilon: f64,
    pub tolerance: f64,
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|e| e.max_rel_error)
            .fold(self.input_max_rel_error, f64::max)
    }
}

/// A scalar loss on a block's output together with its gradient.
pub type LossFn<'a> = dyn Fn(&FeatureMap<f64>) -> (f64, FeatureMap<f64>) + 'a;

pub fn sum_loss(y: &FeatureMap<f64>) -> (f64, FeatureMap<f64>) {
    (y.sum(), Array4::ones(y.raw_dim()))
}

/// `L = Σ r·y` with fixed pseudo-random weights `r ∈ [−1, 1]`.
///
/// `r` comes from a separate ChaCha stream, so it never coincides with an
/// input drawn from `seed_from_u64(seed)`: with `r = x` a normalisation
/// layer's input gradient collapses to an `eps`-sized residue.
///
/// Plain sums are blind to anything downstream of a normalisation layer
/// (the normalised output always sums to `N·shift`), so blocks ending in a
/// norm are checked with a projection instead.
pub fn projection_loss(seed: u64) -> impl Fn(&FeatureMap<f64>) -> (f64, FeatureMap<f64>) {
    move |y: &FeatureMap<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let r = Array4::from_shape_fn(y.raw_dim(), |_| rng.random_range(-1.0..1.0));
        ((&r * y).sum(), r)
    }
}

fn collect_params(layer: &mut dyn Layer<f64>) -> Vec<(String, Param<f64>)> {
    let mut out = Vec::new();
    layer.visit_params("", &mut |name, p| out.push((name.to_string(), p.clone())));
    out
}

fn with_param(layer: &mut dyn Layer<f64>, index: usize, f: &mut dyn FnMut(&mut Param<f64>)) {
    let mut k = 0;
    let visitor: &mut ParamVisitor<'_, f64> = &mut |_, p| {
        if k == index {
            f(p);
        }
        k += 1;
    };
    layer.visit_params("", visitor);
}

fn nudge(layer: &mut dyn Layer<f64>, param: usize, entry: usize, delta: f64) {
    with_param(layer, param, &mut |q| {
        q.value.as_slice_mut().expect("standard layout param")[entry] += delta;
    });
}

fn entries(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.max_entries {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9e37_79b9));
            let mut idx = sample(&mut rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn eval_loss(
    layer: &mut dyn Layer<f64>,
    x: &FeatureMap<f64>,
    loss: &LossFn<'_>,
    mode: Mode,
) -> Result<f64> {
    let y = layer.forward(x, mode)?;
    Ok(loss(&y).0)
}

/// Compare a layer's backward pass against central differences of `loss`.
pub fn grad_check_with_loss(
    layer: &mut dyn Layer<f64>,
    input: &FeatureMap<f64>,
    loss: &LossFn<'_>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let eps = cfg.epsilon;
    layer.zero_grad();
    let y = layer.forward(input, cfg.mode)?;
    let (_, dy) = loss(&y);
    let dx = layer.backward(&dy)?;
    let analytic = collect_params(layer);

    let mut diagnostic = None;
    for (name, p) in &analytic {
        if p.requires_grad && p.grad.iter().any(|g| !g.is_finite()) {
            diagnostic = Some(format!("non-finite analytic gradient for parameter `{name}`"));
            break;
        }
    }
    if diagnostic.is_none() && dx.iter().any(|g| !g.is_finite()) {
        diagnostic = Some("non-finite analytic gradient for the input".to_string());
    }
    if let Some(d) = diagnostic {
        return Ok(GradCheckReport {
            params: Vec::new(),
            input_max_rel_error: f64::INFINITY,
            pass: false,
            epsilon: eps,
            tolerance: cfg.tolerance,
            diagnostic: Some(d),
        });
    }

    let mut reports = Vec::new();
    for (pi, (name, p)) in analytic.iter().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let flat_grad: Vec<f64> = p.grad.iter().copied().collect();
        let picks = entries(flat_grad.len(), cfg, pi as u64 + 1);
        let mut worst = 0.0f64;
        for &e in &picks {
            nudge(layer, pi, e, eps);
            let plus = eval_loss(layer, input, loss, cfg.mode)?;
            nudge(layer, pi, e, -2.0 * eps);
            let minus = eval_loss(layer, input, loss, cfg.mode)?;
            nudge(layer, pi, e, eps);
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(flat_grad[e], numeric));
        }
        reports.push(GradCheckEntry { name: name.clone(), max_rel_error: worst, checked: picks.len() });
    }

    let mut x = input.as_standard_layout().into_owned();
    let dx_flat: Vec<f64> = dx.iter().copied().collect();
    let mut input_worst = 0.0f64;
    for e in entries(dx_flat.len(), cfg, 0) {
        let orig = x.as_slice().expect("owned")[e];
        x.as_slice_mut().expect("owned")[e] = orig + eps;
        let plus = eval_loss(layer, &x, loss, cfg.mode)?;
        x.as_slice_mut().expect("owned")[e] = orig - eps;
        let minus = eval_loss(layer, &x, loss, cfg.mode)?;
        x.as_slice_mut().expect("owned")[e] = orig;
        input_worst = input_worst.max(relative_error(dx_flat[e], (plus - minus) / (2.0 * eps)));
    }

    let pass = input_worst <= cfg.tolerance && reports.iter().all(|r| r.max_rel_error <= cfg.tolerance);
    let diagnostic = (!pass).then(|| {
        let worst = reports
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
            .map(|r| format!("worst parameter `{}` rel err {:.3e}", r.name, r.max_rel_error))
            .unwrap_or_default();
        format!("{worst}; input rel err {input_worst:.3e}")
    });
    Ok(GradCheckReport {
        params: reports,
        input_max_rel_error: input_worst,
        pass,
        epsilon: eps,
        tolerance: cfg.tolerance,
        diagnostic,
    })
}

/// [`grad_check_with_loss`] with the plain sum of the output as loss.
pub fn grad_check(
    layer: &mut dyn Layer<f64>,
    input: &FeatureMap<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    grad_check_with_loss(layer, input, &sum_loss, cfg)
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn numeric_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + eps;
            let plus = f(&xs);
            xs[i] = orig - eps;
            let minus = f(&xs);
            xs[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// Negative control: multiplies every gradient produced by `inner` by `factor`.
pub struct ScaledBackward<L> {
    pub inner: L,
    pub factor: f64,
}

impl<L: Layer<f64>> Layer<f64> for ScaledBackward<L> {
    fn forward(&mut self, x: &FeatureMap<f64>, mode: Mode) -> Result<FeatureMap<f64>> {
        self.inner.forward(x, mode)
    }

    fn backward(&mut self, grad_out: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
        let mut before = Vec::new();
        self.inner.visit_params("", &mut |_, p| before.push(p.grad.clone()));
        let dx = self.inner.backward(grad_out)?;
        let factor = self.factor;
        let mut k = 0;
        self.inner.visit_params("", &mut |_, p| {
            let b = &before[k];
            p.grad = b + &((&p.grad - b) * factor);
            k += 1;
        });
        Ok(dx * factor)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, f64>) {
        self.inner.visit_params(prefix, f);
    }
}
