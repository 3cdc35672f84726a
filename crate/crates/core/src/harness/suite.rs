//! Finite-difference checks of every block, 64-bit, on fixed seeds.

use std::fmt::Write as _;

use ndarray::{Array, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{drfl, DrflConfig};
use crate::fpu::{Fpu, FpuConfig};
use crate::kernels::{default_bank, KernelFamily};
use crate::model::{D2fm, DensityHead, Extractor, Family, ModelConfig};
use crate::nn::gradcheck::{
    grad_check_with_loss, numeric_gradient, projection_loss, relative_error, GradCheckConfig, ScaledBackward,
};
use crate::nn::layers::{Activation, Affine, AvgPool, ChannelNorm, Conv2d, Upsample};
use crate::nn::ops::{self, ActivationKind, ConvSpec};
use crate::nn::{FeatureMap, Init, Layer, Mode, ParamVisitor};
use crate::spu::{ChannelAttention, DcBlock, DilatedSpu};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteLine {
    pub block: String,
    /// Whether the block is expected to fail (negative control).
    pub expect_failure: bool,
    pub max_rel_error: f64,
    pub checked: usize,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub lines: Vec<SuiteLine>,
    pub pass: bool,
}

impl SuiteReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let verdict = if l.ok { "PASS" } else { "FAIL" };
            let note = if l.expect_failure { " (negative control, must exceed tolerance)" } else { "" };
            writeln!(out, "{verdict} {:<24} max_rel_err={:.3e} checked={}{note}", l.block, l.max_rel_error, l.checked)
                .expect("string write");
        }
        out
    }
}

fn rand_map(seed: u64, shape: (usize, usize, usize, usize)) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Global pooling followed by a dense layer, as `[B, D, 1, 1]`.
struct PooledAffine {
    affine: Affine<f64>,
    hw: (usize, usize),
}

impl Layer<f64> for PooledAffine {
    fn forward(&mut self, x: &FeatureMap<f64>, _: Mode) -> Result<FeatureMap<f64>> {
        self.hw = (x.shape()[2], x.shape()[3]);
        let y = self.affine.forward(&ops::global_avg_pool(x))?;
        Ok(y.insert_axis(Axis(2)).insert_axis(Axis(3)))
    }

    fn backward(&mut self, g: &FeatureMap<f64>) -> Result<FeatureMap<f64>> {
        let g2: Array2<f64> = g.index_axis(Axis(3), 0).index_axis(Axis(2), 0).to_owned();
        let dp = self.affine.backward(&g2)?;
        Ok(ops::global_avg_pool_backward(&dp, self.hw.0, self.hw.1))
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, f64>) {
        self.affine.visit_params(prefix, f);
    }
}

/// Move every bias off zero. Zero biases put relus fed by an all-zero window
/// exactly on their kink, where one-sided and central differences disagree.
fn jitter_biases(layer: &mut dyn Layer<f64>, rng: &mut impl Rng) {
    layer.visit_params("", &mut |name, p| {
        if name.ends_with("bias") {
            p.value.mapv_inplace(|_| rng.random_range(0.05..0.2));
        }
    });
}

fn check(
    name: &str,
    layer: &mut dyn Layer<f64>,
    input: FeatureMap<f64>,
    cfg: &GradCheckConfig,
    seed: u64,
    expect_failure: bool,
) -> Result<SuiteLine> {
    let rep = grad_check_with_loss(layer, &input, &projection_loss(seed), cfg)?;
    let checked = rep.params.iter().map(|p| p.checked).sum::<usize>() + input.len();
    Ok(SuiteLine {
        block: name.to_string(),
        expect_failure,
        max_rel_error: rep.max_rel_error(),
        checked,
        ok: rep.pass != expect_failure,
    })
}

fn drfl_line(cfg: &GradCheckConfig) -> Result<SuiteLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (rows, cols) = (6, 7);
    let gt: Vec<f64> = (0..rows * cols)
        .map(|i| if i % 3 == 0 { rng.random_range(0.0..0.2) } else { rng.random_range(0.0..0.005) })
        .collect();
    // Every entry at least 0.01 from the pred = gt switch, and pred ≥ 0.
    let pred: Vec<f64> = gt
        .iter()
        .map(|&g| {
            let d: f64 = rng.random_range(0.01..0.3);
            if rng.random_bool(0.5) && g >= d { g - d } else { g + d }
        })
        .collect();
    let d = DrflConfig::default();
    let gt_a = Array2::from_shape_vec((rows, cols), gt).expect("shape");
    let pred_a = Array2::from_shape_vec((rows, cols), pred.clone()).expect("shape");
    let (_, analytic) = drfl(pred_a.view(), gt_a.view(), &d)?;
    let f = |p: &[f64]| {
        let pa = Array2::from_shape_vec((rows, cols), p.to_vec()).expect("shape");
        drfl(pa.view(), gt_a.view(), &d).expect("valid shapes").0
    };
    let numeric = numeric_gradient(&f, &pred, cfg.epsilon);
    let worst = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
    Ok(SuiteLine {
        block: "drfl".into(),
        expect_failure: false,
        max_rel_error: worst,
        checked: numeric.len(),
        ok: worst <= cfg.tolerance,
    })
}

/// One line per block plus a negative control that must fail.
pub fn gradcheck_suite() -> Result<SuiteReport> {
    let cfg = GradCheckConfig::default();
    let init = Init::new(17);
    let c = 8;
    let mut lines = Vec::new();
    let mut rng = init.rng("suite");

    let mut conv = Conv2d::<f64>::new(3, 4, 3, ConvSpec::preserving(3, 2), true, &mut rng);
    lines.push(check("conv2d", &mut conv, rand_map(1, (2, 3, 7, 7)), &cfg, 1, false)?);
    let mut pw = Conv2d::<f64>::new(6, 4, 1, ConvSpec::default(), true, &mut rng);
    lines.push(check("pointwise_conv", &mut pw, rand_map(2, (2, 6, 5, 5)), &cfg, 2, false)?);
    let mut norm = ChannelNorm::<f64>::new(4);
    lines.push(check("channel_norm/train", &mut norm, rand_map(3, (2, 4, 4, 4)), &cfg, 3, false)?);
    let eval_cfg = GradCheckConfig { mode: Mode::Eval, ..cfg };
    norm.running_mean.value.fill(0.2);
    norm.running_var.value.fill(1.7);
    lines.push(check("channel_norm/eval", &mut norm, rand_map(4, (2, 4, 4, 4)), &eval_cfg, 4, false)?);
    let mut relu = Activation::<f64>::new(ActivationKind::Relu);
    lines.push(check("relu", &mut relu, rand_map(5, (1, 3, 5, 5)), &cfg, 5, false)?);
    let mut sig = Activation::<f64>::new(ActivationKind::Sigmoid);
    lines.push(check("sigmoid", &mut sig, rand_map(6, (1, 3, 5, 5)), &cfg, 6, false)?);
    let mut pool = AvgPool::new(3, 1, 1);
    lines.push(check("avg_pool", &mut pool, rand_map(7, (1, 3, 6, 6)), &cfg, 7, false)?);
    let mut up = Upsample { factor: 2 };
    lines.push(check("upsample", &mut up, rand_map(8, (1, 2, 3, 3)), &cfg, 8, false)?);
    let mut pa = PooledAffine { affine: Affine::new(5, 3, &mut rng), hw: (0, 0) };
    lines.push(check("global_pool+affine", &mut pa, rand_map(9, (2, 5, 4, 4)), &cfg, 9, false)?);

    for family in [KernelFamily::Gabor, KernelFamily::Fourier, KernelFamily::Haar] {
        let fc = FpuConfig { channels: c, out_channels: c, activation: ActivationKind::Relu };
        let mut fpu = Fpu::<f64>::new(fc, default_bank(family)?, &mut init.rng("fpu"))?;
        lines.push(check(&format!("fpu/{family}"), &mut fpu, rand_map(10, (2, c, 6, 6)), &cfg, 10, false)?);
    }
    let mut dc = DcBlock::<f64>::new(c, c / 2, init, "dc")?;
    lines.push(check("dcblock", &mut dc, rand_map(11, (2, c, 5, 5)), &cfg, 11, false)?);
    let mut ca = ChannelAttention::<f64>::new(c, 4, init, "ca")?;
    lines.push(check("channel_attention", &mut ca, rand_map(12, (2, c, 4, 4)), &cfg, 12, false)?);
    let mut spu = DilatedSpu::<f64>::new(c, init, "spu")?;
    lines.push(check("dilated_spu", &mut spu, rand_map(13, (2, c, 5, 5)), &cfg, 13, false)?);
    let mc = ModelConfig { channels: c, family: Family::Gabor, n_groups: 4, n_scales: 2 };
    let mut d2fm = D2fm::<f64>::new(&mc, init, "d2fm")?;
    lines.push(check("d2fm", &mut d2fm, rand_map(14, (2, c, 5, 5)), &cfg, 14, false)?);
    let mut head = DensityHead::<f64>::new(c, init, "head")?;
    head.randomize_projection(&mut rng);
    jitter_biases(&mut head, &mut rng);
    lines.push(check("density_head", &mut head, rand_map(15, (2, c, 3, 3)), &cfg, 15, false)?);
    lines.push(drfl_line(&cfg)?);
    let mut full = Extractor::<f64>::new(mc, 17)?;
    full.head.randomize_projection(&mut rng);
    jitter_biases(&mut full, &mut rng);
    let img = rand_map(16, (2, 3, 24, 24)).mapv(|v| 0.5 + 0.5 * v);
    lines.push(check("pipeline(C=8)", &mut full, img, &cfg, 16, false)?);

    let mut bad = ScaledBackward { inner: Conv2d::<f64>::new(3, 4, 3, ConvSpec::preserving(3, 1), true, &mut rng), factor: 2.0 };
    lines.push(check("negative_control", &mut bad, rand_map(17, (1, 3, 5, 5)), &cfg, 17, true)?);

    let pass = lines.iter().all(|l| l.ok);
    Ok(SuiteReport { epsilon: cfg.epsilon, tolerance: cfg.tolerance, lines, pass })
}
