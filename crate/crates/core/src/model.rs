//! The full density extractor: toy stem (stride 8) → dual-domain fusion →
//! density head (×4), giving a single-channel map at image stride 2.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::fpu::{Fpu, FpuConfig};
use crate::io::{write_raw_f32, GrayImage};
use crate::kernels::{bank_with, KernelFamily};
use crate::nn::layers::{Activation, ChannelNorm, Conv2d, ConvNormAct, Upsample};
use crate::nn::ops::{ActivationKind, ConvSpec};
use crate::nn::{concat_channels, dims4, join, slice_channels, FeatureMap, Init, Layer, Mode, Param, ParamVisitor, Scalar};
use crate::spu::DilatedSpu;
use crate::{Error, Result};

/// Image pixels per density cell along each axis.
pub const DENSITY_STRIDE: usize = 2;
/// Total stride of the stem.
pub const STEM_STRIDE: usize = 8;
pub const STEM_WIDTHS: [usize; 2] = [16, 32];
/// Initial bias of the final projection, so the output starts above the relu kink.
pub const HEAD_BIAS_INIT: f64 = 0.01;

/// Frequency-branch family, or `None` for the spatial-only baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    None,
    Haar,
    Fourier,
    Gabor,
}

impl Family {
    /// Reporting order: baseline first, then the kernel families.
    pub const ALL: [Family; 4] = [Family::None, Family::Haar, Family::Fourier, Family::Gabor];

    pub fn kernels(self) -> Option<KernelFamily> {
        match self {
            Family::None => None,
            Family::Haar => Some(KernelFamily::Haar),
            Family::Fourier => Some(KernelFamily::Fourier),
            Family::Gabor => Some(KernelFamily::Gabor),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Family::None => "none",
            Family::Haar => "haar",
            Family::Fourier => "fourier",
            Family::Gabor => "gabor",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(Family::None),
            other => other.parse::<KernelFamily>().map(|k| match k {
                KernelFamily::Haar => Family::Haar,
                KernelFamily::Fourier => Family::Fourier,
                KernelFamily::Gabor => Family::Gabor,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub family: Family,
    pub n_groups: usize,
    pub n_scales: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { channels: 64, family: Family::Gabor, n_groups: 4, n_scales: 2 }
    }
}

/// Frequency and spatial branches joined by concat → 1×1 conv → norm → relu.
///
/// Without a frequency branch its half of the concat is all zeros, so the
/// fusion width stays `2C` and the shared parameters keep their shapes.
pub struct D2fm<T> {
    pub fpu: Option<Fpu<T>>,
    pub spu: DilatedSpu<T>,
    pub fuse: Conv2d<T>,
    pub norm: ChannelNorm<T>,
    act: Activation<T>,
    channels: usize,
}

impl<T: Scalar> D2fm<T> {
    pub fn new(cfg: &ModelConfig, init: Init, name: &str) -> Result<Self> {
        let c = cfg.channels;
        if c == 0 || c % 4 != 0 || c % cfg.n_groups.max(1) != 0 {
            return Err(Error::shape(
                "d2fm",
                format!("C={c} must be divisible by 4 and by N={}", cfg.n_groups),
            ));
        }
        let fpu = match cfg.family.kernels() {
            Some(kf) => {
                let bank = bank_with(kf, cfg.n_groups, cfg.n_scales)?;
                let fc = FpuConfig { channels: c, out_channels: c, activation: ActivationKind::Relu };
                Some(Fpu::new(fc, bank, &mut init.rng(&join(name, "fpu")))?)
            }
            None => None,
        };
        Ok(Self {
            fpu,
            spu: DilatedSpu::new(c, init, &join(name, "spu"))?,
            fuse: Conv2d::new(2 * c, c, 1, ConvSpec::default(), false, &mut init.rng(&join(name, "fuse"))),
            norm: ChannelNorm::new(c),
            act: Activation::new(ActivationKind::Relu),
            channels: c,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

impl<T: Scalar> Layer<T> for D2fm<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let s = self.spu.forward(x, mode)?;
        let f = match self.fpu.as_mut() {
            Some(fpu) => fpu.forward(x, mode)?,
            None => FeatureMap::zeros(s.raw_dim()),
        };
        if f.shape() != s.shape() {
            return Err(Error::shape(
                "d2fm",
                format!("branch shapes differ: {:?} vs {:?}", f.shape(), s.shape()),
            ));
        }
        let y = self.fuse.forward(&concat_channels(&[&f, &s])?, mode)?;
        let y = self.norm.forward(&y, mode)?;
        self.act.forward(&y, mode)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.act.backward(grad_out)?;
        let g = self.norm.backward(&g)?;
        let g = self.fuse.backward(&g)?;
        let c = self.channels;
        let mut dx = self.spu.backward(&slice_channels(&g, c, 2 * c))?;
        if let Some(fpu) = self.fpu.as_mut() {
            dx += &fpu.backward(&slice_channels(&g, 0, c))?;
        }
        Ok(dx)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        if let Some(fpu) = self.fpu.as_mut() {
            fpu.visit_params(&join(prefix, "fpu"), f);
        }
        self.spu.visit_params(&join(prefix, "spu"), f);
        self.fuse.visit_params(&join(prefix, "fuse"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }
}

/// Stateless form of [`D2fm`].
pub fn d2fm_forward<T: Scalar>(m: &mut D2fm<T>, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
    m.forward(x, mode)
}

/// Two (3×3 conv → relu → ×2 upsample) stages and a 1×1 projection to one
/// non-negative channel.
pub struct DensityHead<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub proj: Conv2d<T>,
    acts: [Activation<T>; 3],
    up: Upsample,
}

impl<T: Scalar> DensityHead<T> {
    pub fn new(c: usize, init: Init, name: &str) -> Result<Self> {
        if c < 4 || c % 4 != 0 {
            return Err(Error::shape("density_head", format!("C={c} must be a positive multiple of 4")));
        }
        let spec = ConvSpec::preserving(3, 1);
        let mut proj = Conv2d::new(c / 4, 1, 1, ConvSpec::default(), true, &mut init.rng(&join(name, "proj")));
        // Start flat at the bias: random projection weights put the initial
        // map far above the target scale, and the descent that follows
        // silences the hidden relus for good.
        proj.weight.value.fill(T::zero());
        if let Some(b) = proj.bias.as_mut() {
            b.value.fill(T::lit(HEAD_BIAS_INIT));
        }
        Ok(Self {
            conv1: Conv2d::new(c, c / 2, 3, spec, true, &mut init.rng(&join(name, "conv1"))),
            conv2: Conv2d::new(c / 2, c / 4, 3, spec, true, &mut init.rng(&join(name, "conv2"))),
            proj,
            acts: std::array::from_fn(|_| Activation::new(ActivationKind::Relu)),
            up: Upsample { factor: 2 },
        })
    }

    /// Draw the projection weights like the hidden convs. An untrained head
    /// is otherwise constant, which hides everything upstream of it.
    pub fn randomize_projection(&mut self, rng: &mut impl rand::Rng) {
        let shape = self.proj.weight.shape().to_vec();
        self.proj.weight.value = Param::<T>::uniform_fan_in(&shape, shape[1], rng).value;
    }
}

impl<T: Scalar> Layer<T> for DensityHead<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let y = self.conv1.forward(x, mode)?;
        let y = self.acts[0].forward(&y, mode)?;
        let y = Layer::<T>::forward(&mut self.up, &y, mode)?;
        let y = self.conv2.forward(&y, mode)?;
        let y = self.acts[1].forward(&y, mode)?;
        let y = Layer::<T>::forward(&mut self.up, &y, mode)?;
        let y = self.proj.forward(&y, mode)?;
        self.acts[2].forward(&y, mode)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.acts[2].backward(grad_out)?;
        let g = self.proj.backward(&g)?;
        let g = Layer::<T>::backward(&mut self.up, &g)?;
        let g = self.acts[1].backward(&g)?;
        let g = self.conv2.backward(&g)?;
        let g = Layer::<T>::backward(&mut self.up, &g)?;
        let g = self.acts[0].backward(&g)?;
        self.conv1.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }
}

/// Stateless form of [`DensityHead`].
pub fn density_head_forward<T: Scalar>(h: &mut DensityHead<T>, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
    h.forward(x, mode)
}

/// Three stride-2 3×3 conv → norm → relu blocks, 3 → 16 → 32 → C.
pub struct ToyStem<T> {
    pub blocks: Vec<ConvNormAct<T>>,
}

impl<T: Scalar> ToyStem<T> {
    pub fn new(c: usize, init: Init, name: &str) -> Self {
        let widths = [3, STEM_WIDTHS[0], STEM_WIDTHS[1], c];
        let spec = ConvSpec::preserving(3, 1).with_stride(2);
        let blocks = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let conv = Conv2d::new(w[0], w[1], 3, spec, false, &mut init.rng(&join(name, &format!("b{i}"))));
                ConvNormAct::new(conv, ActivationKind::Relu)
            })
            .collect();
        Self { blocks }
    }
}

impl<T: Scalar> Layer<T> for ToyStem<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let mut y = x.clone();
        for b in &mut self.blocks {
            y = b.forward(&y, mode)?;
        }
        Ok(y)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = grad_out.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("b{i}")), f);
        }
    }
}

/// Image `[B, 3, H, W]` → density `[B, 1, H/2, W/2]`.
pub struct Extractor<T> {
    pub config: ModelConfig,
    pub stem: ToyStem<T>,
    pub d2fm: D2fm<T>,
    pub head: DensityHead<T>,
}

impl<T: Scalar> Extractor<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let init = Init::new(seed);
        Ok(Self {
            config,
            stem: ToyStem::new(config.channels, init, "stem"),
            d2fm: D2fm::new(&config, init, "d2fm")?,
            head: DensityHead::new(config.channels, init, "head")?,
        })
    }

    /// Every parameter and buffer as `(name, shape)`, in visiting order.
    pub fn layout(&mut self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name.to_string(), p.shape().to_vec())));
        out
    }

    pub fn n_trainable(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| {
            if p.requires_grad {
                n += p.value.len();
            }
        });
        n
    }
}

/// Reject image sizes the stem cannot divide evenly.
pub fn check_image_size(h: usize, w: usize) -> Result<()> {
    if h % STEM_STRIDE == 0 && w % STEM_STRIDE == 0 && h > 0 && w > 0 {
        return Ok(());
    }
    let pad = |v: usize| (STEM_STRIDE - v % STEM_STRIDE) % STEM_STRIDE;
    Err(Error::shape(
        "extractor",
        format!(
            "image {h}×{w} is not a multiple of {STEM_STRIDE}; pad by {} rows and {} columns",
            pad(h),
            pad(w)
        ),
    ))
}

impl<T: Scalar> Layer<T> for Extractor<T> {
    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
        let (_, c, h, w) = dims4(x);
        if c != 3 {
            return Err(Error::shape("extractor", format!("expected 3 image channels, got {c}")));
        }
        check_image_size(h, w)?;
        let y = self.stem.forward(x, mode)?;
        let y = self.d2fm.forward(&y, mode)?;
        self.head.forward(&y, mode)
    }

    fn backward(&mut self, grad_out: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let g = self.head.backward(grad_out)?;
        let g = self.d2fm.backward(&g)?;
        self.stem.backward(&g)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        self.d2fm.visit_params(&join(prefix, "d2fm"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

/// Stateless form of [`Extractor`].
pub fn extractor_forward<T: Scalar>(m: &mut Extractor<T>, image: &FeatureMap<T>, mode: Mode) -> Result<FeatureMap<T>> {
    m.forward(image, mode)
}

/// Batch item `b` of a single-channel map as an `f64` plane.
pub fn density_plane<T: Scalar>(d: &FeatureMap<T>, b: usize) -> Array2<f64> {
    d.index_axis(ndarray::Axis(0), b)
        .index_axis(ndarray::Axis(0), 0)
        .mapv(|v| v.to_f64().unwrap_or(f64::NAN))
}

pub fn write_density_pgm(path: &Path, density: ArrayView2<f64>) -> Result<()> {
    let (h, w) = density.dim();
    let values: Vec<f32> = density.iter().map(|&v| v as f32).collect();
    GrayImage::from_plane(&values, w, h).write_pgm(path)
}

/// Raw `f32` little-endian with a sidecar holding shape `[H, W]` and stride 2.
pub fn write_density_raw(path: &Path, density: ArrayView2<f64>) -> Result<()> {
    let (h, w) = density.dim();
    let values: Vec<f32> = density.iter().map(|&v| v as f32).collect();
    write_raw_f32(path, &values, &[h, w], DENSITY_STRIDE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check_with_loss, projection_loss, GradCheckConfig};
    use crate::spu::zero_weights;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(seed: u64, shape: (usize, usize, usize, usize)) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn cfg(c: usize, family: Family) -> ModelConfig {
        ModelConfig { channels: c, family, n_groups: 4, n_scales: 2 }
    }

    #[test]
    fn family_names() {
        for f in Family::ALL {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{f}\""));
        }
        assert!("wavelet".parse::<Family>().is_err());
    }

    #[test]
    fn d2fm_shapes_and_ablation() {
        let x = rand_map(1, (1, 8, 16, 16));
        let mut full = D2fm::<f64>::new(&cfg(8, Family::Gabor), Init::new(3), "d2fm").unwrap();
        let mut none = D2fm::<f64>::new(&cfg(8, Family::None), Init::new(3), "d2fm").unwrap();
        assert_eq!(full.fuse.weight.shape(), &[8, 16, 1, 1]);
        assert_eq!(none.fuse.weight.shape(), &[8, 16, 1, 1]);
        // Shared parameters start identical across arms.
        assert_eq!(full.fuse.weight.value, none.fuse.weight.value);
        let a = full.forward(&x, Mode::Train).unwrap();
        let b = none.forward(&x, Mode::Train).unwrap();
        assert_eq!(a.shape(), &[1, 8, 16, 16]);
        assert_ne!(a, b);
        assert!(D2fm::<f64>::new(&cfg(12, Family::Gabor), Init::new(3), "d2fm").is_ok());
        assert!(D2fm::<f64>::new(&cfg(6, Family::Gabor), Init::new(3), "d2fm").is_err());
    }

    #[test]
    fn head_shape_and_sign() {
        let mut h = DensityHead::<f64>::new(64, Init::new(1), "head").unwrap();
        let flat = h.forward(&rand_map(2, (1, 64, 4, 4)), Mode::Eval).unwrap();
        assert!(flat.iter().all(|&v| (v - HEAD_BIAS_INIT).abs() < 1e-15));
        h.randomize_projection(&mut ChaCha8Rng::seed_from_u64(1));
        let y = h.forward(&rand_map(2, (1, 64, 16, 16)), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
        assert!(y.iter().all(|&v| v >= 0.0));
        zero_weights(&mut h);
        let y = h.forward(&rand_map(3, (1, 64, 4, 4)), Mode::Eval).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extractor_shapes_and_determinism() {
        let mut m = Extractor::<f32>::new(cfg(8, Family::Gabor), 7).unwrap();
        m.head.randomize_projection(&mut ChaCha8Rng::seed_from_u64(7));
        let img = rand_map(4, (1, 3, 128, 128)).mapv(|v| v as f32);
        let a = m.forward(&img, Mode::Eval).unwrap();
        assert_eq!(a.shape(), &[1, 1, 64, 64]);
        let mut m2 = Extractor::<f32>::new(cfg(8, Family::Gabor), 7).unwrap();
        m2.head.randomize_projection(&mut ChaCha8Rng::seed_from_u64(7));
        let b = m2.forward(&img, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let err = m.forward(&FeatureMap::zeros((1, 3, 20, 32)), Mode::Eval).unwrap_err().to_string();
        assert!(err.contains("pad by 4 rows and 0 columns"), "{err}");
    }

    #[test]
    fn gradients() {
        let gc = GradCheckConfig::default();
        let mut d = D2fm::<f64>::new(&cfg(8, Family::Gabor), Init::new(5), "d2fm").unwrap();
        let rep = grad_check_with_loss(&mut d, &rand_map(5, (2, 8, 5, 5)), &projection_loss(1), &gc).unwrap();
        assert!(rep.pass, "{rep:?}");

        let mut h = DensityHead::<f64>::new(8, Init::new(6), "head").unwrap();
        h.randomize_projection(&mut ChaCha8Rng::seed_from_u64(6));
        let rep = grad_check_with_loss(&mut h, &rand_map(6, (2, 8, 3, 3)), &projection_loss(2), &gc).unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}
