//! Shape and channel contracts over a grid of valid configurations.

#![allow(dead_code)]

use d3r_core::fpu::{fpu_forward, Fpu, FpuConfig};
use d3r_core::kernels::{default_bank, KernelFamily};
use d3r_core::model::{density_head_forward, extractor_forward, DensityHead, Extractor, Family, ModelConfig};
use d3r_core::nn::ops::ActivationKind;
use d3r_core::nn::{FeatureMap, Init, Mode};
use d3r_core::spu::{dilated_spu_forward, DilatedSpu};
use ndarray::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn input(seed: u64, shape: (usize, usize, usize, usize)) -> FeatureMap<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn expect(what: &str, got: &[usize], want: &[usize]) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: got {got:?}, want {want:?}"))
    }
}

/// Number of configurations checked, or the first broken contract.
pub fn check_shape_grid() -> Result<usize, String> {
    let mut n = 0;
    let e = |r: d3r_core::Result<FeatureMap<f32>>| r.map_err(|e| e.to_string());
    for (ci, &c) in [4usize, 8, 16].iter().enumerate() {
        for (si, &(h, w)) in [(4usize, 4usize), (6, 9), (13, 8), (16, 16)].iter().enumerate() {
            for b in [1usize, 2] {
                let seed = (ci * 100 + si * 10 + b) as u64;
                let x = input(seed, (b, c, h, w));
                for family in [KernelFamily::Gabor, KernelFamily::Fourier, KernelFamily::Haar] {
                    let cfg = FpuConfig { channels: c, out_channels: c, activation: ActivationKind::Relu };
                    let bank = default_bank(family).map_err(|e| e.to_string())?;
                    let mut fpu = Fpu::<f32>::new(cfg, bank, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(|e| e.to_string())?;
                    let mid = e(fpu.mid(&x, Mode::Train))?;
                    expect(&format!("fpu/{family} mid"), mid.shape(), &[b, 2 * c, h, w])?;
                    expect(&format!("fpu/{family}"), e(fpu_forward(&mut fpu, &x, Mode::Train))?.shape(), &[b, c, h, w])?;
                    n += 1;
                }
                let mut spu = DilatedSpu::<f32>::new(c, Init::new(seed), "spu").map_err(|e| e.to_string())?;
                expect("spu mid", e(spu.mid(&x, Mode::Train))?.shape(), &[b, c / 2, h, w])?;
                expect("spu out", e(dilated_spu_forward(&mut spu, &x, Mode::Train))?.shape(), &[b, c, h, w])?;
                let mut head = DensityHead::<f32>::new(c, Init::new(seed), "head").map_err(|e| e.to_string())?;
                head.randomize_projection(&mut ChaCha8Rng::seed_from_u64(seed));
                expect("head", e(density_head_forward(&mut head, &x, Mode::Eval))?.shape(), &[b, 1, 4 * h, 4 * w])?;
                n += 2;
            }
        }
    }
    for family in Family::ALL {
        for &(h, w) in &[(24usize, 24usize), (32, 48), (64, 40), (128, 128)] {
            let mut m = Extractor::<f32>::new(ModelConfig { channels: 8, family, n_groups: 4, n_scales: 2 }, 1)
                .map_err(|e| e.to_string())?;
            m.head.randomize_projection(&mut ChaCha8Rng::seed_from_u64(3));
            let img = input(7, (2, 3, h, w)).mapv(|v| 0.5 + 0.5 * v);
            let d = e(extractor_forward(&mut m, &img, Mode::Train))?;
            expect(&format!("extractor/{family}"), d.shape(), &[2, 1, h / 2, w / 2])?;
            if d.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(format!("extractor/{family}: density is negative or non-finite"));
            }
            n += 1;
        }
    }
    Ok(n)
}
