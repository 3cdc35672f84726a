//! Fixed filter banks for the frequency branch.
//!
//! Three families are supported: oriented Gabor kernels (the default), 2-D
//! Fourier basis patches and 2×2 Haar detail filters. A bank is organised as
//! `N` groups (one per orientation) of `S` kernels (one per scale / phase).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::io::GrayImage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gabor,
    Fourier,
    Haar,
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Gabor => "gabor",
            KernelFamily::Fourier => "fourier",
            KernelFamily::Haar => "haar",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gabor" => Ok(KernelFamily::Gabor),
            "fourier" => Ok(KernelFamily::Fourier),
            "haar" => Ok(KernelFamily::Haar),
            other => Err(Error::arg("kernel family", format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel2D {
    /// `[k, k]`, row index = y, column index = x.
    pub values: Array2<f64>,
    pub family: KernelFamily,
    pub angle: f64,
    pub scale: f64,
    pub meta: BTreeMap<String, f64>,
}

impl Kernel2D {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.values.sum()
    }

    pub fn dot(&self, other: &Kernel2D) -> f64 {
        (&self.values * &other.values).sum()
    }
}

fn zero_mean_unit_l2(mut v: Array2<f64>, op: &'static str) -> Result<Array2<f64>> {
    let mean = v.mean().unwrap_or(0.0);
    v.mapv_inplace(|x| x - mean);
    unit_l2(v, op)
}

fn unit_l2(mut v: Array2<f64>, op: &'static str) -> Result<Array2<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::arg(op, "kernel vanishes after normalisation"));
    }
    v.mapv_inplace(|x| x / norm);
    Ok(v)
}

/// Gabor response before normalisation:
/// `exp(−(x'² + γ²y'²)/(2σ²)) · cos(2πx'/λ + ψ)` with `(x', y')` the
/// coordinates rotated by θ, centred on the middle cell.
pub fn gabor_raw(theta: f64, sigma: f64, wavelength: f64, gamma: f64, psi: f64, k: usize) -> Array2<f64> {
    let c = (k / 2) as f64;
    let (s, co) = theta.sin_cos();
    Array2::from_shape_fn((k, k), |(i, j)| {
        let x = j as f64 - c;
        let y = i as f64 - c;
        let xr = x * co + y * s;
        let yr = -x * s + y * co;
        (-(xr * xr + gamma * gamma * yr * yr) / (2.0 * sigma * sigma)).exp()
            * (2.0 * PI * xr / wavelength + psi).cos()
    })
}

pub fn make_gabor_kernel(
    theta: f64,
    sigma: f64,
    wavelength: f64,
    gamma: f64,
    psi: f64,
    k: usize,
) -> Result<Kernel2D> {
    const OP: &str = "make_gabor_kernel";
    if !(sigma > 0.0) || !(wavelength > 0.0) || !(gamma > 0.0) {
        return Err(Error::arg(OP, format!("σ={sigma}, λ={wavelength}, γ={gamma} must be > 0")));
    }
    if k % 2 == 0 || k == 0 {
        return Err(Error::arg(OP, format!("kernel size {k} must be odd")));
    }
    let values = zero_mean_unit_l2(gabor_raw(theta, sigma, wavelength, gamma, psi, k), OP)?;
    let meta = BTreeMap::from([
        ("sigma".to_string(), sigma),
        ("wavelength".to_string(), wavelength),
        ("gamma".to_string(), gamma),
        ("psi".to_string(), psi),
        ("alpha".to_string(), 1.0),
    ]);
    Ok(Kernel2D { values, family: KernelFamily::Gabor, angle: theta, scale: sigma, meta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Cos,
    Sin,
}

pub fn fourier_raw(u: usize, v: usize, phase: Phase, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((k, k), |(y, x)| {
        let arg = 2.0 * PI * (u * x + v * y) as f64 / k as f64;
        match phase {
            Phase::Cos => arg.cos(),
            Phase::Sin => arg.sin(),
        }
    })
}

pub fn make_fourier_kernel(u: usize, v: usize, phase: Phase, k: usize) -> Result<Kernel2D> {
    const OP: &str = "make_fourier_kernel";
    if k == 0 || u >= k || v >= k {
        return Err(Error::arg(OP, format!("frequency ({u},{v}) outside 0..{k}")));
    }
    let dc = u == 0 && v == 0;
    if dc && phase == Phase::Sin {
        return Err(Error::arg(OP, "(0,0,sin) is identically zero"));
    }
    let raw = fourier_raw(u, v, phase, k);
    let values = if dc { unit_l2(raw, OP)? } else { zero_mean_unit_l2(raw, OP)? };
    // Direction of the signed frequency (u and k − u describe the same wave).
    let su = if 2 * u > k { u as f64 - k as f64 } else { u as f64 };
    let sv = if 2 * v > k { v as f64 - k as f64 } else { v as f64 };
    let meta = BTreeMap::from([
        ("u".to_string(), u as f64),
        ("v".to_string(), v as f64),
        ("phase".to_string(), if phase == Phase::Cos { 0.0 } else { 1.0 }),
    ]);
    Ok(Kernel2D {
        values,
        family: KernelFamily::Fourier,
        angle: sv.atan2(su).rem_euclid(PI),
        scale: (su * su + sv * sv).sqrt(),
        meta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HaarVariant {
    LH,
    HL,
    HH,
}

impl FromStr for HaarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "LH" | "lh" => Ok(HaarVariant::LH),
            "HL" | "hl" => Ok(HaarVariant::HL),
            "HH" | "hh" => Ok(HaarVariant::HH),
            other => Err(Error::arg("make_haar_kernel", format!("unknown Haar variant `{other}`"))),
        }
    }
}

pub fn make_haar_kernel(variant: HaarVariant) -> Kernel2D {
    let (values, angle) = match variant {
        HaarVariant::LH => (ndarray::array![[0.5, 0.5], [-0.5, -0.5]], PI / 2.0),
        HaarVariant::HL => (ndarray::array![[0.5, -0.5], [0.5, -0.5]], 0.0),
        HaarVariant::HH => (ndarray::array![[0.5, -0.5], [-0.5, 0.5]], PI / 4.0),
    };
    let idx = match variant {
        HaarVariant::LH => 0.0,
        HaarVariant::HL => 1.0,
        HaarVariant::HH => 2.0,
    };
    Kernel2D {
        values,
        family: KernelFamily::Haar,
        angle,
        scale: 1.0,
        meta: BTreeMap::from([("variant".to_string(), idx)]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub family: KernelFamily,
    pub k: usize,
    pub groups: Vec<Vec<Kernel2D>>,
}

impl KernelBank {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_scales(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }

    pub fn kernels(&self) -> impl Iterator<Item = &Kernel2D> {
        self.groups.iter().flatten()
    }
}

pub const DEFAULT_GROUPS: usize = 4;
pub const DEFAULT_KERNEL_SIZE: usize = 5;
pub const GABOR_GAMMA: f64 = 0.5;

pub fn default_angles() -> Vec<f64> {
    (0..DEFAULT_GROUPS).map(|i| i as f64 * PI / DEFAULT_GROUPS as f64).collect()
}

pub fn default_scales() -> Vec<f64> {
    vec![1.0, 2.0]
}

/// Frequencies assigned to successive Fourier groups.
fn fourier_frequencies(k: usize) -> Vec<(usize, usize)> {
    vec![(1, 0), (0, 1), (1, 1), (1, k - 1), (2, 0), (0, 2), (2, 2), (2, k - 2)]
}

/// Build an `N × S` bank with `N = angles.len()` and `S = scales.len()`.
///
/// * gabor: angle θ per group, σ per scale with λ = 2σ, γ = 0.5, ψ = 0.
/// * fourier: group `n` uses the `n`-th frequency of
///   (1,0), (0,1), (1,1), (1,k−1), …; the scales are the phases (cos, sin),
///   so at most two. The angle values themselves are not used.
/// * haar: the detail filters LH, HL, HH cycled over all `N·S` slots.
pub fn build_bank(family: KernelFamily, angles: &[f64], scales: &[f64], k: usize) -> Result<KernelBank> {
    const OP: &str = "build_bank";
    if angles.is_empty() || scales.is_empty() {
        return Err(Error::arg(OP, "angle and scale lists must be non-empty"));
    }
    let groups = match family {
        KernelFamily::Gabor => angles
            .iter()
            .map(|&theta| {
                scales
                    .iter()
                    .map(|&sigma| make_gabor_kernel(theta, sigma, 2.0 * sigma, GABOR_GAMMA, 0.0, k))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?,
        KernelFamily::Fourier => {
            let freqs = fourier_frequencies(k);
            if angles.len() > freqs.len() || scales.len() > 2 {
                return Err(Error::arg(
                    OP,
                    format!("fourier supports ≤ {} groups and ≤ 2 phases", freqs.len()),
                ));
            }
            if k < 3 {
                return Err(Error::arg(OP, "fourier kernels need k ≥ 3"));
            }
            freqs[..angles.len()]
                .iter()
                .map(|&(u, v)| {
                    [Phase::Cos, Phase::Sin][..scales.len()]
                        .iter()
                        .map(|&ph| make_fourier_kernel(u % k, v % k, ph, k))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
        }
        KernelFamily::Haar => {
            let cycle = [HaarVariant::LH, HaarVariant::HL, HaarVariant::HH];
            (0..angles.len())
                .map(|n| {
                    (0..scales.len())
                        .map(|s| make_haar_kernel(cycle[(n * scales.len() + s) % 3]))
                        .collect()
                })
                .collect()
        }
    };
    let k = match family {
        KernelFamily::Haar => 2,
        _ => k,
    };
    Ok(KernelBank { family, k, groups })
}

/// `n_groups` angles evenly covering [0, π) and scales 1, 2, …, `n_scales`.
pub fn bank_with(family: KernelFamily, n_groups: usize, n_scales: usize) -> Result<KernelBank> {
    let angles: Vec<f64> = (0..n_groups).map(|i| i as f64 * PI / n_groups as f64).collect();
    let scales: Vec<f64> = (1..=n_scales).map(|s| s as f64).collect();
    build_bank(family, &angles, &scales, DEFAULT_KERNEL_SIZE)
}

/// The bank used by default for a family: 4 groups × 2 scales, 5×5 kernels.
pub fn default_bank(family: KernelFamily) -> Result<KernelBank> {
    build_bank(family, &default_angles(), &default_scales(), DEFAULT_KERNEL_SIZE)
}

pub const GRID_SEPARATOR_PX: usize = 2;
pub const GRID_SEPARATOR_VALUE: u8 = 255;

/// Map kernel values to `0..=255` by min-max; a constant kernel maps to 128.
pub fn quantize_kernel(kernel: &Kernel2D) -> Array2<u8> {
    let min = kernel.values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = kernel.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    kernel.values.mapv(|v| {
        if range <= 0.0 {
            128
        } else {
            (255.0 * (v - min) / range + 0.5).floor().clamp(0.0, 255.0) as u8
        }
    })
}

/// Rows are groups (angles), columns are scales; cells are separated by
/// [`GRID_SEPARATOR_PX`] white pixels.
pub fn render_bank_grid(bank: &KernelBank, cell_px: usize) -> GrayImage {
    let rows = bank.n_groups();
    let cols = bank.n_scales();
    let sep = GRID_SEPARATOR_PX;
    let width = cols * cell_px + cols.saturating_sub(1) * sep;
    let height = rows * cell_px + rows.saturating_sub(1) * sep;
    let mut img = GrayImage::filled(width, height, GRID_SEPARATOR_VALUE);
    for (r, group) in bank.groups.iter().enumerate() {
        for (c, kernel) in group.iter().enumerate() {
            let q = quantize_kernel(kernel);
            let k = kernel.size();
            let (y0, x0) = (r * (cell_px + sep), c * (cell_px + sep));
            for py in 0..cell_px {
                for px in 0..cell_px {
                    img.set(x0 + px, y0 + py, q[[py * k / cell_px, px * k / cell_px]]);
                }
            }
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub family: KernelFamily,
    pub k: usize,
    pub n_groups: usize,
    pub n_scales: usize,
    pub angles: Vec<f64>,
    pub scales: Vec<f64>,
    pub cell_px: usize,
    pub width: usize,
    pub height: usize,
}

impl BankManifest {
    pub fn describe(bank: &KernelBank, cell_px: usize, img: &GrayImage) -> Self {
        Self {
            family: bank.family,
            k: bank.k,
            n_groups: bank.n_groups(),
            n_scales: bank.n_scales(),
            angles: bank.groups.iter().map(|g| g[0].angle).collect(),
            scales: bank.groups[0].iter().map(|k| k.scale).collect(),
            cell_px,
            width: img.width,
            height: img.height,
        }
    }
}
