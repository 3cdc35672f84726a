mod support {
    pub mod contracts;
}

use d3r_core::model::{Extractor, Family, ModelConfig};
use d3r_core::nn::{FeatureMap, Layer, Mode};
use ndarray::Array;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn shape_grid_holds() {
    let n = support::contracts::check_shape_grid().unwrap();
    assert!(n > 100);
}

fn model(family: Family, seed: u64) -> Extractor<f32> {
    let mut m = Extractor::new(ModelConfig { channels: 8, family, n_groups: 4, n_scales: 2 }, seed).unwrap();
    m.head.randomize_projection(&mut ChaCha8Rng::seed_from_u64(seed));
    m
}

#[test]
fn default_model_maps_128_to_64() {
    let mut m = Extractor::<f32>::new(ModelConfig::default(), 0).unwrap();
    let img = FeatureMap::from_elem((1, 3, 128, 128), 0.5f32);
    assert_eq!(m.forward(&img, Mode::Eval).unwrap().shape(), [1, 1, 64, 64]);
}

#[test]
fn sizes_off_the_stem_grid_report_padding() {
    let mut m = model(Family::Gabor, 0);
    let err = m.forward(&FeatureMap::zeros((1, 3, 30, 35)), Mode::Eval).unwrap_err().to_string();
    assert!(err.contains("pad by 2 rows and 5 columns"), "{err}");
    assert!(m.forward(&FeatureMap::zeros((1, 1, 32, 32)), Mode::Eval).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn density_is_nonnegative_and_deterministic(
        seed in any::<u64>(),
        fam in 0usize..4,
        hw in (3usize..7, 3usize..7),
        scale in 0.1f32..20.0,
    ) {
        let family = Family::ALL[fam];
        let (h, w) = (hw.0 * 8, hw.1 * 8);
        let mut rng_vals = seed;
        let img = Array::from_shape_fn((1, 3, h, w), |_| {
            rng_vals = rng_vals.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_vals >> 40) as f32 / (1u64 << 24) as f32 - 0.5) * scale
        });
        let mut a = model(family, seed);
        let mut b = model(family, seed);
        let da = a.forward(&img, Mode::Eval).unwrap();
        let db = b.forward(&img, Mode::Eval).unwrap();
        prop_assert!(da.iter().all(|&v| v >= 0.0));
        prop_assert_eq!(da.shape(), &[1, 1, h / 2, w / 2]);
        let bits = |d: &FeatureMap<f32>| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&da), bits(&db));
    }
}
