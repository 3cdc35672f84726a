//! Deterministic synthetic aerial scenes with tiny objects, and the
//! annotation file format shared with externally produced data.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{read_raw_f32, write_json, write_raw_f32};
use crate::nn::mix_seed;
use crate::{Error, Result};

pub const OBJECT_CLASS: &str = "object";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: String,
}

impl ObjectBox {
    /// Geometric-mean side length.
    pub fn size(&self) -> f64 {
        (self.w * self.h).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub id: i64,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<SceneAnnotation>,
}

impl SceneAnnotation {
    /// First invariant violation, naming the object index and field.
    pub fn violation(&self) -> Option<String> {
        if self.width == 0 || self.height == 0 {
            return Some(format!("image size {}×{} must be positive", self.width, self.height));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let bad = |field: &str, v: f64, rule: &str| Some(format!("object {i}: {field}={v} {rule}"));
            if !(o.cx.is_finite() && o.cx >= 0.0 && o.cx < self.width as f64) {
                return bad("cx", o.cx, &format!("outside [0, {})", self.width));
            }
            if !(o.cy.is_finite() && o.cy >= 0.0 && o.cy < self.height as f64) {
                return bad("cy", o.cy, &format!("outside [0, {})", self.height));
            }
            if !(o.w.is_finite() && o.w > 0.0) {
                return bad("w", o.w, "must be positive");
            }
            if !(o.h.is_finite() && o.h > 0.0) {
                return bad("h", o.h, "must be positive");
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Sparse,
    Dense,
}

/// How regimes are assigned to image indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeMix {
    /// Even indices sparse, odd indices dense.
    Alternate,
    Sparse,
    Dense,
}

impl RegimeMix {
    pub fn regime(self, index: u64) -> Regime {
        match self {
            RegimeMix::Alternate if index % 2 == 0 => Regime::Sparse,
            RegimeMix::Alternate => Regime::Dense,
            RegimeMix::Sparse => Regime::Sparse,
            RegimeMix::Dense => Regime::Dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneGenConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub size_mean: f64,
    pub size_std: f64,
    pub size_min: f64,
    pub size_max: f64,
    /// Aspect ratio w/h is log-uniform in [aspect_min, 1/aspect_min].
    pub aspect_min: f64,
    pub sparse_count: [usize; 2],
    pub dense_count: [usize; 2],
    pub clusters: [usize; 2],
    pub cluster_spread: f64,
    pub coarse_cells: usize,
    pub coarse_amplitude: f64,
    pub fine_noise: f64,
    pub contrast: [f64; 2],
    /// Width of the soft edge, in px.
    pub edge_softness: f64,
    pub mix: RegimeMix,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 128,
            height: 128,
            size_mean: 12.7,
            size_std: 5.6,
            size_min: 3.0,
            size_max: 32.0,
            aspect_min: 0.6,
            sparse_count: [1, 10],
            dense_count: [30, 120],
            clusters: [1, 4],
            cluster_spread: 12.0,
            coarse_cells: 8,
            coarse_amplitude: 0.15,
            fine_noise: 0.03,
            contrast: [0.2, 0.5],
            edge_softness: 1.0,
            mix: RegimeMix::Alternate,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::arg("scene config", d));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_std >= 0.0) {
            return bad("object size range is invalid");
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= 1.0) {
            return bad("aspect_min must be in (0, 1]");
        }
        for (name, r) in [("sparse_count", self.sparse_count), ("dense_count", self.dense_count), ("clusters", self.clusters)] {
            if r[0] > r[1] {
                return bad(&format!("{name} range is reversed"));
            }
        }
        if self.clusters[0] == 0 {
            return bad("at least one cluster is needed");
        }
        if self.coarse_cells == 0 {
            return bad("coarse_cells must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Image `[3, H, W]` with values in [0, 1].
pub type SceneImage = Array3<f32>;

fn object_size(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let s = if cfg.size_std > 0.0 {
        Normal::new(cfg.size_mean, cfg.size_std).expect("valid normal").sample(rng)
    } else {
        cfg.size_mean
    }
    .clamp(cfg.size_min, cfg.size_max);
    let la = cfg.aspect_min.ln();
    let aspect = if la < 0.0 { rng.random_range(la..=-la).exp() } else { 1.0 };
    (s * aspect.sqrt(), s / aspect.sqrt())
}

fn uniform_center(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.random_range(0.0..cfg.width as f64), rng.random_range(0.0..cfg.height as f64))
}

fn centers(cfg: &SceneGenConfig, regime: Regime, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    match regime {
        Regime::Sparse => {
            let n = rng.random_range(cfg.sparse_count[0]..=cfg.sparse_count[1]);
            (0..n).map(|_| uniform_center(cfg, rng)).collect()
        }
        Regime::Dense => {
            let n = rng.random_range(cfg.dense_count[0]..=cfg.dense_count[1]);
            let k = rng.random_range(cfg.clusters[0]..=cfg.clusters[1]);
            let (w, h) = (cfg.width as f64, cfg.height as f64);
            let margin = cfg.cluster_spread.min(w / 4.0).min(h / 4.0);
            let hubs: Vec<(f64, f64)> = (0..k)
                .map(|_| (rng.random_range(margin..=w - margin), rng.random_range(margin..=h - margin)))
                .collect();
            let spread = Normal::new(0.0, cfg.cluster_spread.max(f64::MIN_POSITIVE)).expect("valid normal");
            (0..n)
                .map(|i| {
                    let (hx, hy) = hubs[i % k];
                    // Redraw until the center lands inside the image.
                    loop {
                        let (x, y) = (hx + spread.sample(rng), hy + spread.sample(rng));
                        if (0.0..w).contains(&x) && (0.0..h).contains(&y) {
                            break (x, y);
                        }
                    }
                })
                .collect()
        }
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn render_background(cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> SceneImage {
    let (w, h, g) = (cfg.width, cfg.height, cfg.coarse_cells);
    let mut img = SceneImage::zeros((3, h, w));
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let coarse: Vec<f64> = (0..g * g).map(|_| rng.random_range(-1.0..1.0) * cfg.coarse_amplitude).collect();
    let fine = Normal::new(0.0, cfg.fine_noise.max(f64::MIN_POSITIVE)).expect("valid normal");
    for c in 0..3 {
        for y in 0..h {
            let gy = y * g / h;
            for x in 0..w {
                let gx = x * g / w;
                let v = base[c] + coarse[gy * g + gx] + fine.sample(rng);
                img[[c, y, x]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

fn render_object(img: &mut SceneImage, o: &ObjectBox, color: [f64; 3], softness: f64) {
    let (_, h, w) = img.dim();
    let reach = 3.0 * softness;
    let x0 = (o.cx - o.w / 2.0 - reach).floor().max(0.0) as usize;
    let x1 = ((o.cx + o.w / 2.0 + reach).ceil() as usize).min(w);
    let y0 = (o.cy - o.h / 2.0 - reach).floor().max(0.0) as usize;
    let y1 = ((o.cy + o.h / 2.0 + reach).ceil() as usize).min(h);
    for y in y0..y1 {
        let dy = (y as f64 + 0.5 - o.cy).abs();
        let ay = logistic((o.h / 2.0 - dy) / softness);
        for x in x0..x1 {
            let dx = (x as f64 + 0.5 - o.cx).abs();
            let a = ay * logistic((o.w / 2.0 - dx) / softness);
            for (c, &col) in color.iter().enumerate() {
                let p = &mut img[[c, y, x]];
                *p = ((1.0 - a) * *p as f64 + a * col).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Scene `index` under `cfg`; a pure function of `(cfg, index)`.
pub fn generate_scene(cfg: &SceneGenConfig, index: u64) -> (SceneImage, SceneAnnotation) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index));
    let regime = cfg.mix.regime(index);
    let mut img = render_background(cfg, &mut rng);
    let mut objects = Vec::new();
    for (cx, cy) in centers(cfg, regime, &mut rng) {
        let (ow, oh) = object_size(cfg, &mut rng);
        let o = ObjectBox { cx, cy, w: ow, h: oh, class: OBJECT_CLASS.to_string() };
        let (ix, iy) = ((cx as usize).min(cfg.width - 1), (cy as usize).min(cfg.height - 1));
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let color: [f64; 3] = std::array::from_fn(|c| {
            let contrast = rng.random_range(cfg.contrast[0]..=cfg.contrast[1]);
            (img[[c, iy, ix]] as f64 + sign * contrast).clamp(0.0, 1.0)
        });
        render_object(&mut img, &o, color, cfg.edge_softness);
        objects.push(o);
    }
    let ann = SceneAnnotation { id: index as i64, width: cfg.width, height: cfg.height, objects };
    (img, ann)
}

/// Images of a contiguous index range, stacked as `[n, 3, H, W]`.
pub fn generate_split(cfg: &SceneGenConfig, start: u64, n: usize) -> (Array4<f32>, Vec<SceneAnnotation>) {
    let mut images = Array4::<f32>::zeros((n, 3, cfg.height, cfg.width));
    let mut anns = Vec::with_capacity(n);
    for (i, mut slot) in images.axis_iter_mut(Axis(0)).enumerate() {
        let (img, ann) = generate_scene(cfg, start + i as u64);
        slot.assign(&img);
        anns.push(ann);
    }
    (images, anns)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub count: usize,
    pub first_index: u64,
    pub images: String,
    pub annotations: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub config_hash: String,
    pub dataset_hash: String,
    pub train: SplitFiles,
    pub val: SplitFiles,
    pub config: SceneGenConfig,
}

/// Identifies the exact data a run sees: the generator config plus split sizes.
pub fn dataset_hash(cfg: &SceneGenConfig, n_train: usize, n_val: usize) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(format!("|train={n_train}|val={n_val}").as_bytes());
    hex(&h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Train scenes use indices `0..n_train`, validation scenes follow them.
pub fn split_range(split: Split, n_train: usize, n_val: usize) -> (u64, usize) {
    match split {
        Split::Train => (0, n_train),
        Split::Val => (n_train as u64, n_val),
    }
}

/// Write packed images (`<split>_images.f32` + sidecar), per-split annotation
/// JSON and `manifest.json` into `out_dir`.
pub fn write_dataset(cfg: &SceneGenConfig, n_train: usize, n_val: usize, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut files = Vec::new();
    for split in [Split::Train, Split::Val] {
        let (start, n) = split_range(split, n_train, n_val);
        let (images, anns) = generate_split(cfg, start, n);
        let img_name = format!("{}_images.f32", split.name());
        let ann_name = format!("{}_annotations.json", split.name());
        write_raw_f32(
            &out_dir.join(&img_name),
            images.as_slice().expect("standard layout"),
            images.shape(),
            1,
        )?;
        write_json(&out_dir.join(&ann_name), &AnnotationFile { images: anns })?;
        files.push(SplitFiles { count: n, first_index: start, images: img_name, annotations: ann_name });
    }
    let val = files.pop().expect("two splits");
    let train = files.pop().expect("two splits");
    let manifest = DatasetManifest {
        n_train,
        n_val,
        seed: cfg.seed,
        width: cfg.width,
        height: cfg.height,
        config_hash: cfg.hash(),
        dataset_hash: dataset_hash(cfg, n_train, n_val),
        train,
        val,
        config: cfg.clone(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Parse and validate an annotation file.
pub fn load_annotations(path: &Path) -> Result<Vec<SceneAnnotation>> {
    let file: AnnotationFile = crate::io::read_json(path)?;
    for ann in &file.images {
        if let Some(detail) = ann.violation() {
            return Err(Error::Annotation { image_id: ann.id, detail });
        }
    }
    Ok(file.images)
}

/// Load one split written by [`write_dataset`].
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<(Array4<f32>, Vec<SceneAnnotation>)> {
    let files = match split {
        Split::Train => &manifest.train,
        Split::Val => &manifest.val,
    };
    let img_path: PathBuf = dir.join(&files.images);
    let (values, side) = read_raw_f32(&img_path)?;
    let images = Array4::from_shape_vec(
        (files.count, 3, manifest.height, manifest.width),
        values,
    )
    .map_err(|e| Error::Format { path: img_path.clone(), detail: format!("{e}; sidecar shape {:?}", side.shape) })?;
    let anns = load_annotations(&dir.join(&files.annotations))?;
    if anns.len() != files.count {
        return Err(Error::Format {
            path: dir.join(&files.annotations),
            detail: format!("{} annotations for {} images", anns.len(), files.count),
        });
    }
    Ok((images, anns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let cfg = SceneGenConfig { seed: 3, ..Default::default() };
        let (a, aa) = generate_scene(&cfg, 17);
        let (b, bb) = generate_scene(&cfg, 17);
        assert_eq!(a, b);
        assert_eq!(aa, bb);
        let (c, _) = generate_scene(&cfg, 18);
        assert_ne!(a, c);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn regime_counts_and_bounds() {
        let cfg = SceneGenConfig::default();
        for i in 0..40 {
            let (_, ann) = generate_scene(&cfg, i);
            let n = ann.objects.len();
            if i % 2 == 0 {
                assert!((1..=10).contains(&n), "{n}");
            } else {
                assert!((30..=120).contains(&n), "{n}");
            }
            assert!(ann.violation().is_none());
            assert!(ann.objects.iter().all(|o| (3.0 - 1e-9..=32.0 + 1e-9).contains(&o.size())));
        }
    }

    #[test]
    fn violations_name_the_field() {
        let mut ann = SceneAnnotation {
            id: 4,
            width: 32,
            height: 32,
            objects: vec![ObjectBox { cx: 32.0, cy: 1.0, w: 2.0, h: 2.0, class: "object".into() }],
        };
        assert!(ann.violation().unwrap().contains("cx"));
        ann.objects[0].cx = 31.9;
        ann.objects[0].h = 0.0;
        assert!(ann.violation().unwrap().contains("h=0"));
        ann.objects.clear();
        assert!(ann.violation().is_none());
    }

    #[test]
    fn config_hash_tracks_fields() {
        let a = SceneGenConfig::default();
        let b = SceneGenConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), SceneGenConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
