use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use ndarray::{s, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::ExperimentConfig;
use super::optim::{cosine_lr, Adam};
use crate::density::{
    density_metrics, drfl, make_gt_density, query_recall, seed_queries, uniform_grid_anchors, DensityReport,
    ImageMetrics,
};
use crate::io::{read_json, write_bytes, write_json};
use crate::model::{density_plane, Extractor};
use crate::nn::{mix_seed, FeatureMap, Layer, Mode};
use crate::scenes::{dataset_hash, generate_split, load_split, split_range, DatasetManifest, Regime, SceneAnnotation, Split};
use crate::{Error, Result};

/// Images, annotations and target densities of one split.
pub struct SplitData {
    pub images: Array4<f32>,
    pub annotations: Vec<SceneAnnotation>,
    pub targets: Array3<f64>,
    pub first_index: u64,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn from_parts(
        images: Array4<f32>,
        annotations: Vec<SceneAnnotation>,
        first_index: u64,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let (rows, cols) = cfg.density.grid(images.shape()[3], images.shape()[2]);
        let mut targets = Array3::zeros((annotations.len(), rows, cols));
        for (i, ann) in annotations.iter().enumerate() {
            targets.index_axis_mut(Axis(0), i).assign(&make_gt_density(ann, &cfg.density)?);
        }
        Ok(Self { images, annotations, targets, first_index })
    }

    /// The first `n` items.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images.slice(s![..n, .., .., ..]).to_owned(),
            annotations: self.annotations[..n].to_vec(),
            targets: self.targets.slice(s![..n, .., ..]).to_owned(),
            first_index: self.first_index,
        }
    }

    pub fn regime(&self, cfg: &ExperimentConfig, i: usize) -> Regime {
        cfg.scenes.mix.regime(self.first_index + i as u64)
    }
}

pub struct Dataset {
    pub train: SplitData,
    pub val: SplitData,
    pub hash: String,
}

impl Dataset {
    /// Load from `cfg.data_dir` when set, otherwise generate in memory.
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.data_dir {
            Some(dir) => Self::load(cfg, dir),
            None => {
                let mk = |split| -> Result<SplitData> {
                    let (start, n) = split_range(split, cfg.n_train, cfg.n_val);
                    let (images, anns) = generate_split(&cfg.scenes, start, n);
                    SplitData::from_parts(images, anns, start, cfg)
                };
                Ok(Self {
                    train: mk(Split::Train)?,
                    val: mk(Split::Val)?,
                    hash: dataset_hash(&cfg.scenes, cfg.n_train, cfg.n_val),
                })
            }
        }
    }

    fn load(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        let mk = |split| -> Result<SplitData> {
            let (images, anns) = load_split(dir, &manifest, split)?;
            let first = match split {
                Split::Train => manifest.train.first_index,
                Split::Val => manifest.val.first_index,
            };
            SplitData::from_parts(images, anns, first, cfg)
        };
        Ok(Self { train: mk(Split::Train)?, val: mk(Split::Val)?, hash: manifest.dataset_hash })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_drfl: f64,
    pub val_drfl: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryRecall {
    pub k: usize,
    pub radius: f64,
    pub n_images: usize,
    pub n_objects: usize,
    /// Mean number of density-seeded anchors per image (≤ k).
    pub mean_density_anchors: f64,
    pub density_recall: f64,
    pub uniform_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub drfl: f64,
    pub density: DensityReport,
    /// Over every image of the split.
    pub query_all: QueryRecall,
    /// Over the dense-regime images only.
    pub query_dense: QueryRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub family: String,
    pub epochs: Vec<EpochRecord>,
    pub final_train: EvalReport,
    pub final_val: EvalReport,
    pub n_parameters: usize,
    pub config_hash: String,
    pub dataset_hash: String,
    pub checkpoint: PathBuf,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn final_val_drfl(&self) -> f64 {
        self.final_val.drfl
    }

    /// Per-epoch curve, one row per epoch.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,train_drfl,val_drfl,lr\n");
        for e in &self.epochs {
            writeln!(out, "{},{:.9e},{:.9e},{:.9e}", e.epoch, e.train_drfl, e.val_drfl, e.lr).expect("string write");
        }
        out
    }
}

fn batch_images(images: &Array4<f32>, idx: &[usize]) -> FeatureMap<f32> {
    images.select(Axis(0), idx)
}

fn batch_targets(targets: &Array3<f64>, idx: &[usize]) -> Array4<f64> {
    targets.select(Axis(0), idx).insert_axis(Axis(1))
}

/// Run the model over a split in eval mode, chunked by `batch`, and pass
/// each `(item index, density plane)` to `f`.
pub fn predict_split(
    model: &mut Extractor<f32>,
    data: &SplitData,
    batch: usize,
    mut f: impl FnMut(usize, ndarray::Array2<f64>) -> Result<()>,
) -> Result<()> {
    let n = data.len();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let pred = model.forward(&batch_images(&data.images, &idx), Mode::Eval)?;
        for (b, &i) in idx.iter().enumerate() {
            f(i, density_plane(&pred, b))?;
        }
        start += batch;
    }
    Ok(())
}

#[derive(Default)]
struct QueryAccum {
    images: usize,
    objects: usize,
    anchors: usize,
    density_hits: usize,
    uniform_hits: usize,
}

impl QueryAccum {
    fn finish(&self, cfg: &ExperimentConfig) -> QueryRecall {
        let r = |hits: usize| if self.objects == 0 { 0.0 } else { hits as f64 / self.objects as f64 };
        QueryRecall {
            k: cfg.query.k,
            radius: cfg.query.radius,
            n_images: self.images,
            n_objects: self.objects,
            mean_density_anchors: if self.images == 0 { 0.0 } else { self.anchors as f64 / self.images as f64 },
            density_recall: r(self.density_hits),
            uniform_recall: r(self.uniform_hits),
        }
    }
}

/// Density metrics, DRFL and query-seeding recall over one split.
pub fn evaluate_split(model: &mut Extractor<f32>, data: &SplitData, split: Split, cfg: &ExperimentConfig) -> Result<EvalReport> {
    let mut metrics: Vec<ImageMetrics> = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let (mut all, mut dense) = (QueryAccum::default(), QueryAccum::default());
    let width = data.images.shape()[3];
    let height = data.images.shape()[2];
    let grid = uniform_grid_anchors(width, height, cfg.query.k)?;
    predict_split(model, data, cfg.batch_size, |i, pred| {
        let gt = data.targets.index_axis(Axis(0), i);
        let ann = &data.annotations[i];
        loss_sum += drfl(pred.view(), gt, &cfg.drfl)?.0;
        metrics.push(density_metrics(pred.view(), gt, ann, cfg.query.radius, cfg.drfl.tau_pos)?);
        let anchors = seed_queries(pred.view(), &cfg.query)?;
        let (dh, n_obj) = query_recall(&anchors, ann, cfg.query.radius);
        let (uh, _) = query_recall(&grid, ann, cfg.query.radius);
        let add = |q: &mut QueryAccum| {
            q.images += 1;
            q.objects += n_obj;
            q.anchors += anchors.len();
            q.density_hits += dh;
            q.uniform_hits += uh;
        };
        add(&mut all);
        if data.regime(cfg, i) == Regime::Dense {
            add(&mut dense);
        }
        Ok(())
    })?;
    let n = data.len();
    Ok(EvalReport {
        split: split.name().to_string(),
        drfl: if n == 0 { 0.0 } else { loss_sum / n as f64 },
        density: DensityReport::aggregate(&metrics),
        query_all: all.finish(cfg),
        query_dense: dense.finish(cfg),
    })
}

/// Mean per-image DRFL over a split in eval mode.
pub fn split_drfl(model: &mut Extractor<f32>, data: &SplitData, cfg: &ExperimentConfig) -> Result<f64> {
    let mut sum = 0.0;
    predict_split(model, data, cfg.batch_size, |i, pred| {
        sum += drfl(pred.view(), data.targets.index_axis(Axis(0), i), &cfg.drfl)?.0;
        Ok(())
    })?;
    Ok(if data.is_empty() { 0.0 } else { sum / data.len() as f64 })
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Extractor<f32>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.f32";

/// Optimise stem + fusion + head on DRFL over `data.train`.
///
/// Batch order is a pure function of `(seed, epoch)`. Writes `loss.csv`,
/// `checkpoint.f32` (+ layout) after every epoch, and `report.json` into
/// `cfg.out_dir`.
pub fn train_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.out_dir.clone();
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut model = Extractor::<f32>::new(cfg.model(), cfg.seed)?;
    let n_parameters = model.n_trainable();
    let mut opt = Adam::<f32>::new(cfg.optimizer);
    let n = data.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    info!(
        "training {} (C={}, {} params) on {} images for {} epochs",
        cfg.family, cfg.channels, n_parameters, n, cfg.epochs
    );
    save_checkpoint(&mut model, 0, &ckpt)?;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut lr = cfg.optimizer.lr;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(&cfg.optimizer, step, total_steps);
            let x = batch_images(&data.train.images, idx);
            let gt = batch_targets(&data.train.targets, idx);
            model.zero_grad();
            let pred = model.forward(&x, Mode::Train)?;
            let pred64 = pred.mapv(f64::from);
            let (loss, grad) = drfl(pred64.view(), gt.view(), &cfg.drfl)?;
            if !loss.is_finite() {
                warn!("non-finite loss at epoch {epoch}, batch {bi}; keeping {}", ckpt.display());
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            model.backward(&grad.mapv(|g| g as f32))?;
            opt.step(&mut model, lr);
            loss_sum += loss;
            step += 1;
        }
        let train_drfl = loss_sum / per_epoch.max(1) as f64;
        let val_drfl = split_drfl(&mut model, &data.val, cfg)?;
        info!("epoch {epoch}/{}: train {train_drfl:.4e}, val {val_drfl:.4e}", cfg.epochs);
        epochs.push(EpochRecord { epoch, train_drfl, val_drfl, lr });
        save_checkpoint(&mut model, epoch, &ckpt)?;
    }
    let final_train = evaluate_split(&mut model, &data.train, Split::Train, cfg)?;
    let final_val = evaluate_split(&mut model, &data.val, Split::Val, cfg)?;
    let report = RunReport {
        family: cfg.family.to_string(),
        epochs,
        final_train,
        final_val,
        n_parameters,
        config_hash: cfg.hash(),
        dataset_hash: data.hash.clone(),
        checkpoint: ckpt,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    write_bytes(&out.join("loss.csv"), report.loss_csv().as_bytes())?;
    write_json(&out.join("report.json"), &report)?;
    Ok(TrainOutcome { report, model })
}

/// [`train_on`] with the dataset prepared from the config.
pub fn train(cfg: &ExperimentConfig) -> Result<RunReport> {
    let data = Dataset::prepare(cfg)?;
    Ok(train_on(cfg, &data)?.report)
}

/// Metrics of a stored checkpoint on one split; also written to
/// `<out_dir>/eval_<split>.json`.
pub fn evaluate(checkpoint: &Path, split: Split, cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut model = Extractor::<f32>::new(cfg.model(), cfg.seed)?;
    load_checkpoint(&mut model, checkpoint)?;
    let data = Dataset::prepare(cfg)?;
    let report = evaluate_split(&mut model, data.split(split), split, cfg)?;
    write_json(&cfg.out_dir.join(format!("eval_{}.json", split.name())), &report)?;
    Ok(report)
}
