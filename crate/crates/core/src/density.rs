//! Density targets, the recall-weighted focal regression loss, density
//! metrics and peak-based query seeding.
//!
//! Density cell `(i, j)` (row, column) covers image pixels
//! `[2i, 2i+2) × [2j, 2j+2)`; its center is image point `(2j+1, 2i+1)`.

use std::cmp::Ordering;

use ndarray::{Array, Array2, ArrayView, ArrayView2, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::model::DENSITY_STRIDE;
use crate::scenes::SceneAnnotation;
use crate::{Error, Result};

/// Single-image density map `[rows, cols]`.
pub type DensityMap = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SigmaPolicy {
    /// Fixed width in density cells.
    Fixed { sigma: f64 },
    /// `max(min, diagonal / divisor)` with the box diagonal in density cells.
    Diagonal { divisor: f64, min: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtDensitySpec {
    pub stride: usize,
    pub sigma: SigmaPolicy,
    /// Kernel support radius in units of sigma.
    pub truncate: f64,
}

impl Default for GtDensitySpec {
    fn default() -> Self {
        Self { stride: DENSITY_STRIDE, sigma: SigmaPolicy::Fixed { sigma: 2.0 }, truncate: 3.0 }
    }
}

impl GtDensitySpec {
    pub fn grid(&self, width: usize, height: usize) -> (usize, usize) {
        (height.div_ceil(self.stride), width.div_ceil(self.stride))
    }

    fn sigma_for(&self, w: f64, h: f64) -> f64 {
        match self.sigma {
            SigmaPolicy::Fixed { sigma } => sigma,
            SigmaPolicy::Diagonal { divisor, min } => {
                let diag = (w * w + h * h).sqrt() / self.stride as f64;
                (diag / divisor).max(min)
            }
        }
    }
}

/// Image coordinates of the center of cell `(row, col)`.
pub fn cell_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
}

/// Sum of unit-mass truncated Gaussians, one per annotated object.
pub fn make_gt_density(ann: &SceneAnnotation, spec: &GtDensitySpec) -> Result<DensityMap> {
    if spec.stride == 0 || spec.truncate <= 0.0 {
        return Err(Error::arg("make_gt_density", "stride and truncate must be positive"));
    }
    let (rows, cols) = spec.grid(ann.width, ann.height);
    let mut map = DensityMap::zeros((rows, cols));
    let s = spec.stride as f64;
    for (idx, o) in ann.objects.iter().enumerate() {
        let inside = o.cx >= 0.0 && o.cy >= 0.0 && o.cx < ann.width as f64 && o.cy < ann.height as f64;
        if !inside {
            return Err(Error::Annotation {
                image_id: ann.id,
                detail: format!("object {idx} center ({}, {}) lies outside {}×{}", o.cx, o.cy, ann.width, ann.height),
            });
        }
        let sigma = spec.sigma_for(o.w, o.h);
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::arg("make_gt_density", format!("object {idx}: sigma {sigma} is not positive")));
        }
        // Continuous cell coordinates of the center.
        let (u, v) = (o.cx / s - 0.5, o.cy / s - 0.5);
        let reach = spec.truncate * sigma;
        let r0 = (v - reach).ceil().max(0.0) as usize;
        let r1 = ((v + reach).floor().max(-1.0) as isize + 1).clamp(0, rows as isize) as usize;
        let c0 = (u - reach).ceil().max(0.0) as usize;
        let c1 = ((u + reach).floor().max(-1.0) as isize + 1).clamp(0, cols as isize) as usize;
        let mut cells = Vec::with_capacity((r1 - r0) * (c1 - c0));
        let mut mass = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                let d2 = (j as f64 - u).powi(2) + (i as f64 - v).powi(2);
                if d2 <= reach * reach {
                    let g = (-d2 / (2.0 * sigma * sigma)).exp();
                    mass += g;
                    cells.push((i, j, g));
                }
            }
        }
        if mass <= 0.0 {
            // Support smaller than a cell: put the unit mass on the nearest cell.
            let i = (v.round().max(0.0) as usize).min(rows - 1);
            let j = (u.round().max(0.0) as usize).min(cols - 1);
            map[[i, j]] += 1.0;
            continue;
        }
        for (i, j, g) in cells {
            map[[i, j]] += g / mass;
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrflConfig {
    pub beta: f64,
    pub gamma: f64,
    pub tau_pos: f64,
}

impl Default for DrflConfig {
    fn default() -> Self {
        Self { beta: 4.0, gamma: 1.0, tau_pos: 0.01 }
    }
}

impl DrflConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.gamma >= 0.0 && self.tau_pos > 0.0) {
            return Err(Error::arg(
                "drfl",
                format!("need beta ≥ 0, gamma ≥ 0, tau_pos > 0; got {self:?}"),
            ));
        }
        Ok(())
    }
}

/// Recall-weighted focal regression:
/// `mean(w·|pred − gt|^(2+γ))` with `w = 1 + β` where the target is occupied
/// (`gt > τ_pos`) and under-predicted, `w = 1` elsewhere.
///
/// Returns the loss and its gradient with respect to `pred`.
pub fn drfl<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    gt: ArrayView<'_, f64, D>,
    cfg: &DrflConfig,
) -> Result<(f64, Array<f64, D>)> {
    cfg.validate()?;
    if pred.shape() != gt.shape() {
        return Err(Error::shape("drfl", format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape())));
    }
    let n = pred.len().max(1) as f64;
    let p = 2.0 + cfg.gamma;
    let mut total = 0.0;
    let mut grad = Array::<f64, D>::zeros(pred.raw_dim());
    Zip::from(&mut grad).and(&pred).and(&gt).for_each(|g, &y, &t| {
        let e = y - t;
        let w = if t > cfg.tau_pos && y < t { 1.0 + cfg.beta } else { 1.0 };
        let a = e.abs();
        total += w * a.powf(p);
        if e != 0.0 {
            *g = w * p * a.powf(p - 1.0) * e.signum() / n;
        }
    });
    Ok((total / n, grad))
}

/// Strict 3×3 local maxima above `threshold`, as `(row, col)` in
/// value-then-row-major order. Equal neighbours are resolved by position:
/// the earlier cell in row-major order wins.
pub fn local_peaks(map: ArrayView2<f64>, threshold: f64) -> Vec<(usize, usize)> {
    let (rows, cols) = map.dim();
    let beats = |a: (usize, usize), b: (usize, usize)| {
        let (va, vb) = (map[a], map[b]);
        va > vb || (va == vb && a < b)
    };
    let mut peaks = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            if !(map[[i, j]] > threshold) {
                continue;
            }
            let mut is_peak = true;
            'nb: for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= rows as isize || nj >= cols as isize {
                        continue;
                    }
                    if !beats((i, j), (ni as usize, nj as usize)) {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push((i, j));
            }
        }
    }
    sort_by_value(map, &mut peaks);
    peaks
}

fn sort_by_value(map: ArrayView2<f64>, cells: &mut [(usize, usize)]) {
    cells.sort_by(|&a, &b| map[b].partial_cmp(&map[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn dist(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Greedy one-to-one matching: each proposal in order takes the nearest
/// still-unmatched target within `radius` (ties to the lower target index).
/// Returns the number of matches.
pub fn greedy_match(proposals: &[Point], targets: &[Point], radius: f64) -> usize {
    let mut used = vec![false; targets.len()];
    let mut matched = 0;
    for p in proposals {
        let best = targets
            .iter()
            .enumerate()
            .filter(|(t, q)| !used[*t] && p.dist(q) <= radius)
            .min_by(|(ia, a), (ib, b)| p.dist(a).total_cmp(&p.dist(b)).then(ia.cmp(ib)));
        if let Some((t, _)) = best {
            used[t] = true;
            matched += 1;
        }
    }
    matched
}

pub fn object_centers(ann: &SceneAnnotation) -> Vec<Point> {
    ann.objects.iter().map(|o| Point { x: o.cx, y: o.cy }).collect()
}

fn to_points(cells: &[(usize, usize)], stride: usize) -> Vec<Point> {
    cells
        .iter()
        .map(|&(i, j)| {
            let (x, y) = cell_center(i, j, stride);
            Point { x, y }
        })
        .collect()
}

/// Per-image density quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mae: f64,
    pub count_error: f64,
    pub matched: usize,
    pub n_objects: usize,
    pub n_peaks: usize,
}

impl ImageMetrics {
    pub fn peak_recall(&self) -> f64 {
        ratio(self.matched, self.n_objects, 1.0)
    }

    pub fn peak_precision(&self) -> f64 {
        ratio(self.matched, self.n_peaks, if self.n_objects == 0 { 1.0 } else { 0.0 })
    }
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// mae, count error and greedy peak-to-center matching for one image.
/// Peaks are strict local maxima above `tau`, matched within `radius` px.
pub fn density_metrics(
    pred: ArrayView2<f64>,
    gt: ArrayView2<f64>,
    ann: &SceneAnnotation,
    radius: f64,
    tau: f64,
) -> Result<ImageMetrics> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape("density_metrics", format!("pred {:?} vs gt {:?}", pred.dim(), gt.dim())));
    }
    let n = pred.len().max(1) as f64;
    let mae = Zip::from(&pred).and(&gt).fold(0.0, |a, &p, &g| a + (p - g).abs()) / n;
    let count_error = (pred.sum() - ann.objects.len() as f64).abs();
    let peaks = to_points(&local_peaks(pred, tau), DENSITY_STRIDE);
    let matched = greedy_match(&peaks, &object_centers(ann), radius);
    Ok(ImageMetrics { mae, count_error, matched, n_objects: ann.objects.len(), n_peaks: peaks.len() })
}

/// Aggregate over images: mae and count error are per-image means; recall
/// and precision pool the match counts. Key names are stable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub mae: f64,
    pub count_error: f64,
    pub peak_recall: f64,
    pub peak_precision: f64,
    pub n_images: usize,
}

impl DensityReport {
    pub fn aggregate(items: &[ImageMetrics]) -> Self {
        let n = items.len();
        let mean = |f: fn(&ImageMetrics) -> f64| if n == 0 { 0.0 } else { items.iter().map(f).sum::<f64>() / n as f64 };
        let matched: usize = items.iter().map(|m| m.matched).sum();
        let objects: usize = items.iter().map(|m| m.n_objects).sum();
        let peaks: usize = items.iter().map(|m| m.n_peaks).sum();
        Self {
            mae: mean(|m| m.mae),
            count_error: mean(|m| m.count_error),
            peak_recall: ratio(matched, objects, 1.0),
            peak_precision: ratio(matched, peaks, if objects == 0 { 1.0 } else { 0.0 }),
            n_images: n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuerySeedConfig {
    /// Query budget.
    pub k: usize,
    /// Minimum spacing between accepted anchors, in density cells.
    pub d_min: f64,
    /// Match radius, in image px.
    pub radius: f64,
}

impl Default for QuerySeedConfig {
    fn default() -> Self {
        Self { k: 120, d_min: 2.0, radius: 4.0 }
    }
}

impl QuerySeedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.d_min >= 0.0) || !(self.radius > 0.0) {
            return Err(Error::arg("query seeding", format!("need k ≥ 1, d_min ≥ 0, r > 0; got {self:?}")));
        }
        Ok(())
    }
}

/// Positive local maxima, strongest first, greedily thinned so accepted
/// anchors are at least `d_min` cells apart, truncated to `k`, in image px.
pub fn seed_queries(pred: ArrayView2<f64>, cfg: &QuerySeedConfig) -> Result<Vec<Point>> {
    cfg.validate()?;
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for c in local_peaks(pred, 0.0) {
        if accepted.len() == cfg.k {
            break;
        }
        let far = accepted.iter().all(|a| {
            let d2 = (a.0 as f64 - c.0 as f64).powi(2) + (a.1 as f64 - c.1 as f64).powi(2);
            d2 >= cfg.d_min * cfg.d_min
        });
        if far {
            accepted.push(c);
        }
    }
    Ok(to_points(&accepted, DENSITY_STRIDE))
}

/// `⌈√k⌉ × ⌈√k⌉` grid of cell centers over the image, first `k` in row-major order.
pub fn uniform_grid_anchors(width: usize, height: usize, k: usize) -> Result<Vec<Point>> {
    if k == 0 {
        return Err(Error::arg("uniform_grid_anchors", "k must be at least 1"));
    }
    let g = (1..=k).find(|g| g * g >= k).expect("k itself qualifies");
    let (cw, ch) = (width as f64 / g as f64, height as f64 / g as f64);
    Ok((0..g)
        .flat_map(|r| (0..g).map(move |c| Point { x: (c as f64 + 0.5) * cw, y: (r as f64 + 0.5) * ch }))
        .take(k)
        .collect())
}

/// Fraction of object centers matched one-to-one by an anchor within `radius`.
pub fn query_recall(anchors: &[Point], ann: &SceneAnnotation, radius: f64) -> (usize, usize) {
    let centers = object_centers(ann);
    (greedy_match(anchors, &centers, radius), centers.len())
}
