//! Pseudo segmentation masks.
//!
//! The main labeler tiles the image into exemplar-sized patches (one per
//! similarity-map cell), embeds each patch with a hand-crafted descriptor,
//! clusters the patch embeddings together with the mean exemplar embedding and
//! keeps the cells that share the exemplar's cluster. The cluster count is the
//! one whose mask yields the lowest counting loss against the ground truth.
//! Two ablation labelers build masks from dot-centred boxes or from a
//! thresholded similarity map.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::counter::{apply_mask, loss_count, scene_exemplars, CounterModel};
use crate::error::{Error, Result};
use crate::numerics::{minmax_normalize, similarity_grid_shape, squared_distance, FeatureVec, Grid2D, SeededRng, Volume3D};
use crate::scene::{build_gt_density, ExemplarBox, Scene};

pub const EMBEDDING_DIM: usize = 14;
const ORIENTATION_BINS: usize = 8;
pub const MAX_LLOYD_ITERATIONS: usize = 100;

/// Patch geometry: one patch per similarity-map cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub r: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_w: f64,
    pub patch_h: f64,
    /// `(x, y)` pixel centres in row-major cell order.
    pub centers: Vec<(f64, f64)>,
}

impl PatchGrid {
    pub fn new(image_h: usize, image_w: usize, r: usize, exemplars: &[ExemplarBox]) -> Result<Self> {
        if exemplars.is_empty() {
            return Err(Error::InvalidArgument("patch tiling needs at least one exemplar box".into()));
        }
        let (rows, cols) = similarity_grid_shape(image_h, image_w, r)?;
        let n = exemplars.len() as f64;
        let patch_w = exemplars.iter().map(|b| b.width()).sum::<f64>() / n;
        let patch_h = exemplars.iter().map(|b| b.height()).sum::<f64>() / n;
        let half = 0.5 * r as f64;
        let centers = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| ((j * r) as f64 + half, (i * r) as f64 + half)))
            .collect();
        Ok(Self {
            r,
            rows,
            cols,
            patch_w,
            patch_h,
            centers,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Integer patch size `(h, w)`, at least one pixel each way.
    pub fn pixel_size(&self) -> (usize, usize) {
        (
            (self.patch_h.round() as usize).max(1),
            (self.patch_w.round() as usize).max(1),
        )
    }
}

/// Cuts one exemplar-sized patch around every cell centre. Patches crossing
/// the border are filled by edge replication.
pub fn tile_patches(image: &Volume3D, exemplars: &[ExemplarBox], r: usize) -> Result<(PatchGrid, Vec<Volume3D>)> {
    let grid = PatchGrid::new(image.height(), image.width(), r, exemplars)?;
    let (ph, pw) = grid.pixel_size();
    let patches = grid
        .centers
        .iter()
        .map(|&(cx, cy)| {
            let top = (cy - ph as f64 / 2.0).round() as i64;
            let left = (cx - pw as f64 / 2.0).round() as i64;
            image.window_replicate(top, left, ph, pw)
        })
        .collect();
    Ok((grid, patches))
}

/// Colour moments plus a luminance gradient-orientation histogram, L2-normalised.
///
/// Layout: channel means (3), channel standard deviations (3), 8 orientation
/// bins weighted by gradient magnitude. A patch without gradients gets a
/// uniform histogram.
pub fn embed_patch(patch: &Volume3D) -> FeatureVec {
    let (h, w) = (patch.height(), patch.width());
    let area = (h * w) as f64;
    let mut out = Vec::with_capacity(EMBEDDING_DIM);
    let channels = patch.channels().min(3);
    let mut stds = Vec::with_capacity(3);
    for c in 0..3 {
        if c < channels {
            let plane = patch.plane(c);
            let mean = plane.iter().sum::<f64>() / area;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / area;
            out.push(mean);
            stds.push(var.sqrt());
        } else {
            out.push(0.0);
            stds.push(0.0);
        }
    }
    out.extend(stds);

    let lum: Vec<f64> = (0..h * w)
        .map(|i| {
            if channels == 3 {
                0.299 * patch.plane(0)[i] + 0.587 * patch.plane(1)[i] + 0.114 * patch.plane(2)[i]
            } else {
                patch.plane(0)[i]
            }
        })
        .collect();
    let at = |y: usize, x: usize| lum[y * w + x];
    let mut hist = [0.0; ORIENTATION_BINS];
    for y in 0..h {
        for x in 0..w {
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 0.0 {
                hist[octant(gx, gy)] += mag;
            }
        }
    }
    let total: f64 = hist.iter().sum();
    if total > 1e-12 {
        out.extend(hist.iter().map(|v| v / total));
    } else {
        out.extend([1.0 / ORIENTATION_BINS as f64; ORIENTATION_BINS]);
    }

    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    FeatureVec(out.into_iter().map(|v| v / norm).collect())
}

/// Index of the 45 degree sector holding the direction of `(gx, gy)`,
/// counter-clockwise from +x; a direction on a sector boundary belongs to
/// the sector it opens.
fn octant(gx: f64, gy: f64) -> usize {
    let (ax, ay) = (gx.abs(), gy.abs());
    if gx > 0.0 && gy >= 0.0 {
        usize::from(ay >= ax)
    } else if gx <= 0.0 && gy > 0.0 {
        2 + usize::from(ay <= ax)
    } else if gx < 0.0 && gy <= 0.0 {
        4 + usize::from(ay >= ax)
    } else {
        6 + usize::from(ay <= ax)
    }
}

/// Mean embedding of the exemplar crops, each resampled to the patch size.
pub fn exemplar_embedding(image: &Volume3D, exemplars: &[ExemplarBox], grid: &PatchGrid) -> Result<FeatureVec> {
    let (ph, pw) = grid.pixel_size();
    let embeddings: Vec<FeatureVec> = exemplars
        .iter()
        .map(|b| embed_patch(&image.resample_region(b.x0, b.y0, b.x1, b.y1, ph, pw)))
        .collect();
    FeatureVec::mean_of(&embeddings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub k: usize,
    pub centroids: Vec<FeatureVec>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn nearest(point: &[f64], centroids: &[FeatureVec]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c.as_slice());
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn kmeans_pp_seeds(points: &[FeatureVec], k: usize, rng: &mut SeededRng) -> Vec<FeatureVec> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p.as_slice(), centroids[0].as_slice()))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p.as_slice(), c.as_slice()));
        }
        centroids.push(c);
    }
    centroids
}

fn sse(points: &[FeatureVec], centroids: &[FeatureVec], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p.as_slice(), centroids[a].as_slice()))
        .sum()
}

/// Every empty cluster takes over the point farthest from its own centroid
/// among clusters that can spare one.
fn repair_empty(points: &[FeatureVec], centroids: &mut [FeatureVec], assignments: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        assignments.iter().for_each(|&a| sizes[a] += 1);
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            let d = squared_distance(p.as_slice(), centroids[assignments[i]].as_slice());
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("n >= k leaves a cluster with two members");
        assignments[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

fn update_centroids(points: &[FeatureVec], assignments: &[usize], k: usize) -> Vec<FeatureVec> {
    let dim = points[0].dim();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut sizes = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        sizes[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.as_slice()) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(sizes)
        .map(|(s, n)| FeatureVec(s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// stable or the iteration cap is hit. Distance ties go to the lowest
/// centroid index.
pub fn kmeans(points: &[FeatureVec], k: usize, rng: &mut SeededRng) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-means needs at least k = {k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].dim();
    if let Some(p) = points.iter().find(|p| p.dim() != dim) {
        return Err(Error::shape("kmeans", dim, p.dim()));
    }

    let mut centroids = kmeans_pp_seeds(points, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history: Vec<f64> = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p.as_slice(), &centroids).0).collect();
        repair_empty(points, &mut centroids, &mut next);
        let stable = next == assignments;
        assignments = next;
        centroids = update_centroids(points, &assignments, k);
        let inertia = sse(points, &centroids, &assignments);
        if let Some(&prev) = history.last() {
            assert!(
                inertia <= prev + 1e-9 * (1.0 + prev),
                "k-means inertia increased from {prev} to {inertia}"
            );
        }
        history.push(inertia);
        iterations += 1;
        if stable {
            break;
        }
    }
    Ok(ClusterResult {
        k,
        centroids,
        inertia: *history.last().expect("at least one iteration"),
        assignments,
        iterations,
        inertia_history: history,
    })
}

/// Lowest-inertia run out of `restarts` independently seeded runs.
pub fn kmeans_restarts(points: &[FeatureVec], k: usize, restarts: usize, rng: &mut SeededRng) -> Result<ClusterResult> {
    let mut best: Option<ClusterResult> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans(points, k, &mut rng.fork())?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Cells whose patch shares the exemplar embedding's cluster. The exemplar
/// point is the last entry of `assignments`.
pub fn mask_from_clusters(cr: &ClusterResult, rows: usize, cols: usize) -> Result<Grid2D> {
    if cr.assignments.len() != rows * cols + 1 {
        return Err(Error::shape("mask_from_clusters", rows * cols + 1, cr.assignments.len()));
    }
    let (cells, exemplar) = cr.assignments.split_at(rows * cols);
    let target = exemplar[0];
    let values: Vec<f64> = cells.iter().map(|&a| if a == target { 1.0 } else { 0.0 }).collect();
    if values.iter().all(|&v| v == 0.0) {
        warn!("exemplar embedding forms its own cluster (k = {}); mask is empty", cr.k);
    }
    Grid2D::from_vec(rows, cols, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Kmeans,
    Dotbox,
    Threshold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelResult {
    pub mask: Grid2D,
    pub k_star: Option<usize>,
    pub per_k_loss: BTreeMap<usize, f64>,
    pub strategy: Strategy,
}

/// Smallest key among those with the minimal loss.
pub fn argmin_k(per_k_loss: &BTreeMap<usize, f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&k, &loss) in per_k_loss {
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((k, loss));
        }
    }
    best.map(|(k, _)| k)
}

/// Settings shared by the pseudo-labelers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoCfg {
    pub k_min: usize,
    pub k_max: usize,
    pub sigma: f64,
    pub exemplar_size: usize,
    /// k-means runs per k; the lowest-inertia run is kept.
    pub restarts: usize,
}

/// Everything the per-k search reuses: features, similarity map, target
/// density and clustering points (patch embeddings followed by the exemplar
/// embedding).
pub struct SearchInputs {
    pub features: Volume3D,
    pub similarity: Grid2D,
    pub gt: Grid2D,
    pub points: Vec<FeatureVec>,
}

impl SearchInputs {
    pub fn prepare(model: &CounterModel, scene: &Scene, cfg: &PseudoCfg) -> Result<Self> {
        let features = model.extract_features(&scene.image)?;
        let vectors = model.exemplar_vectors(&scene_exemplars(scene, cfg.exemplar_size))?;
        let similarity = crate::counter::similarity_from_features(&features, &vectors)?;
        let gt = build_gt_density(scene, model.r(), cfg.sigma)?;
        let points = embedding_points(scene, model.r())?;
        Ok(Self {
            features,
            similarity,
            gt,
            points,
        })
    }

    /// Mask and counting loss for one cluster count.
    pub fn evaluate_k(&self, model: &CounterModel, k: usize, restarts: usize, rng: &mut SeededRng) -> Result<(Grid2D, f64)> {
        let cr = kmeans_restarts(&self.points, k, restarts, rng)?;
        let mask = mask_from_clusters(&cr, self.similarity.height(), self.similarity.width())?;
        let density = model.density_from_parts(&self.features, &apply_mask(&self.similarity, &mask)?)?;
        Ok((mask, loss_count(&density, &self.gt)?))
    }
}

/// Patch embeddings in cell order followed by the exemplar embedding.
pub fn embedding_points(scene: &Scene, r: usize) -> Result<Vec<FeatureVec>> {
    let (grid, patches) = tile_patches(&scene.image, &scene.exemplars, r)?;
    let mut points: Vec<FeatureVec> = patches.iter().map(embed_patch).collect();
    points.push(exemplar_embedding(&scene.image, &scene.exemplars, &grid)?);
    Ok(points)
}

/// Tries every k in `[k_min, k_max]` and keeps the mask with the lowest
/// counting loss; ties go to the smaller k.
pub fn optimal_k_mask(model: &CounterModel, scene: &Scene, cfg: &PseudoCfg, rng: &mut SeededRng) -> Result<PseudoLabelResult> {
    if cfg.k_min < 1 || cfg.k_min > cfg.k_max {
        return Err(Error::InvalidArgument(format!("bad k range [{}, {}]", cfg.k_min, cfg.k_max)));
    }
    let inputs = SearchInputs::prepare(model, scene, cfg)?;
    let mut per_k_loss = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for k in cfg.k_min..=cfg.k_max {
        let (mask, loss) = inputs.evaluate_k(model, k, cfg.restarts, rng)?;
        per_k_loss.insert(k, loss);
        masks.insert(k, mask);
    }
    let k_star = argmin_k(&per_k_loss).expect("non-empty k range");
    Ok(PseudoLabelResult {
        mask: masks.remove(&k_star).expect("mask recorded for every k"),
        k_star: Some(k_star),
        per_k_loss,
        strategy: Strategy::Kmeans,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxSize {
    Mean,
    Min,
    Max,
}

impl BoxSize {
    pub const ALL: [BoxSize; 3] = [BoxSize::Mean, BoxSize::Min, BoxSize::Max];

    pub fn as_str(&self) -> &'static str {
        match self {
            BoxSize::Mean => "mean",
            BoxSize::Min => "min",
            BoxSize::Max => "max",
        }
    }
}

/// Cells whose patch centre lies inside a box of the chosen exemplar size
/// centred on some target dot (boundary inclusive).
pub fn dotbox_mask(scene: &Scene, size: BoxSize, r: usize) -> Result<Grid2D> {
    let grid = PatchGrid::new(scene.height(), scene.width(), r, &scene.exemplars)?;
    let widths = scene.exemplars.iter().map(|b| b.width());
    let heights = scene.exemplars.iter().map(|b| b.height());
    let pick = |it: &mut dyn Iterator<Item = f64>| -> f64 {
        match size {
            BoxSize::Mean => {
                let v: Vec<f64> = it.collect();
                v.iter().sum::<f64>() / v.len() as f64
            }
            BoxSize::Min => it.fold(f64::INFINITY, f64::min),
            BoxSize::Max => it.fold(f64::NEG_INFINITY, f64::max),
        }
    };
    let half_w = pick(&mut widths.into_iter()) / 2.0;
    let half_h = pick(&mut heights.into_iter()) / 2.0;
    let dots: Vec<_> = scene.target_dots().collect();
    let values = grid
        .centers
        .iter()
        .map(|&(cx, cy)| {
            let inside = dots.iter().any(|d| (cx - d.x).abs() <= half_w && (cy - d.y).abs() <= half_h);
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Grid2D::from_vec(grid.rows, grid.cols, values)
}

/// `minmax_normalize(map) >= tau`.
pub fn threshold_grid(map: &Grid2D, tau: f64) -> Grid2D {
    minmax_normalize(map).map(|v| if v >= tau { 1.0 } else { 0.0 })
}

/// Thresholds the min-max normalised similarity map of the scene.
pub fn threshold_mask(model: &CounterModel, scene: &Scene, tau: f64, exemplar_size: usize) -> Result<Grid2D> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    let sim = model.similarity_map(&scene.image, &scene_exemplars(scene, exemplar_size))?;
    Ok(threshold_grid(&sim, tau))
}

pub const PSEUDO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskBits {
    pub h: usize,
    pub w: usize,
    /// Row-major `0`/`1` characters.
    pub bits: String,
}

impl MaskBits {
    pub fn encode(mask: &Grid2D) -> Self {
        Self {
            h: mask.height(),
            w: mask.width(),
            bits: mask.values().iter().map(|&v| if v >= 0.5 { '1' } else { '0' }).collect(),
        }
    }

    pub fn decode(&self, file: &str) -> Result<Grid2D> {
        if self.bits.len() != self.h * self.w {
            return Err(Error::parse(
                file,
                "mask.bits",
                0,
                format!("expected {} bits, found {}", self.h * self.w, self.bits.len()),
            ));
        }
        let values = self
            .bits
            .bytes()
            .enumerate()
            .map(|(i, b)| match b {
                b'0' => Ok(0.0),
                b'1' => Ok(1.0),
                _ => Err(Error::parse(file, "mask.bits", i, format!("invalid bit {:?}", b as char))),
            })
            .collect::<Result<Vec<f64>>>()?;
        Grid2D::from_vec(self.h, self.w, values)
    }
}

/// On-disk record of one pseudo-labeling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelFile {
    pub version: u32,
    pub scene_id: String,
    pub strategy: Strategy,
    pub k_star: Option<usize>,
    pub per_k_loss: BTreeMap<usize, f64>,
    pub mask: MaskBits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl PseudoLabelFile {
    pub fn new(scene_id: &str, result: &PseudoLabelResult, fingerprint: Option<String>) -> Self {
        Self {
            version: PSEUDO_VERSION,
            scene_id: scene_id.to_string(),
            strategy: result.strategy,
            k_star: result.k_star,
            per_k_loss: result.per_k_loss.clone(),
            mask: MaskBits::encode(&result.mask),
            fingerprint,
        }
    }

    pub fn result(&self, file: &str) -> Result<PseudoLabelResult> {
        Ok(PseudoLabelResult {
            mask: self.mask.decode(file)?,
            k_star: self.k_star,
            per_k_loss: self.per_k_loss.clone(),
            strategy: self.strategy,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).expect("pseudo label serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = path.display().to_string();
        let parsed: Self = crate::scene::parse_json(&text, &file)?;
        if parsed.version != PSEUDO_VERSION {
            return Err(Error::parse(file, "version", 0, format!("unsupported version {}", parsed.version)));
        }
        parsed.mask.decode(&file)?;
        Ok(parsed)
    }
}
