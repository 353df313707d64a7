//! The exemplar-conditioned base counting model.
//!
//! A feature extractor turns the image and every exemplar crop into feature
//! volumes. Pooled exemplar features are correlated with the image features
//! to form a similarity map, which is stacked onto the image features and fed
//! to a small convolutional counter that regresses a non-negative density
//! map. The count is the density mass.

use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{
    extractor_stack, sigmoid, softplus, ConvSpec, ConvStack, ModelFile, Optimizer, ParamSet, TrainCfg, MODEL_VERSION,
};
use crate::numerics::{global_average_pool, FeatureVec, Grid2D, SeededRng, Volume3D};
use crate::scene::{build_gt_density, ExemplarBox, Region, Scene};

pub const COUNTER_KIND: &str = "counter";
pub const DEFAULT_EXEMPLAR_SIZE: usize = 32;

/// The head regresses `DENSITY_SCALE x density`; readout divides it back out.
/// Keeps the softplus unit away from its flat region for sub-0.1 densities.
pub const DENSITY_SCALE: f64 = 100.0;

/// An exemplar crop resampled to a fixed square size.
#[derive(Debug, Clone, PartialEq)]
pub struct Exemplar {
    pub crop: Volume3D,
}

impl Exemplar {
    pub fn from_box(image: &Volume3D, b: &ExemplarBox, size: usize) -> Self {
        Self {
            crop: image.resample_region(b.x0, b.y0, b.x1, b.y1, size, size),
        }
    }
}

pub fn scene_exemplars(scene: &Scene, size: usize) -> Vec<Exemplar> {
    scene
        .exemplars
        .iter()
        .map(|b| Exemplar::from_box(&scene.image, b, size))
        .collect()
}

/// One training example with its density target precomputed.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: Volume3D,
    pub exemplars: Vec<Exemplar>,
    pub target: Grid2D,
    /// Optional binary mask applied to the similarity map.
    pub mask: Option<Grid2D>,
}

impl TrainSample {
    pub fn from_scene(id: impl Into<String>, scene: &Scene, r: usize, sigma: f64, exemplar_size: usize) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            image: scene.image.clone(),
            exemplars: scene_exemplars(scene, exemplar_size),
            target: build_gt_density(scene, r, sigma)?,
            mask: None,
        })
    }

    /// Copy whose similarity map is masked by `mask`, regressed onto `target`.
    pub fn masked(&self, id: impl Into<String>, mask: Grid2D, target: Grid2D) -> Result<Self> {
        self.target.ensure_same_shape(&mask, "TrainSample::masked")?;
        self.target.ensure_same_shape(&target, "TrainSample::masked")?;
        if !mask.is_binary() {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            id: id.into(),
            image: self.image.clone(),
            exemplars: self.exemplars.clone(),
            target,
            mask: Some(mask),
        })
    }
}

/// Binary mask keeping the columns `< seam` (left) or `>= seam` (right).
pub fn column_mask(height: usize, width: usize, seam: usize, keep: Region) -> Grid2D {
    let mut m = Grid2D::zeros(height, width);
    for row in 0..height {
        for col in 0..width {
            if (col < seam) == (keep == Region::Left) {
                m.set(row, col, 1.0);
            }
        }
    }
    m
}

fn dot_cell(x: f64, y: f64, r: usize, shape: (usize, usize)) -> (usize, usize) {
    let row = ((y / r as f64).floor() as usize).min(shape.0 - 1);
    let col = ((x / r as f64).floor() as usize).min(shape.1 - 1);
    (row, col)
}

/// Ground-truth density of the target dots whose cell survives `mask`.
pub fn kept_dot_density(scene: &Scene, mask: &Grid2D, r: usize, sigma: f64) -> Result<Grid2D> {
    let full = build_gt_density(scene, r, sigma)?;
    full.ensure_same_shape(mask, "kept_dot_density")?;
    let mut kept = scene.clone();
    kept.dots.retain(|d| {
        let (row, col) = dot_cell(d.x, d.y, r, mask.shape());
        d.class_id != scene.target_class || mask.get(row, col) == 1.0
    });
    build_gt_density(&kept, r, sigma)
}

/// Cells whose centre lies within `scale` times the mean exemplar half-size
/// of a kept target dot. `keep` runs over `scene.target_dots()`.
pub fn object_mask(scene: &Scene, keep: &[bool], scale: f64, r: usize) -> Result<Grid2D> {
    let dots: Vec<_> = scene.target_dots().collect();
    if keep.len() != dots.len() {
        return Err(Error::shape("object_mask", dots.len(), keep.len()));
    }
    if scene.exemplars.is_empty() {
        return Err(Error::InvalidArgument("scene has no exemplars".into()));
    }
    let n = scene.exemplars.len() as f64;
    let half_w = scale * scene.exemplars.iter().map(ExemplarBox::width).sum::<f64>() / n / 2.0;
    let half_h = scale * scene.exemplars.iter().map(ExemplarBox::height).sum::<f64>() / n / 2.0;
    let (h, w) = (scene.height() / r, scene.width() / r);
    let mut m = Grid2D::zeros(h, w);
    for row in 0..h {
        let cy = (row as f64 + 0.5) * r as f64;
        for col in 0..w {
            let cx = (col as f64 + 0.5) * r as f64;
            let hit = dots
                .iter()
                .zip(keep)
                .any(|(d, &k)| k && (cx - d.x).abs() <= half_w && (cy - d.y).abs() <= half_h);
            if hit {
                m.set(row, col, 1.0);
            }
        }
    }
    Ok(m)
}

/// The unmasked sample plus two masked copies: a random column split and a
/// random subset of objects. Masked targets only count dots on kept cells.
pub fn augmented_samples(
    id: &str,
    scene: &Scene,
    r: usize,
    sigma: f64,
    exemplar_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<TrainSample>> {
    let base = TrainSample::from_scene(id, scene, r, sigma, exemplar_size)?;
    let (h, w) = base.target.shape();
    let seam = rng.gen_range(w / 4..=w - w / 4);
    let keep = if rng.gen_bool(0.5) { Region::Left } else { Region::Right };
    let columns = column_mask(h, w, seam, keep);
    let column_target = kept_dot_density(scene, &columns, r, sigma)?;
    let kept: Vec<bool> = scene.target_dots().map(|_| rng.gen_bool(0.5)).collect();
    let objects = object_mask(scene, &kept, rng.gen_range(0.75..1.5), r)?;
    let object_target = kept_dot_density(scene, &objects, r, sigma)?;
    Ok(vec![
        base.masked(format!("{id}/columns"), columns, column_target)?,
        base.masked(format!("{id}/objects"), objects, object_target)?,
        base,
    ])
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Sets every unmasked cell to the map minimum.
pub fn apply_mask(s: &Grid2D, m: &Grid2D) -> Result<Grid2D> {
    s.ensure_same_shape(m, "apply_mask")?;
    if !m.is_binary() {
        return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
    }
    let floor = s.min();
    let values = s
        .values()
        .iter()
        .zip(m.values())
        .map(|(&v, &keep)| if keep == 1.0 { v } else { floor })
        .collect();
    Grid2D::from_vec(s.height(), s.width(), values)
}

pub fn count(d: &Grid2D) -> f64 {
    d.sum()
}

/// Sum-of-squares L2 loss.
pub fn loss_count(pred: &Grid2D, gt: &Grid2D) -> Result<f64> {
    pred.ensure_same_shape(gt, "loss_count")?;
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(p, g)| (p - g) * (p - g))
        .sum())
}

/// `S[i,j] = w_(i,j) . b_k`, averaged over the exemplar vectors.
pub fn similarity_from_features(features: &Volume3D, vectors: &[FeatureVec]) -> Result<Grid2D> {
    if vectors.is_empty() {
        return Err(Error::InvalidArgument("at least one exemplar is required".into()));
    }
    let (d, h, w) = (features.channels(), features.height(), features.width());
    let mut acc = vec![0.0; h * w];
    for b in vectors {
        if b.dim() != d {
            return Err(Error::shape("similarity_from_features", d, b.dim()));
        }
        let mut map = vec![0.0; h * w];
        for (c, bc) in b.as_slice().iter().enumerate() {
            for (m, f) in map.iter_mut().zip(features.plane(c)) {
                *m += f * bc;
            }
        }
        acc.iter_mut().zip(&map).for_each(|(a, m)| *a += m);
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(Grid2D::from_raw(h, w, acc))
}

fn stack_similarity(features: &Volume3D, sim: &Grid2D) -> Volume3D {
    let d = features.channels();
    let mut values = Vec::with_capacity((d + 1) * features.plane_len());
    values.extend_from_slice(features.values());
    values.extend_from_slice(sim.values());
    Volume3D::from_raw(d + 1, features.height(), features.width(), values)
}

fn counter_stack(d: usize) -> ConvStack {
    let conv = |name: &str, in_ch, out_ch, kernel, relu| ConvSpec {
        name: name.to_string(),
        in_ch,
        out_ch,
        kernel,
        stride: 1,
        relu,
    };
    ConvStack {
        layers: vec![
            conv("counter.conv0", d + 1, 16, 3, true),
            conv("counter.conv1", 16, 8, 3, true),
            conv("counter.conv2", 8, 1, 1, false),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterModel {
    r: usize,
    d: usize,
    extractor: ConvStack,
    counter: ConvStack,
    pub params: ParamSet,
    pub history: Vec<f64>,
    pub learning_rate: f64,
}

impl CounterModel {
    pub fn new(r: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        let extractor = extractor_stack("extractor", r, d)?;
        let counter = counter_stack(d);
        let mut params = ParamSet::default();
        extractor.init_params(&mut params, rng);
        counter.init_params(&mut params, rng);
        Ok(Self {
            r,
            d,
            extractor,
            counter,
            params,
            history: Vec::new(),
            learning_rate: 0.0,
        })
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    pub fn extract_features(&self, image: &Volume3D) -> Result<Volume3D> {
        if image.height() < self.r || image.width() < self.r {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} smaller than downsampling ratio {}",
                image.height(),
                image.width(),
                self.r
            )));
        }
        if image.channels() != 3 {
            return Err(Error::shape("extract_features", 3, image.channels()));
        }
        Ok(self.extractor.forward(&self.params, image))
    }

    /// Pooled feature vector of every exemplar, in input order.
    pub fn exemplar_vectors(&self, ex: &[Exemplar]) -> Result<Vec<FeatureVec>> {
        if ex.is_empty() {
            return Err(Error::InvalidArgument("at least one exemplar is required".into()));
        }
        ex.iter()
            .map(|e| Ok(global_average_pool(&self.extract_features(&e.crop)?)))
            .collect()
    }

    pub fn similarity_map(&self, image: &Volume3D, ex: &[Exemplar]) -> Result<Grid2D> {
        let vectors = self.exemplar_vectors(ex)?;
        similarity_from_features(&self.extract_features(image)?, &vectors)
    }

    /// Runs the counter head on precomputed image features and a (possibly
    /// masked) similarity map.
    pub fn density_from_parts(&self, features: &Volume3D, sim: &Grid2D) -> Result<Grid2D> {
        if (features.height(), features.width()) != sim.shape() || features.channels() != self.d {
            return Err(Error::shape(
                "density_from_parts",
                format!("{}x{}x{}", self.d, sim.height(), sim.width()),
                format!("{}x{}x{}", features.channels(), features.height(), features.width()),
            ));
        }
        let z = self.counter.forward(&self.params, &stack_similarity(features, sim));
        Grid2D::from_vec(
            sim.height(),
            sim.width(),
            z.values().iter().map(|&v| softplus(v) / DENSITY_SCALE).collect(),
        )
    }

    pub fn predict_density(&self, image: &Volume3D, ex: &[Exemplar], mask: Option<&Grid2D>) -> Result<Grid2D> {
        let features = self.extract_features(image)?;
        let vectors = self.exemplar_vectors(ex)?;
        let mut sim = similarity_from_features(&features, &vectors)?;
        if let Some(m) = mask {
            sim = apply_mask(&sim, m)?;
        }
        self.density_from_parts(&features, &sim)
    }

    /// Loss and analytic gradient of the counting loss for one sample.
    pub fn gradients(&self, sample: &TrainSample) -> Result<(f64, ParamSet)> {
        if sample.exemplars.is_empty() {
            return Err(Error::InvalidArgument("at least one exemplar is required".into()));
        }
        let img_cache = self.extractor.forward_cached(&self.params, &sample.image);
        let features = img_cache.output();
        let ex_caches: Vec<_> = sample
            .exemplars
            .iter()
            .map(|e| self.extractor.forward_cached(&self.params, &e.crop))
            .collect();
        let vectors: Vec<FeatureVec> = ex_caches.iter().map(|c| global_average_pool(c.output())).collect();
        let raw_sim = similarity_from_features(features, &vectors)?;
        raw_sim.ensure_same_shape(&sample.target, "gradients")?;
        let sim = match &sample.mask {
            Some(m) => apply_mask(&raw_sim, m)?,
            None => raw_sim.clone(),
        };

        let head_cache = self.counter.forward_cached(&self.params, &stack_similarity(features, &sim));
        let z = head_cache.output();
        let mut loss = 0.0;
        let mut dz = z.clone();
        for ((g, &zi), &t) in dz.values_mut().iter_mut().zip(z.values()).zip(sample.target.values()) {
            let diff = softplus(zi) / DENSITY_SCALE - t;
            loss += diff * diff;
            *g = 2.0 * diff * sigmoid(zi) / DENSITY_SCALE;
        }

        let mut grads = self.params.zeros_like();
        let d_stacked = self
            .counter
            .backward(&self.params, &head_cache, dz, &mut grads, true)
            .expect("input gradient requested");

        let (d, hw) = (self.d, features.plane_len());
        let mut d_sim = d_stacked.plane(d).to_vec();
        if let Some(m) = &sample.mask {
            let lowest = argmin(raw_sim.values());
            let mut filled = 0.0;
            for (g, &keep) in d_sim.iter_mut().zip(m.values()) {
                if keep == 0.0 {
                    filled += *g;
                    *g = 0.0;
                }
            }
            d_sim[lowest] += filled;
        }
        let mut d_features = Volume3D::from_raw(d, features.height(), features.width(), d_stacked.values()[..d * hw].to_vec());
        let n = vectors.len() as f64;
        let mean_b = FeatureVec::mean_of(&vectors)?;
        for c in 0..d {
            let bc = mean_b.as_slice()[c];
            for (g, ds) in d_features.plane_mut(c).iter_mut().zip(&d_sim) {
                *g += ds * bc;
            }
        }
        for cache in &ex_caches {
            let out = cache.output();
            let mut d_out = Volume3D::zeros(d, out.height(), out.width());
            let area = out.plane_len() as f64;
            for c in 0..d {
                let db: f64 = features.plane(c).iter().zip(&d_sim).map(|(f, ds)| f * ds).sum::<f64>() / n;
                d_out.plane_mut(c).iter_mut().for_each(|v| *v = db / area);
            }
            self.extractor.backward(&self.params, cache, d_out, &mut grads, false);
        }
        self.extractor.backward(&self.params, &img_cache, d_features, &mut grads, false);
        Ok((loss, grads))
    }

    /// Sign pattern of every ReLU pre-activation touched by `sample`.
    ///
    /// Finite differences are only a valid gradient oracle when a probe does
    /// not flip any of these.
    pub fn relu_pattern(&self, sample: &TrainSample) -> Result<Vec<bool>> {
        let mut pattern = Vec::new();
        let img = self.extractor.forward_cached(&self.params, &sample.image);
        push_pattern(&self.extractor, &img, &mut pattern);
        let mut vectors = Vec::new();
        for e in &sample.exemplars {
            let c = self.extractor.forward_cached(&self.params, &e.crop);
            push_pattern(&self.extractor, &c, &mut pattern);
            vectors.push(global_average_pool(c.output()));
        }
        let mut sim = similarity_from_features(img.output(), &vectors)?;
        if let Some(m) = &sample.mask {
            let lowest = argmin(sim.values());
            pattern.extend((0..sim.values().len()).map(|i| i == lowest));
            sim = apply_mask(&sim, m)?;
        }
        let head = self.counter.forward_cached(&self.params, &stack_similarity(img.output(), &sim));
        push_pattern(&self.counter, &head, &mut pattern);
        Ok(pattern)
    }

    /// Counting loss for one sample (forward only).
    pub fn sample_loss(&self, sample: &TrainSample) -> Result<f64> {
        let density = self.predict_density(&sample.image, &sample.exemplars, sample.mask.as_ref())?;
        loss_count(&density, &sample.target)
    }

    pub fn to_file(&self, fingerprint: Option<String>) -> ModelFile {
        ModelFile {
            version: MODEL_VERSION,
            kind: COUNTER_KIND.into(),
            r: self.r,
            d: self.d,
            params: self.params.clone(),
            history: self.history.clone(),
            fingerprint,
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        let mut model = Self::new(file.r, file.d, &mut SeededRng::new(0))?;
        check_params_match(&model.params, &file.params)?;
        model.params = file.params;
        model.history = file.history;
        Ok(model)
    }

    pub fn save(&self, path: &Path, fingerprint: Option<String>) -> Result<()> {
        self.to_file(fingerprint).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        let file = ModelFile::load(path, COUNTER_KIND)?;
        let fp = file.fingerprint.clone();
        Ok((Self::from_file(file)?, fp))
    }
}

pub(crate) fn push_pattern(stack: &ConvStack, cache: &crate::nn::StackCache, out: &mut Vec<bool>) {
    for (layer, pre) in stack.layers.iter().zip(&cache.pre) {
        if layer.relu {
            out.extend(pre.values().iter().map(|&v| v > 0.0));
        }
    }
}

pub(crate) fn check_params_match(expected: &ParamSet, found: &ParamSet) -> Result<()> {
    for (name, t) in &expected.0 {
        match found.0.get(name) {
            Some(f) if f.shape == t.shape => {}
            Some(f) => {
                return Err(Error::parse(
                    "model.json",
                    format!("params.{name}.shape"),
                    0,
                    format!("expected {:?}, found {:?}", t.shape, f.shape),
                ))
            }
            None => return Err(Error::parse("model.json", format!("params.{name}"), 0, "missing layer")),
        }
    }
    if let Some(extra) = found.0.keys().find(|k| !expected.0.contains_key(*k)) {
        return Err(Error::parse("model.json", format!("params.{extra}"), 0, "unexpected layer"));
    }
    if !found.all_finite() {
        return Err(Error::parse("model.json", "params", 0, "non-finite parameter"));
    }
    Ok(())
}

/// Generic mini-batch gradient descent: per-sample gradients may be computed
/// in parallel but are reduced in sample order, so results are deterministic.
///
/// Steps follow `objective_scale x loss`; `history` records the unscaled
/// mean loss per epoch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_gradient_descent<S: Sync>(
    params: &mut ParamSet,
    history: &mut Vec<f64>,
    samples: &[S],
    cfg: &TrainCfg,
    stream: &str,
    objective_scale: f64,
    id_of: impl Fn(&S) -> &str + Sync,
    grad_of: impl Fn(&ParamSet, &S) -> Result<(f64, ParamSet)> + Sync,
) -> Result<()> {
    cfg.check()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut rng = SeededRng::new(cfg.seed).substream(stream);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut optimizer = Optimizer::new(cfg.optimizer, params);
    for _ in 0..cfg.epochs {
        let epoch = history.len();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let snapshot = &*params;
            let results: Vec<Result<(f64, ParamSet)>> =
                batch.par_iter().map(|&i| grad_of(snapshot, &samples[i])).collect();
            let mut total = params.zeros_like();
            for (&i, res) in batch.iter().zip(results) {
                let (loss, g) = res?;
                if !loss.is_finite() || !g.all_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        scene: id_of(&samples[i]).to_string(),
                        detail: format!("loss {loss}"),
                    });
                }
                epoch_loss += loss;
                total.add_assign(&g);
            }
            total.scale(objective_scale / batch.len() as f64);
            total.clip_norm(cfg.clip_norm);
            optimizer.step(params, &total, cfg.lr);
        }
        let mean = epoch_loss / samples.len() as f64;
        debug!("{stream} epoch {epoch}: mean loss {mean:.6}");
        history.push(mean);
    }
    Ok(())
}

/// Trains the counter on single-class samples with the unmasked similarity map.
pub fn train_base(mut model: CounterModel, samples: &[TrainSample], cfg: &TrainCfg) -> Result<CounterModel> {
    let mut params = std::mem::take(&mut model.params);
    let mut history = std::mem::take(&mut model.history);
    let shell = model.clone();
    run_gradient_descent(
        &mut params,
        &mut history,
        samples,
        cfg,
        "train-base",
        DENSITY_SCALE * DENSITY_SCALE,
        |s| s.id.as_str(),
        |p, s| {
            let view = CounterModel { params: p.clone(), ..shell.clone() };
            view.gradients(s)
        },
    )?;
    model.params = params;
    model.history = history;
    model.learning_rate = cfg.lr;
    Ok(model)
}
