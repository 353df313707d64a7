//! Exemplar-based segmentation model.
//!
//! Uses the same extractor architecture as the counter. The predicted mask is
//! the cosine similarity between each cell's feature vector and the mean
//! pooled exemplar feature; training regresses it onto binary pseudo masks.

use std::path::Path;

use crate::counter::{
    apply_mask, check_params_match, count, push_pattern, run_gradient_descent, scene_exemplars, CounterModel, Exemplar,
};
use crate::error::{Error, Result};
use crate::nn::{extractor_stack, ConvStack, ModelFile, ParamSet, TrainCfg, MODEL_VERSION};
use crate::numerics::{cosine, global_average_pool, minmax_normalize, FeatureVec, Grid2D, SeededRng, Volume3D};
use crate::scene::Scene;

pub const SEGMENTER_KIND: &str = "segmenter";
pub const DEFAULT_TAU: f64 = 0.5;

/// Segmentation training example.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub image: Volume3D,
    pub exemplars: Vec<Exemplar>,
    pub target: Grid2D,
}

impl SegSample {
    pub fn from_scene(id: impl Into<String>, scene: &Scene, mask: Grid2D, exemplar_size: usize) -> Self {
        Self {
            id: id.into(),
            image: scene.image.clone(),
            exemplars: scene_exemplars(scene, exemplar_size),
            target: mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    r: usize,
    d: usize,
    extractor: ConvStack,
    pub params: ParamSet,
    pub history: Vec<f64>,
}

/// Sum-of-squares loss between a predicted and a target mask.
pub fn loss_seg(pred: &Grid2D, target: &Grid2D) -> Result<f64> {
    crate::counter::loss_count(pred, target)
}

/// `minmax_normalize(mask) >= tau`; a constant mask binarizes to all zeros.
pub fn binarize(mask: &Grid2D, tau: f64) -> Grid2D {
    if mask.max() == mask.min() {
        return Grid2D::zeros(mask.height(), mask.width());
    }
    minmax_normalize(mask).map(|v| if v >= tau { 1.0 } else { 0.0 })
}

/// Intersection over union of two binary masks; two empty masks score 1.
pub fn iou(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    a.ensure_same_shape(b, "iou")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

impl SegModel {
    pub fn new(r: usize, d: usize, rng: &mut SeededRng) -> Result<Self> {
        let extractor = extractor_stack("extractor", r, d)?;
        let mut params = ParamSet::default();
        extractor.init_params(&mut params, rng);
        Ok(Self {
            r,
            d,
            extractor,
            params,
            history: Vec::new(),
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

    fn features(&self, image: &Volume3D) -> Result<Volume3D> {
        if image.height() < self.r || image.width() < self.r {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} smaller than downsampling ratio {}",
                image.height(),
                image.width(),
                self.r
            )));
        }
        Ok(self.extractor.forward(&self.params, image))
    }

    /// Mean of the pooled exemplar features.
    pub fn exemplar_vector(&self, ex: &[Exemplar]) -> Result<FeatureVec> {
        if ex.is_empty() {
            return Err(Error::InvalidArgument("at least one exemplar is required".into()));
        }
        let pooled = ex
            .iter()
            .map(|e| Ok(global_average_pool(&self.features(&e.crop)?)))
            .collect::<Result<Vec<_>>>()?;
        FeatureVec::mean_of(&pooled)
    }

    /// Cosine similarity between every cell feature and the exemplar vector.
    pub fn predict_mask(&self, image: &Volume3D, ex: &[Exemplar]) -> Result<Grid2D> {
        let v = self.exemplar_vector(ex)?;
        let f = self.features(image)?;
        cosine_map(&f, &v)
    }

    /// Loss and analytic gradient of the segmentation loss for one sample.
    pub fn gradients(&self, sample: &SegSample) -> Result<(f64, ParamSet)> {
        if sample.exemplars.is_empty() {
            return Err(Error::InvalidArgument("at least one exemplar is required".into()));
        }
        let img_cache = self.extractor.forward_cached(&self.params, &sample.image);
        let f = img_cache.output();
        let ex_caches: Vec<_> = sample
            .exemplars
            .iter()
            .map(|e| self.extractor.forward_cached(&self.params, &e.crop))
            .collect();
        let pooled: Vec<FeatureVec> = ex_caches.iter().map(|c| global_average_pool(c.output())).collect();
        let v = FeatureVec::mean_of(&pooled)?;
        let pred = cosine_map(f, &v)?;
        pred.ensure_same_shape(&sample.target, "SegModel::gradients")?;

        let d = self.d;
        let hw = f.plane_len();
        let v = v.as_slice();
        let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut d_features = Volume3D::zeros(d, f.height(), f.width());
        let mut d_v = vec![0.0; d];
        let mut loss = 0.0;
        for cell in 0..hw {
            let diff = pred.values()[cell] - sample.target.values()[cell];
            loss += diff * diff;
            let w: Vec<f64> = (0..d).map(|c| f.plane(c)[cell]).collect();
            let w_norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if w_norm == 0.0 || v_norm == 0.0 {
                continue;
            }
            let g = 2.0 * diff;
            let cos = pred.values()[cell];
            let denom = w_norm * v_norm;
            for c in 0..d {
                d_features.plane_mut(c)[cell] = g * (v[c] / denom - cos * w[c] / (w_norm * w_norm));
                d_v[c] += g * (w[c] / denom - cos * v[c] / (v_norm * v_norm));
            }
        }

        let mut grads = self.params.zeros_like();
        let n = ex_caches.len() as f64;
        for cache in &ex_caches {
            let out = cache.output();
            let area = out.plane_len() as f64;
            let mut d_out = Volume3D::zeros(d, out.height(), out.width());
            for (c, dv) in d_v.iter().enumerate() {
                d_out.plane_mut(c).iter_mut().for_each(|x| *x = dv / (n * area));
            }
            self.extractor.backward(&self.params, cache, d_out, &mut grads, false);
        }
        self.extractor.backward(&self.params, &img_cache, d_features, &mut grads, false);
        Ok((loss, grads))
    }

    /// Sign pattern of every ReLU pre-activation touched by `sample`.
    pub fn relu_pattern(&self, sample: &SegSample) -> Vec<bool> {
        let mut pattern = Vec::new();
        let img = self.extractor.forward_cached(&self.params, &sample.image);
        push_pattern(&self.extractor, &img, &mut pattern);
        for e in &sample.exemplars {
            let c = self.extractor.forward_cached(&self.params, &e.crop);
            push_pattern(&self.extractor, &c, &mut pattern);
        }
        pattern
    }

    pub fn sample_loss(&self, sample: &SegSample) -> Result<f64> {
        loss_seg(&self.predict_mask(&sample.image, &sample.exemplars)?, &sample.target)
    }

    pub fn to_file(&self, fingerprint: Option<String>) -> ModelFile {
        ModelFile {
            version: MODEL_VERSION,
            kind: SEGMENTER_KIND.into(),
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
        let file = ModelFile::load(path, SEGMENTER_KIND)?;
        let fp = file.fingerprint.clone();
        Ok((Self::from_file(file)?, fp))
    }
}

fn cosine_map(f: &Volume3D, v: &FeatureVec) -> Result<Grid2D> {
    if v.dim() != f.channels() {
        return Err(Error::shape("cosine_map", f.channels(), v.dim()));
    }
    let mut out = Grid2D::zeros(f.height(), f.width());
    for row in 0..f.height() {
        for col in 0..f.width() {
            out.set(row, col, cosine(&f.column(row, col), v)?);
        }
    }
    Ok(out)
}

/// Trains the segmenter on `(scene, pseudo mask)` samples.
pub fn train_seg(mut model: SegModel, samples: &[SegSample], cfg: &TrainCfg) -> Result<SegModel> {
    let mut params = std::mem::take(&mut model.params);
    let mut history = std::mem::take(&mut model.history);
    let shell = model.clone();
    run_gradient_descent(
        &mut params,
        &mut history,
        samples,
        cfg,
        "train-seg",
        1.0,
        |s| s.id.as_str(),
        |p, s| {
            let view = SegModel { params: p.clone(), ..shell.clone() };
            view.gradients(s)
        },
    )?;
    model.params = params;
    model.history = history;
    Ok(model)
}

/// Binarized segmenter mask for a scene.
pub fn predicted_binary_mask(seg: &SegModel, scene: &Scene, tau: f64, exemplar_size: usize) -> Result<Grid2D> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    let mask = seg.predict_mask(&scene.image, &scene_exemplars(scene, exemplar_size))?;
    Ok(binarize(&mask, tau))
}

/// Counter density with the similarity map masked by the binarized segmenter output.
pub fn masked_density(counter: &CounterModel, seg: &SegModel, scene: &Scene, tau: f64, exemplar_size: usize) -> Result<Grid2D> {
    let mask = predicted_binary_mask(seg, scene, tau, exemplar_size)?;
    let ex = scene_exemplars(scene, exemplar_size);
    let features = counter.extract_features(&scene.image)?;
    let vectors = counter.exemplar_vectors(&ex)?;
    let sim = crate::counter::similarity_from_features(&features, &vectors)?;
    counter.density_from_parts(&features, &apply_mask(&sim, &mask)?)
}

pub fn masked_count(counter: &CounterModel, seg: &SegModel, scene: &Scene, tau: f64, exemplar_size: usize) -> Result<f64> {
    Ok(count(&masked_density(counter, seg, scene, tau, exemplar_size)?))
}
