//! Pipeline stages. Each command reads its prerequisites from disk, checks
//! their fingerprints and writes its own artifacts plus a run log.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use log::{info, warn};
use maskcount_core::counter::{augmented_samples, scene_exemplars, train_base, CounterModel};
use maskcount_core::eval::{self, bench_timing, distance_stats, outcome_for, Report, ReportRow, REPORT_VERSION};
use maskcount_core::netpbm;
use maskcount_core::numerics::{minmax_normalize, FeatureVec, Grid2D, SeededRng};
use maskcount_core::pseudo::{
    argmin_k, dotbox_mask, optimal_k_mask, threshold_mask, BoxSize, PseudoLabelFile, PseudoLabelResult,
};
use maskcount_core::scene::{
    class_catalog, generate_single_class_scene, load_scene, save_scene, synthesize_multiclass, Manifest,
    ManifestEntry, Scene, SceneKind, Split,
};
use maskcount_core::segmenter::{iou, masked_density, predicted_binary_mask, train_seg, SegModel, SegSample};
use maskcount_core::Error as CoreError;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::Config;
use crate::error::CliError;

pub type Result<T> = anyhow::Result<T>;

const MULTI_ATTEMPTS: usize = 200;
const MIN_BENCH_SCENES: usize = 10;
pub const THRESHOLD_TAUS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Where every artifact lives, derived from the configured directories.
pub struct Layout {
    pub data_dir: PathBuf,
    pub models_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Layout {
    pub fn new(cfg: &Config) -> Self {
        Self {
            data_dir: cfg.paths.data_dir.clone(),
            models_dir: cfg.paths.models_dir.clone(),
            reports_dir: cfg.paths.reports_dir.clone(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.data_dir.join(maskcount_core::scene::MANIFEST_FILE)
    }

    pub fn pseudo_dir(&self) -> PathBuf {
        self.data_dir.join("pseudo_masks")
    }

    pub fn pseudo_mask(&self, scene_id: &str) -> PathBuf {
        self.pseudo_dir().join(format!("{scene_id}.json"))
    }

    pub fn counter(&self) -> PathBuf {
        self.models_dir.join("counter.json")
    }

    pub fn segmenter(&self) -> PathBuf {
        self.models_dir.join("segmenter.json")
    }

    pub fn ablation_segmenter(&self, strategy: &str) -> PathBuf {
        self.models_dir.join("ablate").join(format!("segmenter-{}.json", strategy.replace(':', "-")))
    }

    pub fn report_dir(&self, command: &str) -> PathBuf {
        self.reports_dir.join(command)
    }

    pub fn dump_dir(&self, command: &str) -> PathBuf {
        self.reports_dir.join("dumps").join(command)
    }

    pub fn log(&self, command: &str) -> PathBuf {
        self.reports_dir.join("logs").join(format!("{command}.json"))
    }
}

pub struct Ctx {
    pub cfg: Config,
    pub fingerprint: String,
    pub layout: Layout,
    pub root: SeededRng,
    pub dump_images: bool,
    pub force: bool,
}

impl Ctx {
    pub fn new(cfg: Config, dump_images: bool, force: bool) -> Self {
        Self {
            fingerprint: cfg.fingerprint(),
            layout: Layout::new(&cfg),
            root: SeededRng::new(cfg.seed),
            cfg,
            dump_images,
            force,
        }
    }

    fn fp(&self) -> Option<String> {
        Some(self.fingerprint.clone())
    }

    fn check_fingerprint(&self, artifact: &str, found: Option<&str>, producer: &'static str) -> Result<()> {
        if found == Some(self.fingerprint.as_str()) {
            return Ok(());
        }
        let found = found.unwrap_or("<none>").to_string();
        if self.force {
            warn!("{artifact}: fingerprint {found} differs from {}; continuing (--force)", self.fingerprint);
            return Ok(());
        }
        Err(CliError::Fingerprint {
            artifact: artifact.to_string(),
            found,
            expected: self.fingerprint.clone(),
            producer,
        }
        .into())
    }

    fn require(&self, artifact: &str, path: &Path, producer: &'static str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::Missing {
                artifact: artifact.to_string(),
                path: path.to_path_buf(),
                producer,
            }
            .into())
        }
    }

    fn manifest(&self) -> Result<Manifest> {
        let path = self.layout.manifest();
        self.require("dataset manifest", &path, "gen")?;
        let m = Manifest::load(&self.layout.data_dir)?;
        self.check_fingerprint("dataset manifest", m.fingerprint.as_deref(), "gen")?;
        Ok(m)
    }

    fn scenes(&self, manifest: &Manifest, split: Split, kind: SceneKind) -> Result<Vec<(String, Scene)>> {
        let entries: Vec<&ManifestEntry> = manifest.select(split, kind).collect();
        entries
            .par_iter()
            .map(|e| {
                let dir = Manifest::scene_dir(&self.layout.data_dir, e);
                let scene = load_scene(&dir).with_context(|| format!("loading scene {}", e.id))?;
                Ok((e.id.clone(), scene))
            })
            .collect()
    }

    fn counter(&self) -> Result<CounterModel> {
        let path = self.layout.counter();
        self.require("base counter", &path, "train-base")?;
        let (model, fp) = CounterModel::load(&path)?;
        self.check_fingerprint("base counter", fp.as_deref(), "train-base")?;
        if model.r() != self.cfg.r || model.d() != self.cfg.d {
            return Err(CliError::Config(format!(
                "base counter has r = {}, d = {} but config asks for r = {}, d = {}",
                model.r(),
                model.d(),
                self.cfg.r,
                self.cfg.d
            ))
            .into());
        }
        Ok(model)
    }

    fn segmenter(&self) -> Result<SegModel> {
        let path = self.layout.segmenter();
        self.require("segmenter", &path, "train-seg")?;
        let (model, fp) = SegModel::load(&path)?;
        self.check_fingerprint("segmenter", fp.as_deref(), "train-seg")?;
        Ok(model)
    }

    fn pseudo_label(&self, scene_id: &str) -> Result<PseudoLabelResult> {
        let path = self.layout.pseudo_mask(scene_id);
        self.require(&format!("pseudo mask for {scene_id}"), &path, "pseudo-label")?;
        let file = PseudoLabelFile::load(&path)?;
        self.check_fingerprint(&format!("pseudo mask for {scene_id}"), file.fingerprint.as_deref(), "pseudo-label")?;
        Ok(file.result(&path.display().to_string())?)
    }

    fn write_log(&self, command: &str, start: Instant, summary: serde_json::Value) -> Result<()> {
        let path = self.layout.log(command);
        let log = json!({
            "command": command,
            "fingerprint": self.fingerprint,
            "seed": self.cfg.seed,
            "elapsed_s": start.elapsed().as_secs_f64(),
            "config": self.cfg,
            "summary": summary,
        });
        write_json(&path, &log)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dump_grid(path: &Path, grid: &Grid2D) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(netpbm::write_pgm(path, grid)?)
}

fn split_name(split: Split, kind: SceneKind) -> String {
    let kind = match kind {
        SceneKind::Single => "single",
        SceneKind::Multi => "multi",
    };
    format!("{}/{kind}", split.as_str())
}

fn synthesize_pair(singles: &[(String, Scene)], split: Split, j: usize, ctx: &Ctx) -> Result<(Scene, [usize; 2])> {
    let mut rng = ctx.root.substream(&format!("gen/{}/multi/{j}", split.as_str()));
    for _ in 0..MULTI_ATTEMPTS {
        let a = rng.gen_range(0..singles.len());
        let b = rng.gen_range(0..singles.len());
        if singles[a].1.target_class == singles[b].1.target_class {
            continue;
        }
        match synthesize_multiclass(&singles[a].1, &singles[b].1, ctx.cfg.r, &mut rng.fork()) {
            Ok(scene) => return Ok((scene, [a, b])),
            Err(CoreError::CropExhausted { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(anyhow!(
        "no usable source pair for {} multi scene {j} after {MULTI_ATTEMPTS} draws",
        split.as_str()
    ))
}

pub fn cmd_gen(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.cfg;
    let catalog = class_catalog();
    let data_dir = &ctx.layout.data_dir;
    for split in Split::ALL {
        let dir = data_dir.join(split.as_str());
        if dir.exists() {
            std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    let mut entries = Vec::new();
    let mut summary = serde_json::Map::new();
    for split in Split::ALL {
        let (n_single, n_multi) = match split {
            Split::Train => (cfg.gen.train, cfg.gen.train_multi),
            Split::Val => (cfg.gen.val, cfg.gen.val_multi),
            Split::Test => (cfg.gen.test, cfg.gen.test_multi),
        };
        let singles: Vec<(String, Scene)> = (0..n_single)
            .into_par_iter()
            .map(|i| {
                let class = (i % catalog.len()) as u32;
                let mut rng = ctx.root.substream(&format!("gen/{}/single/{i}", split.as_str()));
                let scene = generate_single_class_scene(
                    &catalog[class as usize],
                    class,
                    cfg.canvas.height,
                    cfg.canvas.width,
                    &mut rng,
                )?;
                Ok((format!("{}-s{i:04}", split.as_str()), scene))
            })
            .collect::<Result<_>>()?;
        let multis: Vec<(String, Scene, [usize; 2])> = (0..n_multi)
            .into_par_iter()
            .map(|j| {
                let (scene, src) = synthesize_pair(&singles, split, j, ctx)?;
                Ok((format!("{}-m{j:04}", split.as_str()), scene, src))
            })
            .collect::<Result<_>>()?;

        for (id, scene) in &singles {
            let rel = format!("{}/{id}", split_name(split, SceneKind::Single));
            save_scene(scene, &data_dir.join(&rel))?;
            entries.push(ManifestEntry {
                id: id.clone(),
                dir: rel,
                split,
                kind: SceneKind::Single,
                target_class: scene.target_class,
                sources: None,
                source_classes: None,
            });
        }
        for (id, scene, [a, b]) in &multis {
            let rel = format!("{}/{id}", split_name(split, SceneKind::Multi));
            save_scene(scene, &data_dir.join(&rel))?;
            entries.push(ManifestEntry {
                id: id.clone(),
                dir: rel,
                split,
                kind: SceneKind::Multi,
                target_class: scene.target_class,
                sources: Some([singles[*a].0.clone(), singles[*b].0.clone()]),
                source_classes: Some([singles[*a].1.target_class, singles[*b].1.target_class]),
            });
        }
        info!("{}: {} single, {} multi scenes", split.as_str(), singles.len(), multis.len());
        summary.insert(split.as_str().into(), json!({"single": singles.len(), "multi": multis.len()}));
    }
    let manifest = Manifest {
        version: 1,
        fingerprint: ctx.fp(),
        scenes: entries,
    };
    std::fs::create_dir_all(data_dir).with_context(|| format!("creating {}", data_dir.display()))?;
    manifest.save(data_dir)?;
    ctx.write_log("gen", start, serde_json::Value::Object(summary))
}

pub fn cmd_train_base(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.cfg;
    let manifest = ctx.manifest()?;
    let scenes = ctx.scenes(&manifest, Split::Train, SceneKind::Single)?;
    if scenes.is_empty() {
        return Err(CliError::Config("no training scenes; set [gen] train > 0 and re-run gen".into()).into());
    }
    let samples: Vec<_> = scenes
        .par_iter()
        .map(|(id, scene)| {
            let mut rng = ctx.root.substream(&format!("train-base/augment/{id}"));
            augmented_samples(id, scene, cfg.r, cfg.sigma, cfg.exemplar_size, &mut rng)
        })
        .collect::<maskcount_core::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    info!("training base counter on {} samples from {} scenes", samples.len(), scenes.len());
    let model = CounterModel::new(cfg.r, cfg.d, &mut ctx.root.substream("train-base/init"))?;
    let model = train_base(model, &samples, &cfg.train_cfg(&cfg.train, "train-base"))?;
    let path = ctx.layout.counter();
    std::fs::create_dir_all(&ctx.layout.models_dir)?;
    model.save(&path, ctx.fp())?;
    info!("wrote {}", path.display());
    ctx.write_log(
        "train-base",
        start,
        json!({"samples": samples.len(), "loss_history": model.history}),
    )
}

pub fn cmd_pseudo_label(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let manifest = ctx.manifest()?;
    let counter = ctx.counter()?;
    let pcfg = ctx.cfg.pseudo_cfg();
    let mut k_hist = std::collections::BTreeMap::<usize, usize>::new();
    let mut total = 0;
    for split in Split::ALL {
        let scenes = ctx.scenes(&manifest, split, SceneKind::Multi)?;
        let results: Vec<PseudoLabelResult> = scenes
            .par_iter()
            .map(|(id, scene)| {
                let mut rng = ctx.root.substream(&format!("kmeans/{id}"));
                optimal_k_mask(&counter, scene, &pcfg, &mut rng)
            })
            .collect::<maskcount_core::Result<_>>()?;
        for ((id, _), result) in scenes.iter().zip(&results) {
            let path = ctx.layout.pseudo_mask(id);
            PseudoLabelFile::new(id, result, ctx.fp()).save(&path)?;
            let reloaded = PseudoLabelFile::load(&path)?;
            if reloaded.k_star != argmin_k(&reloaded.per_k_loss) {
                return Err(CliError::Numeric(format!(
                    "{}: k_star {:?} is not the argmin of its per-k losses",
                    path.display(),
                    reloaded.k_star
                ))
                .into());
            }
            if ctx.dump_images {
                dump_grid(&ctx.layout.pseudo_dir().join(format!("{id}.pgm")), &result.mask)?;
            }
            *k_hist.entry(result.k_star.expect("kmeans results carry k_star")).or_default() += 1;
        }
        total += scenes.len();
    }
    info!("pseudo-labeled {total} scenes; k* histogram {k_hist:?}");
    ctx.write_log("pseudo-label", start, json!({"scenes": total, "k_star_histogram": k_hist}))
}

fn seg_samples(ctx: &Ctx, scenes: &[(String, Scene)], masks: Vec<Grid2D>) -> Vec<SegSample> {
    scenes
        .iter()
        .zip(masks)
        .map(|((id, scene), mask)| SegSample::from_scene(id.clone(), scene, mask, ctx.cfg.exemplar_size))
        .collect()
}

fn fit_segmenter(ctx: &Ctx, samples: &[SegSample]) -> Result<SegModel> {
    let cfg = &ctx.cfg;
    let model = SegModel::new(cfg.r, cfg.d, &mut ctx.root.substream("train-seg/init"))?;
    Ok(train_seg(model, samples, &cfg.train_cfg(&cfg.train_seg, "train-seg"))?)
}

pub fn cmd_train_seg(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let manifest = ctx.manifest()?;
    let scenes = ctx.scenes(&manifest, Split::Train, SceneKind::Multi)?;
    if scenes.is_empty() {
        return Err(CliError::Config("no multi-class training scenes; set [gen] train_multi > 0".into()).into());
    }
    let masks = scenes
        .iter()
        .map(|(id, _)| Ok(ctx.pseudo_label(id)?.mask))
        .collect::<Result<Vec<_>>>()?;
    let samples = seg_samples(ctx, &scenes, masks);
    info!("training segmenter on {} pseudo-labeled scenes", samples.len());
    let model = fit_segmenter(ctx, &samples)?;
    let path = ctx.layout.segmenter();
    std::fs::create_dir_all(&ctx.layout.models_dir)?;
    model.save(&path, ctx.fp())?;
    info!("wrote {}", path.display());
    ctx.write_log("train-seg", start, json!({"samples": samples.len(), "loss_history": model.history}))
}

#[derive(Serialize)]
struct SceneCount {
    scene_id: String,
    method: String,
    count: f64,
    unmasked_count: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    interest: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    other: Option<f64>,
}

fn read_mask(path: &Path) -> Result<Grid2D> {
    let grid = netpbm::read_pgm(path)?;
    Ok(grid.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Counts one scene directory (optionally with a mask PGM), or every test
/// multi-class scene through the segmenter.
pub fn cmd_count(ctx: &Ctx, scene_dir: Option<&Path>, mask: Option<&Path>) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.cfg;
    let counter = ctx.counter()?;
    let scenes: Vec<(String, Scene)> = match scene_dir {
        Some(dir) => {
            let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            vec![(id, load_scene(dir)?)]
        }
        None => {
            if mask.is_some() {
                return Err(CliError::Config("--mask needs --scene".into()).into());
            }
            ctx.scenes(&ctx.manifest()?, Split::Test, SceneKind::Multi)?
        }
    };
    let fixed_mask = mask.map(read_mask).transpose()?;
    let seg = match fixed_mask {
        Some(_) => None,
        None => Some(ctx.segmenter()?),
    };
    let method = if fixed_mask.is_some() { "mask-file" } else { "segmenter" };
    let counts = scenes
        .par_iter()
        .map(|(id, scene)| {
            let ex = scene_exemplars(scene, cfg.exemplar_size);
            let unmasked = counter.predict_density(&scene.image, &ex, None)?;
            let density = match (&fixed_mask, &seg) {
                (Some(m), _) => counter.predict_density(&scene.image, &ex, Some(m))?,
                (None, Some(seg)) => masked_density(&counter, seg, scene, cfg.tau, cfg.exemplar_size)?,
                (None, None) => unreachable!("segmenter loaded when no mask is given"),
            };
            if ctx.dump_images {
                dump_grid(&ctx.layout.dump_dir("count").join(format!("{id}-density.pgm")), &minmax_normalize(&density))?;
            }
            let (interest, other) = if scene.is_multiclass() {
                let (a, b) = eval::split_count_by_region(&density, scene, cfg.r)?;
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            Ok(SceneCount {
                scene_id: id.clone(),
                method: method.into(),
                count: density.sum(),
                unmasked_count: unmasked.sum(),
                interest,
                other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if scene_dir.is_some() {
        println!("{}", serde_json::to_string_pretty(&counts[0])?);
    } else {
        let path = ctx.layout.report_dir("count").join("counts.json");
        write_json(&path, &json!({"fingerprint": ctx.fingerprint, "counts": counts}))?;
        info!("wrote {}", path.display());
    }
    ctx.write_log("count", start, json!({"scenes": counts.len(), "method": method}))
}

fn report_row(method: &str, outcomes: Vec<eval::CountOutcome>, multiclass: bool) -> Result<ReportRow> {
    Ok(ReportRow {
        method: method.to_string(),
        metrics: eval::aggregate(&outcomes, multiclass)?,
        outcomes,
    })
}

/// Per-scene outcomes for one way of producing a density map.
fn evaluate<F>(ctx: &Ctx, scenes: &[(String, Scene)], density: F) -> Result<Vec<eval::CountOutcome>>
where
    F: Fn(&str, &Scene) -> Result<Grid2D> + Sync,
{
    scenes
        .par_iter()
        .map(|(id, scene)| Ok(outcome_for(id, scene, &density(id, scene)?, ctx.cfg.r)?))
        .collect()
}

fn unmasked_density(ctx: &Ctx, counter: &CounterModel, scene: &Scene) -> Result<Grid2D> {
    let ex = scene_exemplars(scene, ctx.cfg.exemplar_size);
    Ok(counter.predict_density(&scene.image, &ex, None)?)
}

fn pseudo_density(ctx: &Ctx, counter: &CounterModel, id: &str, scene: &Scene) -> Result<Grid2D> {
    let mask = ctx.pseudo_label(id)?.mask;
    let ex = scene_exemplars(scene, ctx.cfg.exemplar_size);
    Ok(counter.predict_density(&scene.image, &ex, Some(&mask))?)
}

#[derive(Serialize)]
struct SceneIou {
    scene_id: String,
    iou: f64,
}

pub fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.cfg;
    let manifest = ctx.manifest()?;
    let counter = ctx.counter()?;
    let seg = ctx.segmenter()?;
    let seg_density = |_: &str, s: &Scene| Ok(masked_density(&counter, &seg, s, cfg.tau, cfg.exemplar_size)?);

    let test_multi = ctx.scenes(&manifest, Split::Test, SceneKind::Multi)?;
    let mut rows = Vec::new();
    if !test_multi.is_empty() {
        rows.push(report_row("none", evaluate(ctx, &test_multi, |_, s| unmasked_density(ctx, &counter, s))?, true)?);
        rows.push(report_row("kmeans", evaluate(ctx, &test_multi, |id, s| pseudo_density(ctx, &counter, id, s))?, true)?);
        rows.push(report_row("segmenter", evaluate(ctx, &test_multi, seg_density)?, true)?);
    }
    let report = Report {
        version: REPORT_VERSION,
        fingerprint: ctx.fp(),
        split: "test/multi".into(),
        rows,
    };
    report.save(&ctx.layout.report_dir("eval"))?;

    let test_single = ctx.scenes(&manifest, Split::Test, SceneKind::Single)?;
    let mut single_rows = Vec::new();
    if !test_single.is_empty() {
        single_rows.push(report_row("none", evaluate(ctx, &test_single, |_, s| unmasked_density(ctx, &counter, s))?, false)?);
        single_rows.push(report_row("segmenter", evaluate(ctx, &test_single, seg_density)?, false)?);
    }
    Report {
        version: REPORT_VERSION,
        fingerprint: ctx.fp(),
        split: "test/single".into(),
        rows: single_rows,
    }
    .save(&ctx.layout.report_dir("eval").join("single"))?;

    let val_multi = ctx.scenes(&manifest, Split::Val, SceneKind::Multi)?;
    let ious = val_multi
        .par_iter()
        .map(|(id, scene)| {
            let pred = predicted_binary_mask(&seg, scene, cfg.tau, cfg.exemplar_size)?;
            let pseudo = ctx.pseudo_label(id)?.mask;
            if ctx.dump_images {
                let dir = ctx.layout.dump_dir("eval");
                dump_grid(&dir.join(format!("{id}-predicted.pgm")), &pred)?;
                dump_grid(&dir.join(format!("{id}-pseudo.pgm")), &pseudo)?;
            }
            Ok(SceneIou {
                scene_id: id.clone(),
                iou: iou(&pred, &pseudo)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_iou = (!ious.is_empty()).then(|| ious.iter().map(|s| s.iou).sum::<f64>() / ious.len() as f64);
    write_json(
        &ctx.layout.report_dir("eval").join("segmentation.json"),
        &json!({"fingerprint": ctx.fingerprint, "split": "val/multi", "tau": cfg.tau, "mean_iou": mean_iou, "scenes": ious}),
    )?;

    let distances = exemplar_distances(ctx, &counter, &seg, &test_single)?;
    write_json(&ctx.layout.report_dir("eval").join("distances.json"), &distances)?;

    if ctx.dump_images {
        let dir = ctx.layout.dump_dir("eval");
        for (id, scene) in &test_multi {
            dump_grid(&dir.join(format!("{id}-none.pgm")), &minmax_normalize(&unmasked_density(ctx, &counter, scene)?))?;
            dump_grid(&dir.join(format!("{id}-segmenter.pgm")), &minmax_normalize(&seg_density(id, scene)?))?;
        }
    }
    for row in &report.rows {
        info!("test/multi {:>10}: MAE {:.3} RMSE {:.3}", row.method, row.metrics.mae, row.metrics.rmse);
    }
    if let Some(m) = mean_iou {
        info!("val/multi mean IoU {m:.3}");
    }
    ctx.write_log("eval", start, json!({"rows": report.rows.iter().map(|r| (&r.method, r.metrics.mae)).collect::<Vec<_>>(), "mean_iou": mean_iou}))
}

/// Intra/inter-class distances of pooled exemplar features from both
/// extractors over single-class scenes.
fn exemplar_distances(
    ctx: &Ctx,
    counter: &CounterModel,
    seg: &SegModel,
    scenes: &[(String, Scene)],
) -> Result<serde_json::Value> {
    let mut from_counter = Vec::new();
    let mut from_seg = Vec::new();
    for (_, scene) in scenes {
        let ex = scene_exemplars(scene, ctx.cfg.exemplar_size);
        from_counter.push((FeatureVec::mean_of(&counter.exemplar_vectors(&ex)?)?, scene.target_class));
        from_seg.push((seg.exemplar_vector(&ex)?, scene.target_class));
    }
    let stats = |v: &[(FeatureVec, u32)]| distance_stats(v).ok();
    Ok(json!({
        "fingerprint": ctx.fingerprint,
        "split": "test/single",
        "counter": stats(&from_counter),
        "segmenter": stats(&from_seg),
    }))
}

enum Ablation {
    Dotbox(BoxSize),
    Threshold(f64),
}

impl Ablation {
    fn all() -> Vec<Ablation> {
        let mut v: Vec<Ablation> = BoxSize::ALL.into_iter().map(Ablation::Dotbox).collect();
        v.extend(THRESHOLD_TAUS.into_iter().map(Ablation::Threshold));
        v
    }

    fn name(&self) -> String {
        match self {
            Ablation::Dotbox(size) => format!("dotbox:{}", size.as_str()),
            Ablation::Threshold(tau) => format!("threshold:{tau}"),
        }
    }

    fn mask(&self, ctx: &Ctx, counter: &CounterModel, scene: &Scene) -> maskcount_core::Result<Grid2D> {
        match self {
            Ablation::Dotbox(size) => dotbox_mask(scene, *size, ctx.cfg.r),
            Ablation::Threshold(tau) => threshold_mask(counter, scene, *tau, ctx.cfg.exemplar_size),
        }
    }
}

/// Rows `none`, `dotbox:*`, `threshold:*`, `kmeans`, `segmenter` on the test
/// multi-class split. Dot-box and threshold rows retrain the segmenter on
/// masks from that labeler.
pub fn cmd_ablate(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.cfg;
    let manifest = ctx.manifest()?;
    let counter = ctx.counter()?;
    let seg = ctx.segmenter()?;
    let train = ctx.scenes(&manifest, Split::Train, SceneKind::Multi)?;
    let test = ctx.scenes(&manifest, Split::Test, SceneKind::Multi)?;
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Config("ablation needs train and test multi-class scenes".into()).into());
    }
    let segmented = |model: &SegModel| {
        evaluate(ctx, &test, |_, s| Ok(masked_density(&counter, model, s, cfg.tau, cfg.exemplar_size)?))
    };

    let mut rows = vec![report_row("none", evaluate(ctx, &test, |_, s| unmasked_density(ctx, &counter, s))?, true)?];
    for ablation in Ablation::all() {
        let name = ablation.name();
        let masks = train
            .par_iter()
            .map(|(_, s)| ablation.mask(ctx, &counter, s))
            .collect::<maskcount_core::Result<Vec<_>>>()?;
        info!("ablation {name}: training segmenter");
        let model = fit_segmenter(ctx, &seg_samples(ctx, &train, masks))?;
        let path = ctx.layout.ablation_segmenter(&name);
        std::fs::create_dir_all(path.parent().expect("ablation model dir"))?;
        model.save(&path, ctx.fp())?;
        rows.push(report_row(&name, segmented(&model)?, true)?);
    }
    rows.push(report_row("kmeans", evaluate(ctx, &test, |id, s| pseudo_density(ctx, &counter, id, s))?, true)?);
    rows.push(report_row("segmenter", segmented(&seg)?, true)?);

    let report = Report {
        version: REPORT_VERSION,
        fingerprint: ctx.fp(),
        split: "test/multi".into(),
        rows,
    };
    report.save(&ctx.layout.report_dir("ablate"))?;
    for row in &report.rows {
        info!("{:>14}: MAE {:.3}", row.method, row.metrics.mae);
    }
    ctx.write_log("ablate", start, json!({"rows": report.rows.iter().map(|r| (&r.method, r.metrics.mae)).collect::<Vec<_>>()}))
}

pub fn cmd_bench_time(ctx: &Ctx) -> Result<()> {
    let start = Instant::now();
    let cfg = &ctx.cfg;
    let manifest = ctx.manifest()?;
    let counter = ctx.counter()?;
    let seg = ctx.segmenter()?;
    let scenes: Vec<Scene> = ctx
        .scenes(&manifest, Split::Test, SceneKind::Multi)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    if scenes.len() < MIN_BENCH_SCENES {
        return Err(CliError::Config(format!(
            "bench-time needs at least {MIN_BENCH_SCENES} test multi-class scenes, have {}",
            scenes.len()
        ))
        .into());
    }
    let table = bench_timing(
        &counter,
        &seg,
        &scenes,
        (cfg.k_range[0], cfg.k_range[1]),
        cfg.kmeans_restarts,
        cfg.tau,
        cfg.exemplar_size,
        &ctx.root.substream("bench"),
    )?;
    let dir = ctx.layout.report_dir("bench");
    write_json(&dir.join("timing.json"), &json!({"fingerprint": ctx.fingerprint, "table": table}))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &table.columns {
        w.serialize(c)?;
    }
    let csv_path = dir.join("timing.csv");
    std::fs::write(&csv_path, w.into_inner()?).with_context(|| format!("writing {}", csv_path.display()))?;
    for c in &table.columns {
        info!("{:>10}: mask {:.4}s total {:.4}s", c.method, c.mask_s, c.total_s);
    }
    ctx.write_log("bench-time", start, json!({"table": table}))
}
