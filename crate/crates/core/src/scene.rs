//! Synthetic scenes: generation, multi-class concatenation, ground-truth
//! density maps and the on-disk bundle format.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm;
use crate::numerics::{gaussian_smooth, Grid2D, SeededRng, Volume3D};

pub const ANNOTATION_VERSION: u32 = 1;
const PLACEMENT_ATTEMPTS: usize = 1000;
const CROP_ATTEMPTS: usize = 100;
const MAX_PLACEMENT_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DotAnnotation {
    pub x: f64,
    pub y: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExemplarBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub class_id: u32,
}

impl ExemplarBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    fn iou(&self, other: &ExemplarBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.width() * self.height() + other.width() * other.height() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    /// Pixel column where the right-hand crop starts (multi-class scenes only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seam_x: Option<usize>,
    /// Class ids of the left and right sources (multi-class scenes only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_classes: Option<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Volume3D,
    pub dots: Vec<DotAnnotation>,
    pub exemplars: Vec<ExemplarBox>,
    pub target_class: u32,
    pub interest_region: Option<Region>,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn is_multiclass(&self) -> bool {
        self.interest_region.is_some()
    }

    pub fn target_dots(&self) -> impl Iterator<Item = &DotAnnotation> {
        self.dots.iter().filter(move |d| d.class_id == self.target_class)
    }

    /// Ground-truth count `y`.
    pub fn gt_count(&self) -> usize {
        self.target_dots().count()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height() as f64, self.width() as f64);
        if self.image.channels() != 3 {
            return Err(Error::InvalidArgument("scene image must have 3 channels".into()));
        }
        if self.image.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("scene image values must lie in [0,1]".into()));
        }
        for (i, d) in self.dots.iter().enumerate() {
            if !(d.x >= 0.0 && d.x < w && d.y >= 0.0 && d.y < h) {
                return Err(Error::InvalidArgument(format!(
                    "dot {i} at ({}, {}) outside {w}x{h} image",
                    d.x, d.y
                )));
            }
        }
        if self.exemplars.is_empty() {
            return Err(Error::InvalidArgument("scene has no exemplars".into()));
        }
        for (i, b) in self.exemplars.iter().enumerate() {
            if b.class_id != self.target_class {
                return Err(Error::InvalidArgument(format!(
                    "exemplar {i} has class {} but target class is {}",
                    b.class_id, self.target_class
                )));
            }
            if !(b.x0 < b.x1 && b.y0 < b.y1 && b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= w && b.y1 <= h) {
                return Err(Error::InvalidArgument(format!("exemplar {i} is degenerate or out of bounds")));
            }
        }
        if self.interest_region.is_some() != self.meta.seam_x.is_some() {
            return Err(Error::InvalidArgument(
                "interest region and seam must be set together".into(),
            ));
        }
        if let (Some(region), Some(seam)) = (self.interest_region, self.meta.seam_x) {
            if seam == 0 || seam >= self.width() {
                return Err(Error::InvalidArgument(format!("seam {seam} outside image")));
            }
            let inside = |x: f64| match region {
                Region::Left => x < seam as f64,
                Region::Right => x >= seam as f64,
            };
            if self.target_dots().any(|d| !inside(d.x)) {
                return Err(Error::InvalidArgument(
                    "target-class dot outside the interest region".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: ShapeKind,
    pub base_color: [f64; 3],
    pub radius_px: f64,
    pub color_jitter: f64,
    /// Per-instance radius scale drawn from `[1 - j, 1 + j]`.
    pub size_jitter: f64,
    pub count_range: [usize; 2],
}

impl ShapeSpec {
    fn check(&self) -> Result<()> {
        if self.radius_px < 2.0 {
            return Err(Error::InvalidArgument(format!("radius {} < 2", self.radius_px)));
        }
        if !(0.0..1.0).contains(&self.size_jitter) || self.radius_px * (1.0 - self.size_jitter) < 1.0 {
            return Err(Error::InvalidArgument(format!("bad size jitter {}", self.size_jitter)));
        }
        if self.count_range[0] < 1 || self.count_range[0] > self.count_range[1] {
            return Err(Error::InvalidArgument(format!(
                "bad count range {:?}",
                self.count_range
            )));
        }
        Ok(())
    }

    /// Largest instance radius; instance centres keep this clearance from the border.
    pub fn max_radius(&self) -> f64 {
        self.radius_px * (1.0 + self.size_jitter)
    }

    fn contains(&self, dx: f64, dy: f64, r: f64) -> bool {
        match self.shape {
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            // Apex at the top, base along the bottom edge of the bounding box.
            ShapeKind::Triangle => {
                if dy < -r || dy > r {
                    return false;
                }
                let half_width = r * (dy + r) / (2.0 * r);
                dx.abs() <= half_width
            }
        }
    }
}

/// The desk-scale object classes; the class id is the index.
pub fn class_catalog() -> Vec<ShapeSpec> {
    let spec = |shape, base_color, radius_px| ShapeSpec {
        shape,
        base_color,
        radius_px,
        color_jitter: 0.06,
        size_jitter: 0.2,
        count_range: [4, 14],
    };
    vec![
        spec(ShapeKind::Disc, [0.90, 0.15, 0.12], 6.0),
        spec(ShapeKind::Square, [0.15, 0.75, 0.20], 5.0),
        spec(ShapeKind::Triangle, [0.15, 0.30, 0.95], 7.0),
        spec(ShapeKind::Disc, [0.95, 0.85, 0.10], 5.0),
        spec(ShapeKind::Square, [0.85, 0.20, 0.85], 6.0),
        spec(ShapeKind::Triangle, [0.10, 0.85, 0.90], 6.0),
    ]
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one single-class scene. Image values are quantized to 8 bits so
/// the PPM bundle round-trips exactly.
pub fn generate_single_class_scene(
    spec: &ShapeSpec,
    class_id: u32,
    height: usize,
    width: usize,
    rng: &mut SeededRng,
) -> Result<Scene> {
    spec.check()?;
    if height < 64 || width < 64 {
        return Err(Error::InvalidArgument(format!(
            "canvas must be at least 64x64, got {height}x{width}"
        )));
    }
    let seed = rng.seed();
    let margin = spec.max_radius();
    let count = rng.gen_range(spec.count_range[0]..=spec.count_range[1]);

    let mut boxes: Vec<ExemplarBox> = Vec::with_capacity(count);
    while boxes.len() < count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = if spec.size_jitter > 0.0 {
                spec.radius_px * rng.gen_range((1.0 - spec.size_jitter)..=(1.0 + spec.size_jitter))
            } else {
                spec.radius_px
            };
            let cx = rng.gen_range(margin..(width as f64 - margin));
            let cy = rng.gen_range(margin..(height as f64 - margin));
            let candidate = ExemplarBox {
                x0: cx - r,
                y0: cy - r,
                x1: cx + r,
                y1: cy + r,
                class_id,
            };
            if boxes.iter().all(|b| b.iou(&candidate) < MAX_PLACEMENT_IOU) {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement {
                requested: count,
                placed: boxes.len(),
                attempts: PLACEMENT_ATTEMPTS,
                radius_px: spec.radius_px,
                width,
                height,
            });
        }
    }

    let background = rng.gen_range(0.35..0.55);
    let mut image = Volume3D::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                image.set(c, y, x, background + rng.gen_range(-0.04..0.04));
            }
        }
    }

    // 2x2 supersampling gives soft edges.
    const OFFSETS: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
    for b in &boxes {
        let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
        let r = b.width() / 2.0;
        let color: [f64; 3] = std::array::from_fn(|c| {
            (spec.base_color[c] + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0)
        });
        let ys = b.y0.floor().max(0.0) as usize..(b.y1.ceil() as usize).min(height);
        for y in ys {
            let xs = b.x0.floor().max(0.0) as usize..(b.x1.ceil() as usize).min(width);
            for x in xs.clone() {
                let cover = OFFSETS
                    .iter()
                    .filter(|(ox, oy)| spec.contains(x as f64 + ox - cx, y as f64 + oy - cy, r))
                    .count() as f64
                    / 4.0;
                if cover > 0.0 {
                    for (c, col) in color.iter().enumerate() {
                        let v = image.get(c, y, x);
                        image.set(c, y, x, v + (col - v) * cover);
                    }
                }
            }
        }
    }
    image.values_mut().iter_mut().for_each(|v| *v = quantize(*v));

    let dots = boxes
        .iter()
        .map(|b| DotAnnotation {
            x: (b.x0 + b.x1) / 2.0,
            y: (b.y0 + b.y1) / 2.0,
            class_id,
        })
        .collect();

    let n_exemplars = rng.gen_range(1..=3usize).min(count);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(rng);
    let mut chosen: Vec<usize> = order[..n_exemplars].to_vec();
    chosen.sort_unstable();
    let exemplars = chosen.into_iter().map(|i| boxes[i]).collect();

    let scene = Scene {
        image,
        dots,
        exemplars,
        target_class: class_id,
        interest_region: None,
        meta: SceneMeta {
            seed,
            ..SceneMeta::default()
        },
    };
    scene.validate()?;
    Ok(scene)
}

struct Crop {
    x0: usize,
    width: usize,
}

fn draw_crop(source_width: usize, r: usize, rng: &mut SeededRng) -> Crop {
    let frac = rng.gen_range(0.5..=0.7);
    let width = (((frac * source_width as f64) / r as f64).floor() as usize * r).max(r);
    let x0 = rng.gen_range(0..=source_width - width);
    Crop { x0, width }
}

/// Concatenates a crop of `a` (left) with a crop of `b` (right).
///
/// Crop widths are multiples of `r` so the seam falls on a cell boundary of
/// the feature grid. Only one side supplies the target class and exemplars.
pub fn synthesize_multiclass(a: &Scene, b: &Scene, r: usize, rng: &mut SeededRng) -> Result<Scene> {
    if a.target_class == b.target_class {
        return Err(Error::InvalidArgument(format!(
            "sources share class {}",
            a.target_class
        )));
    }
    if a.height() != b.height() {
        return Err(Error::shape("synthesize_multiclass", a.height(), b.height()));
    }
    if r == 0 || a.width() < 2 * r || b.width() < 2 * r {
        return Err(Error::InvalidArgument("sources too narrow for the cell size".into()));
    }
    let seed = rng.seed();
    let target_side = if rng.gen_bool(0.5) { Region::Left } else { Region::Right };
    let target = match target_side {
        Region::Left => a,
        Region::Right => b,
    };

    for _ in 0..CROP_ATTEMPTS {
        let ca = draw_crop(a.width(), r, rng);
        let cb = draw_crop(b.width(), r, rng);
        let target_crop = match target_side {
            Region::Left => &ca,
            Region::Right => &cb,
        };
        let in_crop = |e: &ExemplarBox, c: &Crop| e.x0 >= c.x0 as f64 && e.x1 <= (c.x0 + c.width) as f64;
        if !target.exemplars.iter().any(|e| in_crop(e, target_crop)) {
            continue;
        }

        let shift_dots = |s: &Scene, c: &Crop, offset: f64| {
            s.dots
                .iter()
                .filter(|d| d.x >= c.x0 as f64 && d.x < (c.x0 + c.width) as f64)
                .map(|d| DotAnnotation {
                    x: d.x - c.x0 as f64 + offset,
                    ..*d
                })
                .collect::<Vec<_>>()
        };
        let mut dots = shift_dots(a, &ca, 0.0);
        dots.extend(shift_dots(b, &cb, ca.width as f64));

        let offset = match target_side {
            Region::Left => 0.0,
            Region::Right => ca.width as f64,
        };
        let exemplars = target
            .exemplars
            .iter()
            .filter(|e| in_crop(e, target_crop))
            .map(|e| ExemplarBox {
                x0: e.x0 - target_crop.x0 as f64 + offset,
                x1: e.x1 - target_crop.x0 as f64 + offset,
                ..*e
            })
            .collect();

        let image = Volume3D::hconcat(
            &a.image.crop_columns(ca.x0, ca.x0 + ca.width),
            &b.image.crop_columns(cb.x0, cb.x0 + cb.width),
        )?;
        let scene = Scene {
            image,
            dots,
            exemplars,
            target_class: target.target_class,
            interest_region: Some(target_side),
            meta: SceneMeta {
                seed,
                seam_x: Some(ca.width),
                source_classes: Some([a.target_class, b.target_class]),
            },
        };
        scene.validate()?;
        return Ok(scene);
    }
    Err(Error::CropExhausted {
        attempts: CROP_ATTEMPTS,
        reason: format!(
            "no crop of the {:?} source kept any of its {} exemplars",
            target_side,
            target.exemplars.len()
        ),
    })
}

/// Ground-truth density at the feature-grid resolution `floor(H/r) x floor(W/r)`.
pub fn build_gt_density(scene: &Scene, r: usize, sigma: f64) -> Result<Grid2D> {
    if r == 0 || scene.height() < r || scene.width() < r {
        return Err(Error::InvalidArgument(format!("cell size {r} does not fit the scene")));
    }
    let (h, w) = (scene.height() / r, scene.width() / r);
    let mut grid = Grid2D::zeros(h, w);
    for d in scene.target_dots() {
        let row = ((d.y / r as f64).floor() as usize).min(h - 1);
        let col = ((d.x / r as f64).floor() as usize).min(w - 1);
        grid.add_at(row, col, 1.0);
    }
    gaussian_smooth(&grid, sigma)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    version: u32,
    target_class: u32,
    interest_region: Option<Region>,
    dots: Vec<DotAnnotation>,
    exemplars: Vec<ExemplarBox>,
    meta: SceneMeta,
}

pub const IMAGE_FILE: &str = "image.ppm";
pub const ANNOTATION_FILE: &str = "annotations.json";

/// Parses a JSON document, mapping failures to a parse error that names the
/// offending field path and byte offset.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, file: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        let offset = line_col_to_offset(text, inner.line(), inner.column());
        Error::parse(file, field, offset, inner.to_string())
    })
}

fn line_col_to_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    netpbm::write_ppm(&dir.join(IMAGE_FILE), &scene.image)?;
    let ann = AnnotationFile {
        version: ANNOTATION_VERSION,
        target_class: scene.target_class,
        interest_region: scene.interest_region,
        dots: scene.dots.clone(),
        exemplars: scene.exemplars.clone(),
        meta: scene.meta.clone(),
    };
    let path = dir.join(ANNOTATION_FILE);
    let text = serde_json::to_string_pretty(&ann).expect("annotations serialize");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let image = netpbm::read_ppm(&dir.join(IMAGE_FILE))?;
    let path = dir.join(ANNOTATION_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file = path.display().to_string();
    let ann: AnnotationFile = parse_json(&text, &file)?;
    if ann.version != ANNOTATION_VERSION {
        return Err(Error::parse(file, "version", 0, format!("unsupported version {}", ann.version)));
    }
    let scene = Scene {
        image,
        dots: ann.dots,
        exemplars: ann.exemplars,
        target_class: ann.target_class,
        interest_region: ann.interest_region,
        meta: ann.meta,
    };
    scene
        .validate()
        .map_err(|e| Error::parse(file, "annotations", 0, e.to_string()))?;
    Ok(scene)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Scene directory relative to the manifest.
    pub dir: String,
    pub split: Split,
    pub kind: SceneKind,
    pub target_class: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_classes: Option<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
    pub scenes: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn select(&self, split: Split, kind: SceneKind) -> impl Iterator<Item = &ManifestEntry> {
        self.scenes
            .iter()
            .filter(move |e| e.split == split && e.kind == kind)
    }

    pub fn save(&self, data_dir: &Path) -> Result<()> {
        let path = data_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(data_dir: &Path) -> Result<Manifest> {
        let path = data_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        parse_json(&text, &path.display().to_string())
    }

    pub fn scene_dir(data_dir: &Path, entry: &ManifestEntry) -> PathBuf {
        data_dir.join(&entry.dir)
    }
}
