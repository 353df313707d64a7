//! Pipeline configuration: a strictly parsed TOML file with defaults for
//! every key.

use std::path::{Path, PathBuf};

use maskcount_core::nn::{downsampling_stages, OptimizerKind, TrainCfg};
use maskcount_core::numerics::derive_seed;
use maskcount_core::pseudo::PseudoCfg;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Root seed; every stage draws from a named sub-stream of it.
    pub seed: u64,
    /// Cell size of the similarity grid in pixels.
    pub r: usize,
    /// Feature channels.
    pub d: usize,
    /// Exemplar crops are resampled to `exemplar_size` squared pixels.
    pub exemplar_size: usize,
    /// Gaussian width of ground-truth density, in cells.
    pub sigma: f64,
    pub k_range: [usize; 2],
    pub kmeans_restarts: usize,
    /// Binarization threshold for segmenter output.
    pub tau: f64,
    pub canvas: Canvas,
    pub gen: GenCounts,
    pub train: TrainSection,
    pub train_seg: TrainSection,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

/// Scenes generated per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub train_multi: usize,
    pub val_multi: usize,
    pub test_multi: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub models_dir: PathBuf,
    pub reports_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            r: 8,
            d: 16,
            exemplar_size: 32,
            sigma: 2.0,
            k_range: [2, 6],
            kmeans_restarts: 1,
            tau: 0.5,
            canvas: Canvas::default(),
            gen: GenCounts::default(),
            train: TrainSection::default(),
            train_seg: TrainSection {
                epochs: 30,
                ..TrainSection::default()
            },
            paths: Paths::default(),
        }
    }
}

impl Default for Canvas {
    fn default() -> Self {
        Self { height: 128, width: 128 }
    }
}

impl Default for GenCounts {
    fn default() -> Self {
        Self {
            train: 100,
            val: 30,
            test: 30,
            train_multi: 200,
            val_multi: 50,
            test_multi: 50,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainCfg::default();
        Self {
            epochs: 40,
            lr: base.lr,
            batch: base.batch,
            clip_norm: base.clip_norm,
            optimizer: base.optimizer,
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            models_dir: "models".into(),
            reports_dir: "reports".into(),
        }
    }
}

/// Everything that influences artifacts; paths are left out so relocated
/// runs stay comparable.
#[derive(Serialize)]
struct FingerprintView<'a> {
    seed: u64,
    r: usize,
    d: usize,
    exemplar_size: usize,
    sigma: f64,
    k_range: [usize; 2],
    kmeans_restarts: usize,
    tau: f64,
    canvas: &'a Canvas,
    gen: &'a GenCounts,
    train: &'a TrainSection,
    train_seg: &'a TrainSection,
}

impl Config {
    /// Reads and validates a config file; relative paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.data_dir, &mut cfg.paths.models_dir, &mut cfg.paths.reports_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if downsampling_stages(self.r).is_err() {
            return bad(format!("r = {} must be a power of two >= 2", self.r));
        }
        if self.d == 0 || self.exemplar_size == 0 {
            return bad("d and exemplar_size must be positive".into());
        }
        let Canvas { height, width } = self.canvas;
        if height < 64 || width < 64 || height % self.r != 0 || width % self.r != 0 {
            return bad(format!("canvas {height}x{width} must be at least 64x64 and divisible by r = {}", self.r));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma = {} must be positive", self.sigma));
        }
        let [k_min, k_max] = self.k_range;
        if k_min < 1 || k_min > k_max {
            return bad(format!("k_range [{k_min}, {k_max}] must satisfy 1 <= kmin <= kmax"));
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau = {} must lie in [0, 1]", self.tau));
        }
        let g = &self.gen;
        for (name, singles, multi) in [
            ("train", g.train, g.train_multi),
            ("val", g.val, g.val_multi),
            ("test", g.test, g.test_multi),
        ] {
            if multi > 0 && singles < 2 {
                return bad(format!("{name}_multi > 0 needs at least 2 {name} single scenes"));
            }
        }
        for (name, t) in [("train", &self.train), ("train_seg", &self.train_seg)] {
            self.train_cfg(t, name)
                .check()
                .map_err(|e| CliError::Config(format!("[{name}] {e}")))?;
        }
        Ok(())
    }

    /// sha256 over the canonical JSON form of every result-affecting key.
    pub fn fingerprint(&self) -> String {
        let view = FingerprintView {
            seed: self.seed,
            r: self.r,
            d: self.d,
            exemplar_size: self.exemplar_size,
            sigma: self.sigma,
            k_range: self.k_range,
            kmeans_restarts: self.kmeans_restarts,
            tau: self.tau,
            canvas: &self.canvas,
            gen: &self.gen,
            train: &self.train,
            train_seg: &self.train_seg,
        };
        let json = serde_json::to_vec(&view).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_cfg(&self, section: &TrainSection, stream: &str) -> TrainCfg {
        TrainCfg {
            epochs: section.epochs,
            lr: section.lr,
            batch: section.batch,
            seed: derive_seed(self.seed, &format!("{stream}/shuffle")),
            clip_norm: section.clip_norm,
            optimizer: section.optimizer,
        }
    }

    pub fn pseudo_cfg(&self) -> PseudoCfg {
        PseudoCfg {
            k_min: self.k_range[0],
            k_max: self.k_range[1],
            sigma: self.sigma,
            exemplar_size: self.exemplar_size,
            restarts: self.kmeans_restarts,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}
