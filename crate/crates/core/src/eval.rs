//! Counting metrics, region-split evaluation of multi-class scenes, masking
//! latency benchmarks and embedding distance statistics.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::counter::{count, scene_exemplars, CounterModel};
use crate::error::{Error, Result};
use crate::numerics::{FeatureVec, Grid2D, SeededRng};
use crate::pseudo::{embedding_points, kmeans_restarts, mask_from_clusters};
use crate::scene::{Region, Scene};
use crate::segmenter::{binarize, SegModel};

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const TIMING_WARMUP: usize = 2;
/// Each (scene, method) is timed this many times on identical inputs and the
/// fastest run is kept.
pub const TIMING_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountOutcome {
    pub scene_id: String,
    /// Ground-truth count.
    pub y: f64,
    /// Predicted count on the interest area.
    pub yhat: f64,
    /// Predicted count on the non-interest area (0 for single-class scenes).
    pub yhat_bar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl CountOutcome {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("y", self.y), ("yhat", self.yhat), ("yhat_bar", self.yhat_bar)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "outcome {}: {name} = {v} must be finite and non-negative",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }
}

/// `|y - yhat| + yhat_bar` for multi-class scenes, `|y - yhat|` otherwise.
pub fn scene_error(o: &CountOutcome, multiclass: bool) -> f64 {
    let e = (o.y - o.yhat).abs();
    if multiclass {
        e + o.yhat_bar
    } else {
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when every scene has `y = 0`.
    pub nae: Option<f64>,
    pub sre: Option<f64>,
    /// Scenes left out of NAE/SRE because `y = 0`.
    pub excluded_nae: usize,
    pub mean_time_s: Option<f64>,
}

pub fn aggregate(outcomes: &[CountOutcome], multiclass: bool) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero outcomes".into()));
    }
    let n = outcomes.len() as f64;
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    let (mut nae_sum, mut sre_sum, mut kept) = (0.0, 0.0, 0usize);
    let mut times = Vec::new();
    for o in outcomes {
        o.validate()?;
        let e = scene_error(o, multiclass);
        abs_sum += e;
        sq_sum += e * e;
        if o.y > 0.0 {
            nae_sum += e / o.y;
            sre_sum += e * e / o.y;
            kept += 1;
        }
        times.extend(o.wall_time_s);
    }
    let mean_time_s = (times.len() == outcomes.len()).then(|| times.iter().sum::<f64>() / n);
    Ok(MetricsReport {
        n: outcomes.len(),
        mae: abs_sum / n,
        rmse: (sq_sum / n).sqrt(),
        nae: (kept > 0).then(|| nae_sum / kept as f64),
        sre: (kept > 0).then(|| (sre_sum / kept as f64).sqrt()),
        excluded_nae: outcomes.len() - kept,
        mean_time_s,
    })
}

/// Splits density mass at the seam recorded for the scene:
/// `(interest side, other side)`.
pub fn split_count_by_region(d: &Grid2D, scene: &Scene, r: usize) -> Result<(f64, f64)> {
    let region = scene
        .interest_region
        .ok_or_else(|| Error::InvalidArgument("scene has no interest region".into()))?;
    let seam_x = scene
        .meta
        .seam_x
        .ok_or_else(|| Error::InvalidArgument("multi-class scene has no recorded seam".into()))?;
    if r == 0 || seam_x % r != 0 {
        return Err(Error::InvalidArgument(format!("seam {seam_x}px is not a multiple of cell size {r}")));
    }
    let seam = seam_x / r;
    if seam > d.width() {
        return Err(Error::shape("split_count_by_region", format!("seam <= {}", d.width()), seam));
    }
    let (mut interest, mut other) = (0.0, 0.0);
    for row in 0..d.height() {
        for col in 0..d.width() {
            if (col < seam) == (region == Region::Left) {
                interest += d.get(row, col);
            } else {
                other += d.get(row, col);
            }
        }
    }
    Ok((interest, other))
}

/// Outcome for one predicted density map; multi-class scenes are split at
/// their seam, single-class scenes count everything as interest.
pub fn outcome_for(scene_id: &str, scene: &Scene, density: &Grid2D, r: usize) -> Result<CountOutcome> {
    let (yhat, yhat_bar) = if scene.is_multiclass() {
        split_count_by_region(density, scene, r)?
    } else {
        (count(density), 0.0)
    };
    Ok(CountOutcome {
        scene_id: scene_id.to_string(),
        y: scene.gt_count() as f64,
        yhat,
        yhat_bar,
        wall_time_s: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub metrics: MetricsReport,
    pub outcomes: Vec<CountOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub fingerprint: Option<String>,
    pub split: String,
    pub rows: Vec<ReportRow>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    n: usize,
    mae: f64,
    rmse: f64,
    nae: Option<f64>,
    sre: Option<f64>,
    mean_time_s: Option<f64>,
    excluded_nae: usize,
}

impl Report {
    pub fn row(&self, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            let m = &r.metrics;
            w.serialize(CsvRow {
                method: &r.method,
                n: m.n,
                mae: m.mae,
                rmse: m.rmse,
                nae: m.nae,
                sre: m.sre,
                mean_time_s: m.mean_time_s,
                excluded_nae: m.excluded_nae,
            })
            .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(REPORT_JSON);
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join(REPORT_CSV);
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))
    }

    pub fn load(dir: &Path) -> Result<Report> {
        let path = dir.join(REPORT_JSON);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        crate::scene::parse_json(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingColumn {
    pub method: String,
    /// Mean seconds spent producing the mask (0 for the unmasked path).
    pub mask_s: f64,
    /// Mean seconds for masking plus counting.
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub scenes: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub columns: Vec<TimingColumn>,
}

impl TimingTable {
    pub fn column(&self, method: &str) -> Option<&TimingColumn> {
        self.columns.iter().find(|c| c.method == method)
    }
}

pub fn kmeans_column(k: usize) -> String {
    format!("kmeans:{k}")
}

/// `(mask, total)` seconds of the fastest of [`TIMING_REPEATS`] runs.
fn fastest(mut run: impl FnMut() -> Result<(f64, f64)>) -> Result<(f64, f64)> {
    let mut best = run()?;
    for _ in 1..TIMING_REPEATS {
        let (mask, total) = run()?;
        best = (best.0.min(mask), best.1.min(total));
    }
    Ok(best)
}

/// Mean per-scene latency of unmasked counting, K-Means masking at each `k`
/// and segmenter masking. Runs sequentially; the first [`TIMING_WARMUP`]
/// scenes are excluded from the means.
#[allow(clippy::too_many_arguments)]
pub fn bench_timing(
    counter: &CounterModel,
    seg: &SegModel,
    scenes: &[Scene],
    k_range: (usize, usize),
    restarts: usize,
    tau: f64,
    exemplar_size: usize,
    rng: &SeededRng,
) -> Result<TimingTable> {
    if scenes.len() <= TIMING_WARMUP {
        return Err(Error::InvalidArgument(format!(
            "timing needs more than {TIMING_WARMUP} scenes, got {}",
            scenes.len()
        )));
    }
    if k_range.0 < 1 || k_range.0 > k_range.1 {
        return Err(Error::InvalidArgument(format!("bad k range [{}, {}]", k_range.0, k_range.1)));
    }
    let r = counter.r();
    let ks: Vec<usize> = (k_range.0..=k_range.1).collect();
    let mut names = vec!["none".to_string()];
    names.extend(ks.iter().map(|&k| kmeans_column(k)));
    names.push("segmenter".to_string());
    let mut mask_s = vec![0.0; names.len()];
    let mut total_s = vec![0.0; names.len()];

    for (i, scene) in scenes.iter().enumerate() {
        let measured = i >= TIMING_WARMUP;
        let mut record = |col: usize, (mask, total): (f64, f64)| {
            if measured {
                mask_s[col] += mask;
                total_s[col] += total;
            }
        };

        record(
            0,
            fastest(|| {
                let t = Instant::now();
                let ex = scene_exemplars(scene, exemplar_size);
                std::hint::black_box(counter.predict_density(&scene.image, &ex, None)?);
                Ok((0.0, t.elapsed().as_secs_f64()))
            })?,
        );

        for (j, &k) in ks.iter().enumerate() {
            record(
                1 + j,
                fastest(|| {
                    let mut krng = rng.substream(&format!("{i}/{k}"));
                    let t = Instant::now();
                    let points = embedding_points(scene, r)?;
                    let cr = kmeans_restarts(&points, k, restarts, &mut krng)?;
                    let mask = mask_from_clusters(&cr, scene.height() / r, scene.width() / r)?;
                    let masked_at = t.elapsed().as_secs_f64();
                    let ex = scene_exemplars(scene, exemplar_size);
                    std::hint::black_box(counter.predict_density(&scene.image, &ex, Some(&mask))?);
                    Ok((masked_at, t.elapsed().as_secs_f64()))
                })?,
            );
        }

        record(
            names.len() - 1,
            fastest(|| {
                let t = Instant::now();
                let ex = scene_exemplars(scene, exemplar_size);
                let mask = binarize(&seg.predict_mask(&scene.image, &ex)?, tau);
                let masked_at = t.elapsed().as_secs_f64();
                std::hint::black_box(counter.predict_density(&scene.image, &ex, Some(&mask))?);
                Ok((masked_at, t.elapsed().as_secs_f64()))
            })?,
        );
    }

    let m = (scenes.len() - TIMING_WARMUP) as f64;
    Ok(TimingTable {
        scenes: scenes.len() - TIMING_WARMUP,
        warmup: TIMING_WARMUP,
        repeats: TIMING_REPEATS,
        columns: names
            .into_iter()
            .zip(mask_s.iter().zip(&total_s))
            .map(|(method, (ms, ts))| TimingColumn {
                method,
                mask_s: ms / m,
                total_s: ts / m,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub intra: f64,
    pub inter: f64,
}

/// Mean distance of each embedding to its class centre, and mean distance
/// from each class centre to the nearest other centre.
pub fn distance_stats(embeddings: &[(FeatureVec, u32)]) -> Result<DistanceStats> {
    let mut classes: Vec<u32> = embeddings.iter().map(|(_, c)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "distance statistics need at least 2 classes, got {}",
            classes.len()
        )));
    }
    let dim = embeddings[0].0.dim();
    if let Some((v, _)) = embeddings.iter().find(|(v, _)| v.dim() != dim) {
        return Err(Error::shape("distance_stats", dim, v.dim()));
    }
    let centers: Vec<FeatureVec> = classes
        .iter()
        .map(|&c| {
            let members: Vec<FeatureVec> = embeddings.iter().filter(|(_, k)| *k == c).map(|(v, _)| v.clone()).collect();
            FeatureVec::mean_of(&members)
        })
        .collect::<Result<_>>()?;
    let dist = |a: &[f64], b: &[f64]| crate::numerics::squared_distance(a, b).sqrt();
    let intra = embeddings
        .iter()
        .map(|(v, c)| {
            let idx = classes.binary_search(c).expect("class collected above");
            dist(v.as_slice(), centers[idx].as_slice())
        })
        .sum::<f64>()
        / embeddings.len() as f64;
    let inter = centers
        .iter()
        .enumerate()
        .map(|(i, a)| {
            centers
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| dist(a.as_slice(), b.as_slice()))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / centers.len() as f64;
    Ok(DistanceStats { intra, inter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(y: f64, yhat: f64, yhat_bar: f64) -> CountOutcome {
        CountOutcome {
            scene_id: "s".into(),
            y,
            yhat,
            yhat_bar,
            wall_time_s: None,
        }
    }

    #[test]
    fn scene_error_examples() {
        assert_eq!(scene_error(&outcome(10.0, 8.0, 3.0), true), 5.0);
        assert_eq!(scene_error(&outcome(10.0, 8.0, 3.0), false), 2.0);
        assert_eq!(scene_error(&outcome(7.0, 7.0, 0.0), true), 0.0);
        assert_eq!(scene_error(&outcome(4.0, 4.0, 2.5), true), 2.5);
    }

    #[test]
    fn aggregate_hand_fixtures() {
        let r = aggregate(&[outcome(1.0, 3.0, 0.0), outcome(1.0, 5.0, 0.0)], false).unwrap();
        assert_eq!((r.n, r.mae, r.nae), (2, 3.0, Some(3.0)));
        assert_eq!(r.rmse, 10f64.sqrt());
        assert_eq!(r.sre, Some(10f64.sqrt()));
        assert_eq!(r.excluded_nae, 0);
        assert_eq!(r.mean_time_s, None);

        let one = aggregate(&[outcome(10.0, 5.0, 0.0)], false).unwrap();
        assert_eq!((one.mae, one.rmse, one.nae), (5.0, 5.0, Some(0.5)));
        assert_eq!(one.sre, Some(2.5f64.sqrt()));

        let perfect = aggregate(&[outcome(3.0, 3.0, 0.0), outcome(8.0, 8.0, 0.0)], true).unwrap();
        assert_eq!((perfect.mae, perfect.rmse, perfect.nae, perfect.sre), (0.0, 0.0, Some(0.0), Some(0.0)));
    }

    #[test]
    fn aggregate_excludes_zero_counts_from_relative_metrics() {
        let r = aggregate(&[outcome(0.0, 2.0, 0.0), outcome(4.0, 2.0, 0.0)], false).unwrap();
        assert_eq!(r.mae, 2.0);
        assert_eq!(r.excluded_nae, 1);
        assert_eq!(r.nae, Some(0.5));
        assert_eq!(r.sre, Some(1.0));
        let all_zero = aggregate(&[outcome(0.0, 1.0, 0.0)], false).unwrap();
        assert_eq!((all_zero.nae, all_zero.sre, all_zero.excluded_nae), (None, None, 1));
    }

    #[test]
    fn aggregate_rejects_empty_and_invalid() {
        assert!(aggregate(&[], false).is_err());
        assert!(aggregate(&[outcome(-1.0, 0.0, 0.0)], false).is_err());
        assert!(aggregate(&[outcome(1.0, f64::NAN, 0.0)], false).is_err());
    }

    #[test]
    fn aggregate_mean_time_only_when_every_outcome_is_timed() {
        let mut a = outcome(1.0, 1.0, 0.0);
        let mut b = outcome(1.0, 1.0, 0.0);
        a.wall_time_s = Some(0.5);
        assert_eq!(aggregate(&[a.clone(), b.clone()], false).unwrap().mean_time_s, None);
        b.wall_time_s = Some(1.5);
        assert_eq!(aggregate(&[a, b], false).unwrap().mean_time_s, Some(1.0));
    }

    fn seam_scene(seam_x: usize, region: Region) -> Scene {
        let cat = crate::scene::class_catalog();
        let mut s =
            crate::scene::generate_single_class_scene(&cat[0], 0, 128, 128, &mut SeededRng::new(1)).unwrap();
        s.interest_region = Some(region);
        s.meta.seam_x = Some(seam_x);
        s
    }

    #[test]
    fn split_count_examples() {
        let d = Grid2D::filled(16, 16, 1.0);
        assert_eq!(split_count_by_region(&d, &seam_scene(80, Region::Left), 8).unwrap(), (160.0, 96.0));
        assert_eq!(split_count_by_region(&d, &seam_scene(80, Region::Right), 8).unwrap(), (96.0, 160.0));
        assert_eq!(split_count_by_region(&d, &seam_scene(64, Region::Left), 8).unwrap(), (128.0, 128.0));
        let mut left_only = Grid2D::zeros(16, 16);
        left_only.set(3, 2, 4.0);
        assert_eq!(split_count_by_region(&left_only, &seam_scene(80, Region::Left), 8).unwrap(), (4.0, 0.0));
    }

    #[test]
    fn split_count_errors() {
        let d = Grid2D::filled(16, 16, 1.0);
        let mut single = seam_scene(80, Region::Left);
        single.interest_region = None;
        assert!(split_count_by_region(&d, &single, 8).is_err());
        assert!(split_count_by_region(&d, &seam_scene(84, Region::Left), 8).is_err());
        assert!(split_count_by_region(&d, &seam_scene(256, Region::Left), 8).is_err());
    }

    #[test]
    fn distance_stats_examples() {
        let v = |x: f64, y: f64| FeatureVec(vec![x, y]);
        let s = distance_stats(&[(v(0.0, 0.0), 0), (v(2.0, 0.0), 0), (v(10.0, 0.0), 1)]).unwrap();
        assert_eq!(s.intra, 2.0 / 3.0);
        assert_eq!(s.inter, 9.0);
        let tight = distance_stats(&[(v(1.0, 1.0), 0), (v(1.0, 1.0), 0), (v(4.0, 5.0), 1)]).unwrap();
        assert_eq!(tight, DistanceStats { intra: 0.0, inter: 5.0 });
        assert!(distance_stats(&[(v(0.0, 0.0), 3), (v(1.0, 0.0), 3)]).is_err());
        assert!(distance_stats(&[(v(0.0, 0.0), 0), (FeatureVec(vec![1.0]), 1)]).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let rows = vec![ReportRow {
            method: "none".into(),
            metrics: aggregate(&[outcome(0.0, 2.0, 0.0), outcome(4.0, 2.0, 1.0)], true).unwrap(),
            outcomes: vec![],
        }];
        let report = Report {
            version: REPORT_VERSION,
            fingerprint: None,
            split: "test".into(),
            rows,
        };
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("method,n,mae,rmse,nae,sre,mean_time_s,excluded_nae"));
        assert_eq!(lines.next(), Some("none,2,2.5,2.5495097567963922,0.75,1.5,,1"));
        assert_eq!(lines.next(), None);
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = Report {
            version: REPORT_VERSION,
            fingerprint: Some("abc".into()),
            split: "val".into(),
            rows: vec![ReportRow {
                method: "kmeans".into(),
                metrics: aggregate(&[outcome(3.0, 2.9, 0.1)], true).unwrap(),
                outcomes: vec![outcome(3.0, 2.9, 0.1)],
            }],
        };
        report.save(dir.path()).unwrap();
        assert_eq!(Report::load(dir.path()).unwrap(), report);
        assert!(dir.path().join(REPORT_CSV).exists());
    }

    fn outcomes_strategy() -> impl Strategy<Value = Vec<CountOutcome>> {
        prop::collection::vec((0.0..50.0f64, 0.0..50.0f64, 0.0..10.0f64), 1..30)
            .prop_map(|v| v.into_iter().map(|(y, a, b)| outcome(y, a, b)).collect())
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(outcomes in outcomes_strategy(), multi in any::<bool>()) {
            let r = aggregate(&outcomes, multi).unwrap();
            prop_assert!(r.rmse >= r.mae * (1.0 - 1e-12));
            prop_assert!(r.mae >= 0.0);
        }

        #[test]
        fn single_outcome_identity(y in 0.0..50.0f64, a in 0.0..50.0f64, b in 0.0..10.0f64) {
            let o = outcome(y, a, b);
            let r = aggregate(std::slice::from_ref(&o), true).unwrap();
            let e = scene_error(&o, true);
            prop_assert_eq!(r.mae, e);
            prop_assert!((r.rmse - e).abs() <= 1e-12 * e.max(1.0));
        }

        #[test]
        fn scene_error_scales_linearly(y in 0.0..50.0f64, a in 0.0..50.0f64, b in 0.0..10.0f64, l in 0.1..10.0f64) {
            let e = scene_error(&outcome(y, a, b), true);
            let scaled = scene_error(&outcome(l * y, l * a, l * b), true);
            prop_assert!((scaled - l * e).abs() <= 1e-9 * (1.0 + l * e));
        }

        #[test]
        fn split_partitions_mass(values in prop::collection::vec(0.0..5.0f64, 256), seam in 0usize..=16, left in any::<bool>()) {
            let d = Grid2D::from_vec(16, 16, values).unwrap();
            let region = if left { Region::Left } else { Region::Right };
            let (a, b) = split_count_by_region(&d, &seam_scene(seam * 8, region), 8).unwrap();
            prop_assert!((a + b - count(&d)).abs() <= 1e-9);
        }

        #[test]
        fn intra_zero_iff_classes_are_single_points(
            a in prop::collection::vec(-5.0..5.0f64, 2),
            b in prop::collection::vec(-5.0..5.0f64, 2),
            jitter in 0.0..1.0f64,
        ) {
            let pts = vec![
                (FeatureVec(a.clone()), 0),
                (FeatureVec(vec![a[0] + jitter, a[1]]), 0),
                (FeatureVec(b), 1),
            ];
            let s = distance_stats(&pts).unwrap();
            prop_assert_eq!(s.intra == 0.0, jitter == 0.0);
        }
    }
}
