//! End-to-end acceptance checks. Each check prints one `[PASS]`/`[FAIL]`
//! line straight to stdout, so the lines show up without `--nocapture`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use maskcount::commands::Layout;
use maskcount::config::Config;
use maskcount_core::counter::{apply_mask, count, scene_exemplars, CounterModel, TrainSample};
use maskcount_core::eval::{aggregate, distance_stats, CountOutcome, Report, TimingTable};
use maskcount_core::gradcheck::check_gradients;
use maskcount_core::nn::ParamSet;
use maskcount_core::numerics::{FeatureVec, Grid2D, SeededRng, Volume3D};
use maskcount_core::pseudo::{argmin_k, kmeans, PseudoLabelFile};
use maskcount_core::scene::{build_gt_density, class_catalog, generate_single_class_scene};
use maskcount_core::segmenter::{SegModel, SegSample};
use rand::Rng;

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").and_then(|_| out.flush()).expect("stdout");
}

fn verdict(n: u32, pass: bool, detail: &str) -> bool {
    emit(&format!("[{}] criterion {n}: {detail}", if pass { "PASS" } else { "FAIL" }));
    pass
}

fn random_grid(h: usize, w: usize, rng: &mut SeededRng) -> Grid2D {
    Grid2D::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap()
}

fn random_image(h: usize, w: usize, rng: &mut SeededRng) -> Volume3D {
    Volume3D::from_vec(3, h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn criterion_1_masking_identity() {
    let mut rng = SeededRng::new(1);
    let mut exact = true;
    for _ in 0..1000 {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let s = random_grid(h, w, &mut rng);
        let masked = apply_mask(&s, &Grid2D::filled(h, w, 1.0)).unwrap();
        exact &= masked.values().iter().zip(s.values()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let cat = class_catalog();
    let mut max_diff: f64 = 0.0;
    for seed in 0..5 {
        let scene = generate_single_class_scene(&cat[seed as usize], seed as u32, 128, 128, &mut SeededRng::new(seed)).unwrap();
        let model = CounterModel::new(8, 16, &mut SeededRng::new(100 + seed)).unwrap();
        let ex = scene_exemplars(&scene, 32);
        let plain = model.predict_density(&scene.image, &ex, None).unwrap();
        let ones = Grid2D::filled(plain.height(), plain.width(), 1.0);
        let masked = model.predict_density(&scene.image, &ex, Some(&ones)).unwrap();
        for (a, b) in plain.values().iter().zip(masked.values()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    let pass = exact && max_diff <= 1e-12;
    assert!(verdict(1, pass, &format!("bit-exact on 1000 grids: {exact}; density max diff {max_diff:e}")));
}

#[test]
fn criterion_2_count_conservation() {
    let cat = class_catalog();
    let mut rng = SeededRng::new(2);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let class = rng.gen_range(0..cat.len());
        let scene = generate_single_class_scene(&cat[class], class as u32, 128, 128, &mut rng.fork()).unwrap();
        let sigma = [1.0, 2.0, 3.0][i % 3];
        let d = build_gt_density(&scene, 8, sigma).unwrap();
        worst = worst.max((count(&d) - scene.gt_count() as f64).abs());
    }
    assert!(verdict(2, worst <= 1e-6, &format!("max |count - dots| over 100 scenes = {worst:e}")));
}

/// Runs the oracle at fresh random points until `points` of them keep every
/// ReLU on the same side under the probes; returns (points checked, all passed).
fn gradient_points<M>(points: usize, make: impl Fn(u64) -> M, check: impl Fn(&M) -> Option<bool>) -> (usize, bool) {
    let (mut checked, mut ok) = (0, true);
    for seed in 0..200 {
        if let Some(passed) = check(&make(seed)) {
            checked += 1;
            ok &= passed;
            if checked == points {
                break;
            }
        }
    }
    (checked, ok)
}

#[test]
fn criterion_3_gradient_oracle() {
    let start = Instant::now();
    let (step, rtol, atol) = (1e-4, 1e-4, 1e-6);
    let counter = gradient_points(
        3,
        |seed| {
            let mut rng = SeededRng::new(300 + seed);
            let model = CounterModel::new(4, 3, &mut rng).unwrap();
            let exemplars = (0..2)
                .map(|_| maskcount_core::counter::Exemplar { crop: random_image(8, 8, &mut rng) })
                .collect();
            let image = random_image(16, 12, &mut rng);
            let target = Grid2D::from_vec(4, 3, (0..12).map(|_| rng.gen_range(0.0..0.5)).collect()).unwrap();
            let mut mask = Grid2D::filled(4, 3, 1.0);
            if seed % 2 == 1 {
                mask.set(0, 0, 0.0);
                mask.set(2, 1, 0.0);
            }
            let sample = TrainSample { id: "g".into(), image, exemplars, target, mask: Some(mask) };
            (model, sample)
        },
        |(model, sample)| {
            let (_, analytic) = model.gradients(sample).unwrap();
            let with = |p: &ParamSet| {
                let mut m = model.clone();
                m.params = p.clone();
                m
            };
            check_gradients(
                &model.params,
                &analytic,
                |p| with(p).sample_loss(sample).unwrap(),
                |p| with(p).relu_pattern(sample).unwrap(),
                step,
                rtol,
                atol,
            )
            .map(|r| r.passed())
        },
    );
    let seg = gradient_points(
        3,
        |seed| {
            let mut rng = SeededRng::new(400 + seed);
            let model = SegModel::new(4, 3, &mut rng).unwrap();
            let exemplars = (0..2)
                .map(|_| maskcount_core::counter::Exemplar { crop: random_image(8, 8, &mut rng) })
                .collect();
            let image = random_image(16, 12, &mut rng);
            let target = Grid2D::from_vec(4, 3, (0..12).map(|_| f64::from(rng.gen_range(0..2u8))).collect()).unwrap();
            (model, SegSample { id: "g".into(), image, exemplars, target })
        },
        |(model, sample)| {
            let (_, analytic) = model.gradients(sample).unwrap();
            let with = |p: &ParamSet| {
                let mut m = model.clone();
                m.params = p.clone();
                m
            };
            check_gradients(
                &model.params,
                &analytic,
                |p| with(p).sample_loss(sample).unwrap(),
                |p| with(p).relu_pattern(sample),
                step,
                rtol,
                atol,
            )
            .map(|r| r.passed())
        },
    );
    let elapsed = start.elapsed();
    let pass = counter == (3, true) && seg == (3, true) && elapsed < Duration::from_secs(30);
    assert!(verdict(
        3,
        pass,
        &format!("count loss {counter:?}, seg loss {seg:?} (points, passed), {:.1}s", elapsed.as_secs_f64())
    ));
}

fn sse(points: &[FeatureVec], labels: &[usize], k: usize) -> f64 {
    let d = points[0].dim();
    let mut sums = vec![vec![0.0; d]; k];
    let mut sizes = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sizes[l] += 1;
        sums[l].iter_mut().zip(p.as_slice()).for_each(|(s, v)| *s += v);
    }
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            p.as_slice()
                .iter()
                .zip(&sums[l])
                .map(|(v, s)| (v - s / sizes[l] as f64).powi(2))
                .sum::<f64>()
        })
        .sum()
}

/// Optimal inertia by enumerating every labeling with non-empty clusters.
fn brute_force(points: &[FeatureVec], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for code in 0..k.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        if (0..k).all(|c| labels.contains(&c)) {
            best = best.min(sse(points, &labels, k));
        }
    }
    best
}

#[test]
fn criterion_4_kmeans_oracle() {
    let mut gen = SeededRng::new(4);
    let (mut within, mut monotone) = (0, true);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let n = gen.gen_range(2..=10);
        let d = gen.gen_range(1..=3);
        let k = gen.gen_range(1..=3usize).min(n);
        let pts: Vec<FeatureVec> =
            (0..n).map(|_| FeatureVec((0..d).map(|_| gen.gen_range(-5.0..5.0)).collect())).collect();
        let mut rng = gen.fork();
        let mut best = f64::INFINITY;
        for _ in 0..10 {
            let run = kmeans(&pts, k, &mut rng).unwrap();
            monotone &= run.inertia_history.windows(2).all(|w| w[1] <= w[0]);
            best = best.min(run.inertia);
        }
        let opt = brute_force(&pts, k);
        if best <= 1.05 * opt + 1e-12 {
            within += 1;
        }
        if opt > 0.0 {
            worst_ratio = worst_ratio.max(best / opt);
        }
    }
    let pass = within == 100 && monotone;
    assert!(verdict(
        4,
        pass,
        &format!("{within}/100 within 1.05x optimum (worst ratio {worst_ratio:.4}); monotone inertia: {monotone}")
    ));
}

fn outcome(y: f64, yhat: f64, yhat_bar: f64) -> CountOutcome {
    CountOutcome { scene_id: "s".into(), y, yhat, yhat_bar, wall_time_s: None }
}

#[test]
fn criterion_6_metric_oracle() {
    let mut fixtures = true;
    let two = aggregate(&[outcome(1.0, 3.0, 0.0), outcome(1.0, 5.0, 0.0)], false).unwrap();
    fixtures &= (two.mae, two.rmse, two.nae, two.sre) == (3.0, 10f64.sqrt(), Some(3.0), Some(10f64.sqrt()));
    let multi = aggregate(&[outcome(10.0, 8.0, 3.0)], true).unwrap();
    fixtures &= (multi.mae, multi.rmse, multi.nae, multi.sre) == (5.0, 5.0, Some(0.5), Some(2.5f64.sqrt()));
    let fg = aggregate(&[outcome(4.0, 4.0, 2.5)], true).unwrap();
    fixtures &= (fg.mae, fg.rmse) == (2.5, 2.5);
    let one = aggregate(&[outcome(10.0, 5.0, 0.0)], false).unwrap();
    fixtures &= (one.mae, one.rmse, one.nae) == (5.0, 5.0, Some(0.5));

    let mut rng = SeededRng::new(6);
    let mut ordered = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let list: Vec<CountOutcome> = (0..n)
            .map(|_| outcome(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0), rng.gen_range(0.0..20.0)))
            .collect();
        let multiclass = rng.gen_bool(0.5);
        let m = aggregate(&list, multiclass).unwrap();
        if m.rmse >= m.mae * (1.0 - 1e-12) {
            ordered += 1;
        }
    }
    let pass = fixtures && ordered == 1000;
    assert!(verdict(6, pass, &format!("hand fixtures exact: {fixtures}; RMSE >= MAE on {ordered}/1000 lists")));
}

#[test]
fn criterion_12_distance_statistics() {
    let v = |x: f64, y: f64| FeatureVec(vec![x, y]);
    let s = distance_stats(&[(v(0.0, 0.0), 0), (v(2.0, 0.0), 0), (v(10.0, 0.0), 1)]).unwrap();
    let pair = distance_stats(&[(v(1.0, 1.0), 0), (v(1.0, 1.0), 0), (v(4.0, 5.0), 1)]).unwrap();
    let pass = s.intra == 2.0 / 3.0 && s.inter == 9.0 && pair.intra == 0.0 && pair.inter == 5.0;
    assert!(verdict(12, pass, &format!("intra {} inter {}; identical-class case {:?}", s.intra, s.inter, pair)));
}

fn maskcount(dir: &Path, command: &str) -> Duration {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_maskcount"))
        .args([command, "--config"])
        .arg(dir.join("config.toml"))
        .env("RUST_LOG", "warn")
        .output()
        .expect("maskcount runs");
    assert!(
        out.status.success(),
        "maskcount {command} failed ({:?}):\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    start.elapsed()
}

fn layout(dir: &Path) -> Layout {
    Layout::new(&Config::load(&dir.join("config.toml")).unwrap())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn mae(report: &Report, method: &str) -> f64 {
    report.row(method).unwrap_or_else(|| panic!("report has no {method} row")).metrics.mae
}

/// Checks the artifact-level contract on every pseudo mask file.
fn verify_pseudo_masks(layout: &Layout, k_range: [usize; 2]) -> (usize, usize) {
    let (mut files, mut good) = (0, 0);
    for entry in std::fs::read_dir(layout.pseudo_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        files += 1;
        let file = PseudoLabelFile::load(&path).unwrap();
        let keys: Vec<usize> = file.per_k_loss.keys().copied().collect();
        let full_range = keys == (k_range[0]..=k_range[1]).collect::<Vec<_>>();
        if full_range && file.k_star.is_some() && file.k_star == argmin_k(&file.per_k_loss) {
            good += 1;
        }
    }
    (files, good)
}

/// The full pipeline is timed, so it must not share the CPU with the other
/// pipeline run.
static HEAVY: Mutex<()> = Mutex::new(());

const PIPELINE: [&str; 7] = ["gen", "train-base", "pseudo-label", "train-seg", "eval", "ablate", "bench-time"];

#[test]
fn pipeline_criteria() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("config.toml"), "seed = 0\n").unwrap();
    let cfg = Config::load(&dir.join("config.toml")).unwrap();
    let mut total = Duration::ZERO;
    for command in PIPELINE {
        let t = maskcount(dir, command);
        emit(&format!("  {command}: {:.1}s", t.as_secs_f64()));
        total += t;
    }
    let layout = layout(dir);
    let mut results = BTreeMap::new();

    let (files, good) = verify_pseudo_masks(&layout, cfg.k_range);
    results.insert(5, verdict(5, files > 0 && good == files, &format!("{good}/{files} pseudo mask files carry k* = argmin over the full k range")));

    let eval = Report::load(&layout.report_dir("eval")).unwrap();
    let (none, km, seg) = (mae(&eval, "none"), mae(&eval, "kmeans"), mae(&eval, "segmenter"));
    let n = eval.row("none").unwrap().metrics.n;
    let ok7 = n >= 50 && km <= 0.7 * none && seg <= none && total < Duration::from_secs(600);
    results.insert(
        7,
        verdict(
            7,
            ok7,
            &format!(
                "n = {n}; MAE none {none:.3}, kmeans {km:.3} (ratio {:.3}), segmenter {seg:.3}; pipeline {:.0}s",
                km / none,
                total.as_secs_f64()
            ),
        ),
    );

    let ablate = Report::load(&layout.report_dir("ablate")).unwrap();
    let dotbox = ["dotbox:mean", "dotbox:min", "dotbox:max"].map(|m| mae(&ablate, m));
    let best_dotbox = dotbox.iter().copied().fold(f64::INFINITY, f64::min);
    let (a_none, a_seg) = (mae(&ablate, "none"), mae(&ablate, "segmenter"));
    results.insert(
        8,
        verdict(
            8,
            a_seg < best_dotbox && best_dotbox < a_none,
            &format!("MAE segmenter {a_seg:.3} < best dotbox {best_dotbox:.3} (of {dotbox:.3?}) < none {a_none:.3}"),
        ),
    );

    let timing: serde_json::Value = read_json(&layout.report_dir("bench").join("timing.json"));
    let table: TimingTable = serde_json::from_value(timing["table"].clone()).unwrap();
    let mask_s = |m: &str| table.column(m).unwrap_or_else(|| panic!("no timing column {m}")).mask_s;
    let ks: Vec<f64> = (cfg.k_range[0]..=cfg.k_range[1]).map(|k| mask_s(&format!("kmeans:{k}"))).collect();
    let non_decreasing = 1 + ks.windows(2).filter(|w| w[1] >= w[0]).count();
    let seg_s = mask_s("segmenter");
    results.insert(
        9,
        verdict(
            9,
            seg_s < ks[0] && non_decreasing >= 4,
            &format!(
                "segmenter mask {:.3}ms vs kmeans {:.3?}ms; non-decreasing at {non_decreasing}/{} k values",
                seg_s * 1e3,
                ks.iter().map(|t| t * 1e3).collect::<Vec<_>>(),
                ks.len()
            ),
        ),
    );

    let seg_report: serde_json::Value = read_json(&layout.report_dir("eval").join("segmentation.json"));
    let iou = seg_report["mean_iou"].as_f64().unwrap_or(0.0);
    results.insert(10, verdict(10, iou >= 0.6, &format!("mean IoU on val multi-class scenes {iou:.3}")));

    let failed: Vec<_> = results.iter().filter(|(_, &ok)| !ok).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn artifact_files(root: &Path, layout: &Layout) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let skip = [layout.reports_dir.join("logs")];
    let mut stack = vec![layout.data_dir.clone(), layout.models_dir.clone(), layout.reports_dir.clone()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if skip.contains(&path) {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

const SMALL_CONFIG: &str = "seed = 11
[gen]
train = 12
val = 6
test = 6
train_multi = 16
val_multi = 6
test_multi = 8
[train]
epochs = 3
[train_seg]
epochs = 3
";

#[test]
fn criterion_11_determinism() {
    let _guard = HEAVY.lock().unwrap_or_else(|e| e.into_inner());
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let tmp = tempfile::tempdir().unwrap();
            std::fs::write(tmp.path().join("config.toml"), SMALL_CONFIG).unwrap();
            for command in ["gen", "train-base", "pseudo-label", "train-seg", "eval", "ablate"] {
                maskcount(tmp.path(), command);
            }
            let files = artifact_files(tmp.path(), &layout(tmp.path()));
            (tmp, files)
        })
        .collect();
    let (a, b) = (&runs[0].1, &runs[1].1);
    let differing: Vec<_> = a.iter().filter(|(p, bytes)| b.get(*p) != Some(bytes)).map(|(p, _)| p.clone()).collect();
    let models = a.keys().filter(|p| p.starts_with("models")).count();
    let masks = a.keys().filter(|p| p.to_string_lossy().contains("pseudo_masks")).count();
    let pass = a.len() == b.len() && differing.is_empty() && models >= 9 && masks > 0;
    assert!(verdict(
        11,
        pass,
        &format!("{} artifacts ({models} models, {masks} masks) compared; differing: {differing:?}", a.len())
    ));
}
