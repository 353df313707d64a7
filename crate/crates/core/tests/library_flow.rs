use maskcount_core::counter::{scene_exemplars, CounterModel};
use maskcount_core::eval::{
    aggregate, bench_timing, kmeans_column, outcome_for, split_count_by_region, TIMING_REPEATS, TIMING_WARMUP,
};
use maskcount_core::numerics::SeededRng;
use maskcount_core::pseudo::{argmin_k, optimal_k_mask, PseudoCfg, PseudoLabelFile, Strategy};
use maskcount_core::scene::{
    build_gt_density, class_catalog, generate_single_class_scene, load_scene, save_scene, synthesize_multiclass, Scene,
};
use maskcount_core::segmenter::{masked_density, predicted_binary_mask, SegModel};
use maskcount_core::Error;

const R: usize = 8;

fn pair(seed: u64) -> Scene {
    let cat = class_catalog();
    let mut rng = SeededRng::new(seed);
    let a = generate_single_class_scene(&cat[0], 0, 128, 128, &mut rng.fork()).unwrap();
    let b = generate_single_class_scene(&cat[3], 3, 128, 128, &mut rng.fork()).unwrap();
    for _ in 0..50 {
        match synthesize_multiclass(&a, &b, R, &mut rng.fork()) {
            Ok(s) => return s,
            Err(Error::CropExhausted { .. }) => continue,
            Err(e) => panic!("{e}"),
        }
    }
    panic!("no crop found");
}

#[test]
fn multiclass_scene_survives_disk_and_keeps_its_counts() {
    let scene = pair(1);
    let dir = tempfile::tempdir().unwrap();
    save_scene(&scene, dir.path()).unwrap();
    let back = load_scene(dir.path()).unwrap();
    assert_eq!(back, scene);

    let gt = build_gt_density(&back, R, 2.0).unwrap();
    let (interest, other) = split_count_by_region(&gt, &back, R).unwrap();
    assert!((interest + other - gt.sum()).abs() < 1e-9);
    assert!((gt.sum() - back.gt_count() as f64).abs() < 1e-6);
}

#[test]
fn untrained_models_run_the_whole_masking_path() {
    let scene = pair(2);
    let counter = CounterModel::new(R, 8, &mut SeededRng::new(3)).unwrap();
    let seg = SegModel::new(R, 8, &mut SeededRng::new(4)).unwrap();

    let cfg = PseudoCfg { k_min: 2, k_max: 4, sigma: 2.0, exemplar_size: 32, restarts: 1 };
    let result = optimal_k_mask(&counter, &scene, &cfg, &mut SeededRng::new(5)).unwrap();
    assert_eq!(result.strategy, Strategy::Kmeans);
    assert_eq!(result.per_k_loss.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
    assert_eq!(result.k_star, argmin_k(&result.per_k_loss));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.json");
    PseudoLabelFile::new("scene", &result, Some("fp".into())).save(&path).unwrap();
    let reloaded = PseudoLabelFile::load(&path).unwrap();
    assert_eq!(reloaded.fingerprint.as_deref(), Some("fp"));
    assert_eq!(reloaded.result("mask.json").unwrap().mask, result.mask);

    let binary = predicted_binary_mask(&seg, &scene, 0.5, 32).unwrap();
    assert!(binary.is_binary());
    let ex = scene_exemplars(&scene, 32);
    let density = masked_density(&counter, &seg, &scene, 0.5, 32).unwrap();
    assert_eq!(density, counter.predict_density(&scene.image, &ex, Some(&binary)).unwrap());

    let outcome = outcome_for("scene", &scene, &density, R).unwrap();
    let metrics = aggregate(&[outcome], true).unwrap();
    assert_eq!(metrics.mae, metrics.rmse);
}

#[test]
fn models_reload_to_identical_predictions() {
    let scene = pair(6);
    let ex = scene_exemplars(&scene, 32);
    let dir = tempfile::tempdir().unwrap();

    let counter = CounterModel::new(R, 8, &mut SeededRng::new(7)).unwrap();
    counter.save(&dir.path().join("c.json"), None).unwrap();
    let (back, fp) = CounterModel::load(&dir.path().join("c.json")).unwrap();
    assert_eq!(fp, None);
    assert_eq!(
        back.predict_density(&scene.image, &ex, None).unwrap(),
        counter.predict_density(&scene.image, &ex, None).unwrap()
    );

    let seg = SegModel::new(R, 8, &mut SeededRng::new(8)).unwrap();
    seg.save(&dir.path().join("s.json"), Some("abc".into())).unwrap();
    let (back, fp) = SegModel::load(&dir.path().join("s.json")).unwrap();
    assert_eq!(fp.as_deref(), Some("abc"));
    assert_eq!(back.predict_mask(&scene.image, &ex).unwrap(), seg.predict_mask(&scene.image, &ex).unwrap());

    assert!(CounterModel::load(&dir.path().join("s.json")).is_err());
}

#[test]
fn timing_table_has_one_column_per_method() {
    let scenes: Vec<Scene> = (10..14).map(pair).collect();
    let counter = CounterModel::new(R, 8, &mut SeededRng::new(1)).unwrap();
    let seg = SegModel::new(R, 8, &mut SeededRng::new(2)).unwrap();
    let table = bench_timing(&counter, &seg, &scenes, (2, 3), 1, 0.5, 32, &SeededRng::new(3)).unwrap();
    let methods: Vec<_> = table.columns.iter().map(|c| c.method.clone()).collect();
    assert_eq!(methods, ["none".to_string(), kmeans_column(2), kmeans_column(3), "segmenter".to_string()]);
    assert_eq!((table.scenes, table.warmup, table.repeats), (4 - TIMING_WARMUP, TIMING_WARMUP, TIMING_REPEATS));
    assert_eq!(table.column("none").unwrap().mask_s, 0.0);
    for c in &table.columns {
        assert!(c.total_s > 0.0 && c.total_s >= c.mask_s, "{}", c.method);
    }

    assert!(bench_timing(&counter, &seg, &scenes[..2], (2, 3), 1, 0.5, 32, &SeededRng::new(3)).is_err());
}
