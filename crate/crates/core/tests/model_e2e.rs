use std::path::{Path, PathBuf};
use std::time::Instant;

use thermal_det::bench::{archive, bench_forward, BenchReport};
use thermal_det::blocks::ghost_param_count;
use thermal_det::data::scene::{generate_scene, SceneSpec};
use thermal_det::model::{build_model, count_params, full_forward, load_weights, save_weights, ModelConfig};

fn config(name: &str) -> ModelConfig {
    let path: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ModelConfig::load(&path).unwrap()
}

fn all_weights(cfg: &ModelConfig) -> Vec<f32> {
    let model = build_model(cfg).unwrap();
    model
        .modules()
        .into_iter()
        .flat_map(|(_, ts)| ts.into_iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn desk_counts_match_allocation() {
    let cfg = config("desk.cfg");
    let model = build_model(&cfg).unwrap();
    assert_eq!(count_params(&cfg).unwrap(), model.allocated_params());
}

#[test]
fn full_scale_counts_match_allocation_and_budget() {
    let cfg = config("paper.cfg");
    let counts = count_params(&cfg).unwrap();
    assert!((38_250_000..=51_750_000).contains(&counts.total), "{}", counts.total);
    assert_eq!(build_model(&cfg).unwrap().allocated_params(), counts);
}

#[test]
fn desk_builds_quickly_and_reproducibly() {
    let cfg = config("desk.cfg");
    let t = Instant::now();
    let a = all_weights(&cfg);
    assert!(t.elapsed().as_secs_f64() < 1.0);
    let b = all_weights(&cfg);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let mut other = cfg.clone();
    other.model.seed += 1;
    assert_ne!(all_weights(&other), a);
}

#[test]
fn forward_reports_four_levels_inside_the_image() {
    let cfg = config("desk.cfg");
    let model = build_model(&cfg).unwrap();
    let scene = generate_scene(&SceneSpec::square(64, 4, 3)).unwrap();
    let levels = full_forward(&scene.image, &model, 0.0).unwrap();
    assert_eq!(levels.iter().map(|l| l.stride).collect::<Vec<_>>(), [4, 8, 16, 32]);
    for l in &levels {
        for d in &l.detections {
            assert!(d.bbox.is_valid() && d.bbox.within(64.0, 64.0));
            assert!((0.0..=1.0).contains(&d.score));
            assert!(d.class_id < cfg.model.num_classes);
        }
    }
    assert_eq!(full_forward(&scene.image, &model, 0.0).unwrap(), levels);
}

#[test]
fn non_square_input_runs() {
    let model = build_model(&config("desk.cfg")).unwrap();
    let mut spec = SceneSpec::square(96, 3, 5);
    spec.height = 64;
    let scene = generate_scene(&spec).unwrap();
    for d in model.detect(&scene.image, 0.0).unwrap() {
        assert!(d.bbox.within(96.0, 64.0));
    }
}

#[test]
fn saved_weights_reproduce_detections() {
    let cfg = config("desk.cfg");
    let mut model = build_model(&cfg).unwrap();
    // Make the saved weights differ from what the seed alone would give.
    for (_, ts) in model.modules_mut() {
        for t in ts {
            for v in t.data_mut() {
                *v *= 1.5;
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    save_weights(&model, dir.path()).unwrap();
    let back = load_weights(&cfg, dir.path()).unwrap();
    assert_eq!(back, model);
    let image = generate_scene(&SceneSpec::square(64, 4, 8)).unwrap().image;
    assert_eq!(back.detect(&image, 0.1).unwrap(), model.detect(&image, 0.1).unwrap());
}

#[test]
fn shipped_ghost_convs_are_cheaper() {
    for name in ["desk.cfg", "paper.cfg"] {
        for spec in config(name).ghost_specs() {
            let c = ghost_param_count(&spec);
            assert!(c.ghost_total() < c.standard_total(), "{name}: {spec:?}");
        }
    }
}

#[test]
fn bench_reports_are_sane_and_archived() {
    let cfg = config("desk.cfg");
    let small = bench_forward(&cfg, 10, 64).unwrap();
    let large = bench_forward(&cfg, 10, 128).unwrap();
    for r in [&small, &large] {
        assert!(r.stability > 0.0 && r.stability <= 1.0);
        assert!(r.p50_ms <= r.p95_ms);
    }
    assert!(large.mean_ms > small.mean_ms);
    assert!(bench_forward(&cfg, 9, 64).is_err());
    assert!(bench_forward(&cfg, 10, 48).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.jsonl");
    archive(&small, &path).unwrap();
    archive(&large, &path).unwrap();
    let lines: Vec<BenchReport> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, [small, large]);
}

#[test]
fn non_finite_weights_are_reported() {
    let mut model = build_model(&config("desk.cfg")).unwrap();
    model.stem.weight.data_mut()[0] = f32::NAN;
    let image = generate_scene(&SceneSpec::square(64, 4, 8)).unwrap().image;
    assert!(matches!(
        model.detect(&image, 0.1),
        Err(thermal_det::Error::NonFinite(_))
    ));
}
