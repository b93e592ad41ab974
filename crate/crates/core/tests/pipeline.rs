//! End-to-end checks across simulator, ingestion, training and estimation.

use probe_core::dataset::read_dataset;
use probe_core::frontend::{estimate_weighted, prepare_sequence, run_prepared, run_sequence, EstimatorMode, ModeKind, PipelineConfig};
use probe_core::model::ProbeModel;
use probe_core::predictors::PredictorConfig;
use probe_core::simulator::{generate, write_simulation, MovingCluster, NoiseSpec, PathSpec, SimOutput, SimSpec, TrajectorySpec, WorldSpec};
use probe_core::training::{fit_model, TrainConfig};

fn sim(seed: u64, frames: usize, path: PathSpec, noise: NoiseSpec, moving: bool) -> SimOutput {
    let moving = if moving { vec![MovingCluster::default()] } else { Vec::new() };
    generate(&SimSpec {
        seed,
        world: WorldSpec { moving, ..WorldSpec::default() },
        trajectory: TrajectorySpec {
            frames,
            path,
            ..TrajectorySpec::default()
        },
        noise,
        ..SimSpec::default()
    })
    .unwrap()
}

fn small_model() -> ProbeModel {
    let train = sim(5, 20, PathSpec::Line { speed: 1.0 }, NoiseSpec::default(), true);
    let cfg = TrainConfig {
        iterations: 4,
        k_candidates: vec![5, 10],
        gamma_candidates: vec![0.0, 1.0, 2.0],
        ..TrainConfig::default()
    };
    fit_model(&train.dataset, &cfg, &PipelineConfig::default()).unwrap().0
}

#[test]
fn every_mode_agrees_on_clean_data() {
    let model = small_model();
    let clean = sim(8, 25, PathSpec::Arc { speed: 1.2, yaw_rate: 0.25 }, NoiseSpec::noiseless(), false);
    let cfg = PipelineConfig::default();
    let truth = clean.positions();
    for kind in ModeKind::ALL {
        let run = run_sequence(&clean.dataset, EstimatorMode::from_kind(kind, Some(&model)).unwrap(), &cfg).unwrap();
        assert!(run.failure.is_none());
        assert_eq!(run.poses.len(), clean.dataset.frames.len());
        for (p, t) in run.positions().iter().zip(&truth) {
            assert!((p - t).norm() < 1e-6, "{kind:?}: {}", (p - t).norm());
        }
    }
}

#[test]
fn zero_gamma_is_plain_least_squares() {
    let model = small_model().with_gamma(0.0);
    let out = sim(9, 15, PathSpec::Line { speed: 1.0 }, NoiseSpec::default(), true);
    let cfg = PipelineConfig::default();
    let prepared = prepare_sequence(&out.dataset, &cfg, true).unwrap();
    let run = run_prepared(&out.dataset, &prepared, EstimatorMode::Probe(&model), &cfg);
    let mut pose = probe_core::geometry::Pose::identity();
    for (pair, est) in prepared.iter().zip(&run.poses[1..]) {
        let plain = estimate_weighted(pair, &pair.kept, None, &cfg.solver).unwrap();
        pose = pose.then(&plain.pose);
        assert!((pose.translation - est.translation).norm() < 1e-10);
    }
}

#[test]
fn files_on_disk_reproduce_the_in_memory_run() {
    let out = sim(10, 12, PathSpec::Line { speed: 1.0 }, NoiseSpec::default(), true);
    let model = small_model();
    let cfg = PipelineConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.bin");
    model.save(&model_path).unwrap();
    let loaded = ProbeModel::load_checked(&model_path, &PredictorConfig::default()).unwrap();

    for images in [true, false] {
        let data_dir = dir.path().join(if images { "with_images" } else { "with_predictors" });
        write_simulation(&data_dir, &out, images, &cfg.predictors).unwrap();
        let back = read_dataset(&data_dir).unwrap();
        assert_eq!(back.has_images(), images);
        let a = run_sequence(&out.dataset, EstimatorMode::Probe(&model), &cfg).unwrap();
        let b = run_sequence(&back, EstimatorMode::Probe(&loaded), &cfg).unwrap();
        for (p, q) in a.positions().iter().zip(b.positions()) {
            // decimal text round trips f64 exactly, so only the image
            // terms can differ, and they are recomputed from identical pixels
            assert!((p - q).norm() < 1e-9, "images = {images}: {}", (p - q).norm());
        }
    }
}

#[test]
fn standing_still_stays_put() {
    let out = sim(11, 10, PathSpec::Line { speed: 0.0 }, NoiseSpec::default(), false);
    let run = run_sequence(&out.dataset, EstimatorMode::NominalRansac, &PipelineConfig::default()).unwrap();
    assert!(run.failure.is_none());
    for p in run.positions() {
        assert!(p.norm() < 0.05, "{}", p.norm());
    }
}
