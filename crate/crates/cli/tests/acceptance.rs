//! Acceptance suite. Every check prints one `PASS`/`FAIL` line with the
//! measured value next to its pinned tolerance, then asserts.
//!
//! Run with `cargo test -p probe-cli --test acceptance -- --nocapture` to see
//! the report lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3, Vector6};
use probe_core::estimator::{apply_update, build_linear_system, refine, Correspondence, SolverConfig};
use probe_core::frontend::{
    median, prepare_pair, prepare_sequence, ransac_iterations, run_prepared, run_sequence, EstimatorMode, ModeKind, PipelineConfig,
    RansacConfig,
};
use probe_core::geometry::{axis_angle_matrix, integrate_gyro, rotation_angle, ImagePoint, ImuSample, Point3, RigCalibration, StereoCamera};
use probe_core::kdtree::KdTree;
use probe_core::model::{beta_from_ratio, ModelMetadata, ProbeModel, RmseMode, Standardization, TrainingSet};
use probe_core::predictors::{blur_metric, PredictorConfig, PredictorVector, PREDICTOR_DIM};
use probe_core::seeds;
use probe_core::simulator::{
    generate, BlurSchedule, GroundTruthDensity, Label, MovingCluster, NoiseSpec, PathSpec, RenderSpec, SimOutput, SimSpec,
    TrajectorySpec, WorldSpec,
};
use probe_core::training::{fit_model, TrainConfig};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

// Pinned tolerances and budgets.
const ROUND_TRIP_TOL: f64 = 1e-10;
const JACOBIAN_REL_TOL: f64 = 1e-5;
const GYRO_TOL_RAD: f64 = 1e-8;
const EXACT_RECOVERY_TOL_M: f64 = 1e-8;
const GRADIENT_REL_TOL: f64 = 1e-5;
const BETA_RESCALE_TOL: f64 = 1e-12;
const PROBE_TO_NOMINAL_MAX: f64 = 0.8;
const MOVING_TO_STATIC_BETA_MIN: f64 = 2.0;
const RANK_TEST_P_MAX: f64 = 0.01;
const BLUR_AUC_MIN: f64 = 0.9;
const NOMINAL_ITERATIONS: usize = 35;
const AGGRESSIVE_ITERATIONS: usize = 69;

fn report(name: &str, pass: bool, detail: String, elapsed: Duration, budget: Duration) {
    let verdict = if pass && elapsed <= budget { "PASS" } else { "FAIL" };
    println!("{verdict} {name}: {detail} [{:.2} s of {:.0} s]", elapsed.as_secs_f64(), budget.as_secs_f64());
}

fn finish(name: &str, pass: bool, detail: String, start: Instant, budget: Duration) {
    let elapsed = start.elapsed();
    report(name, pass, detail.clone(), elapsed, budget);
    assert!(pass, "{name}: {detail}");
    assert!(elapsed <= budget, "{name}: took {elapsed:?}, budget {budget:?}");
}

fn camera() -> StereoCamera {
    StereoCamera::new(400.0, 0.5, 320.0, 240.0, 640, 480).unwrap()
}

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    axis_angle_matrix(&(axis.normalize() * rng.random_range(0.0..std::f64::consts::PI)))
}

#[test]
fn geometry_round_trip_and_jacobian() {
    let start = Instant::now();
    let cam = camera();
    let mut rng = seeds::stream(1, "acceptance/geometry", 0);
    let mut worst_round_trip = 0.0_f64;
    let mut worst_jacobian = 0.0_f64;
    for _ in 0..1000 {
        let z = rng.random_range(0.5..60.0);
        let p = Point3::new(rng.random_range(-1.0..1.0) * z * 0.8, rng.random_range(-1.0..1.0) * z * 0.6, z);
        let y = cam.project(&p).unwrap();
        let back = cam.unproject(&y).unwrap();
        worst_round_trip = worst_round_trip.max((back - p).norm() / p.norm().max(1.0));

        // Noisy pixels so the jacobian is checked away from vl == vr.
        let y = ImagePoint::new(y.ul + rng.random_range(-0.5..0.5), y.vl + rng.random_range(-0.5..0.5), y.ur, y.vr + rng.random_range(-0.5..0.5));
        let analytic = cam.unproject_jacobian(&y).unwrap();
        let h = 1e-4;
        for k in 0..4 {
            let mut plus = y.to_vector();
            let mut minus = y.to_vector();
            plus[k] += h;
            minus[k] -= h;
            let fd = (cam.unproject(&ImagePoint::from_vector(&plus)).unwrap() - cam.unproject(&ImagePoint::from_vector(&minus)).unwrap()) / (2.0 * h);
            let col = analytic.column(k);
            let scale = analytic.abs().max().max(1e-12);
            worst_jacobian = worst_jacobian.max((fd - col).abs().max() / scale);
        }
    }
    let pass = worst_round_trip <= ROUND_TRIP_TOL && worst_jacobian <= JACOBIAN_REL_TOL;
    finish(
        "geometry round trip",
        pass,
        format!("max round-trip error {worst_round_trip:.1e} (tol {ROUND_TRIP_TOL:.0e}), max jacobian rel error {worst_jacobian:.1e} (tol {JACOBIAN_REL_TOL:.0e})"),
        start,
        Duration::from_secs(5),
    );
}

/// Hamilton quaternion `[w, x, y, z]`.
type Quat = [f64; 4];

fn quat_mul(a: Quat, b: Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Active rotation by the rotation vector `v`.
fn quat_from_rotvec(v: Vector3<f64>) -> Quat {
    let angle = v.norm();
    if angle == 0.0 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let (s, c) = (0.5 * angle).sin_cos();
    let a = v / angle;
    [c, s * a.x, s * a.y, s * a.z]
}

fn quat_to_matrix(q: Quat) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

#[test]
fn gyro_integration_matches_quaternion_oracle() {
    let start = Instant::now();
    let mut rng = seeds::stream(2, "acceptance/gyro", 0);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let rig = RigCalibration::new(random_rotation(&mut rng)).unwrap();
        let samples: Vec<ImuSample> = (0..100)
            .map(|_| ImuSample {
                omega: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
                accel: Vector3::zeros(),
                dt: rng.random_range(0.001..0.01),
            })
            .collect();
        // The integrated matrix maps IMU-frame coordinates forward in time,
        // which is the transpose of the body's accumulated active rotation.
        let q = samples.iter().fold([1.0, 0.0, 0.0, 0.0], |q, s| quat_mul(q, quat_from_rotvec(s.omega * s.dt)));
        let oracle = rig.c_cv * quat_to_matrix(q).transpose() * rig.c_cv.transpose();
        let got = integrate_gyro(&samples, &rig);
        worst = worst.max(rotation_angle(&(got * oracle.transpose())));
    }
    finish(
        "gyro integration",
        worst <= GYRO_TOL_RAD,
        format!("max angle to oracle {worst:.1e} rad (tol {GYRO_TOL_RAD:.0e})"),
        start,
        Duration::from_secs(5),
    );
}

fn noiseless_spec(path: PathSpec, seed: u64) -> SimSpec {
    SimSpec {
        name: "exact".into(),
        seed,
        trajectory: TrajectorySpec {
            frames: 100,
            path,
            ..TrajectorySpec::default()
        },
        noise: NoiseSpec::noiseless(),
        render: RenderSpec {
            enabled: false,
            ..RenderSpec::default()
        },
        ..SimSpec::default()
    }
}

#[test]
fn estimator_is_exact_on_clean_data() {
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    let paths = [
        ("line", PathSpec::Line { speed: 1.0 }),
        ("arc", PathSpec::Arc { speed: 1.2, yaw_rate: 0.25 }),
        ("loop", PathSpec::Loop { speed: 1.5 }),
    ];
    let mut worst_position = 0.0_f64;
    for (i, (_, path)) in paths.into_iter().enumerate() {
        let sim = generate(&noiseless_spec(path, 30 + i as u64)).unwrap();
        for mode in [ModeKind::Nominal, ModeKind::Aggressive] {
            let run = run_sequence(&sim.dataset, EstimatorMode::from_kind(mode, None).unwrap(), &cfg).unwrap();
            assert!(run.failure.is_none());
            for (est, truth) in run.positions().iter().zip(sim.positions()) {
                worst_position = worst_position.max((est - truth).norm());
            }
        }
    }

    // Gradient and damping checks on a noisy pair.
    let mut spec = noiseless_spec(PathSpec::Arc { speed: 1.0, yaw_rate: 0.3 }, 33);
    spec.noise = NoiseSpec::default();
    spec.trajectory.frames = 2;
    let sim = generate(&spec).unwrap();
    let pair = prepare_pair(&sim.dataset, 1, &cfg, false).unwrap();
    let corrs: Vec<Correspondence> = pair.corrs.clone();
    let truth = sim.poses[0].between(&sim.poses[1]);
    let mut worst_gradient = 0.0_f64;
    let mut rng = seeds::stream(3, "acceptance/gradient", 0);
    let mut non_monotone = 0;
    let mut steps = 0;
    for _ in 0..20 {
        let xi = Vector6::from_fn(|k, _| if k < 3 { rng.random_range(-0.05..0.05) } else { rng.random_range(-0.02..0.02) });
        let at = apply_update(&truth, &xi);
        let sys = build_linear_system(&corrs, &at).unwrap();
        let analytic = -sys.b;
        let h = 1e-6;
        let fd = Vector6::from_fn(|k, _| {
            let mut d = Vector6::zeros();
            d[k] = h;
            (sys.cost_at(&corrs, &apply_update(&at, &d)) - sys.cost_at(&corrs, &apply_update(&at, &-d))) / (2.0 * h)
        });
        worst_gradient = worst_gradient.max((fd - analytic).abs().max() / analytic.abs().max());

        let out = refine(&corrs, &at, &SolverConfig::default()).unwrap();
        steps += out.steps.len();
        non_monotone += out.steps.iter().filter(|s| s.cost_after > s.cost_before).count();
    }

    let pass = worst_position <= EXACT_RECOVERY_TOL_M && worst_gradient <= GRADIENT_REL_TOL && non_monotone == 0;
    finish(
        "estimator exactness",
        pass,
        format!(
            "max position error {worst_position:.1e} m (tol {EXACT_RECOVERY_TOL_M:.0e}), gradient rel error {worst_gradient:.1e} (tol {GRADIENT_REL_TOL:.0e}), {non_monotone} cost increases in {steps} accepted steps"
        ),
        start,
        Duration::from_secs(60),
    );
}

fn metadata() -> ModelMetadata {
    ModelMetadata {
        camera: camera(),
        predictor_fingerprint: PredictorConfig::default().fingerprint(),
        mode: RmseMode::PerStep,
    }
}

fn brute_force(points: &[[f64; PREDICTOR_DIM]], q: &[f64; PREDICTOR_DIM], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|(_, i)| i).collect()
}

#[test]
fn beta_machinery() {
    let start = Instant::now();
    let unit_cases = [
        (beta_from_ratio(1.0, 2.0), 1.0),
        (beta_from_ratio(2.0, 2.0), 4.0),
        (beta_from_ratio(1.0, 5.0), 1.0),
        (beta_from_ratio(3.0, 0.0), 1.0),
    ];
    let units_ok = unit_cases.iter().all(|(got, want)| got == want);

    let mut rng = seeds::stream(4, "acceptance/beta", 0);
    let random_pi = |rng: &mut rand_chacha::ChaCha8Rng| PredictorVector(std::array::from_fn(|d| rng.random_range(-1.0..1.0) * (d + 1) as f64));
    let raw: Vec<(PredictorVector, f64)> = (0..3000).map(|_| (random_pi(&mut rng), rng.random_range(0.001..0.5))).collect();
    let std = Standardization::fit(raw.iter().map(|(p, _)| p)).unwrap();
    let set = TrainingSet::new(&raw, std.clone(), RmseMode::PerStep).unwrap();
    let model = ProbeModel::new(&set, 20, 2.0, metadata()).unwrap();
    let unit_at_mean = model.beta_from_mean(model.alpha_bar) == 1.0;

    let scaled: Vec<(PredictorVector, f64)> = raw.iter().map(|(p, a)| (*p, a * 37.5)).collect();
    let scaled_model = ProbeModel::new(&TrainingSet::new(&scaled, std, RmseMode::PerStep).unwrap(), 20, 2.0, metadata()).unwrap();

    let points: Vec<[f64; PREDICTOR_DIM]> = set.samples.iter().map(|s| s.pi).collect();
    let tree = KdTree::build(points.clone());
    let mut worst_rescale = 0.0_f64;
    let mut knn_mismatches = 0;
    for _ in 0..1000 {
        let pi = random_pi(&mut rng);
        let (b1, b2) = (model.weight(&pi), scaled_model.weight(&pi));
        worst_rescale = worst_rescale.max((b1 - b2).abs() / b1.max(1.0));

        let q = set.standardization.apply(&pi);
        let oracle = brute_force(&points, &q, 20);
        let got: Vec<usize> = tree.nearest(&q, 20).iter().map(|n| n.index).collect();
        let alphas: Vec<f64> = oracle.iter().map(|&i| set.samples[i].alpha).collect();
        if got != oracle || model.knn_query(&pi) != alphas {
            knn_mismatches += 1;
        }
    }
    let pass = units_ok && unit_at_mean && worst_rescale <= BETA_RESCALE_TOL && knn_mismatches == 0;
    finish(
        "beta machinery",
        pass,
        format!(
            "unit cases {}, rescaling error {worst_rescale:.1e} (tol {BETA_RESCALE_TOL:.0e}), k-NN mismatches {knn_mismatches}/1000",
            if units_ok && unit_at_mean { "hold" } else { "broken" }
        ),
        start,
        Duration::from_secs(10),
    );
}

fn mover_world(repeat_every: f64) -> WorldSpec {
    WorldSpec {
        moving: vec![MovingCluster {
            count: 75,
            duration: 2.0,
            repeat_every: Some(repeat_every),
            ..MovingCluster::default()
        }],
        ..WorldSpec::default()
    }
}

fn mover_spec(seed: u64, path: PathSpec, repeat_every: f64, groundtruth: GroundTruthDensity) -> SimSpec {
    SimSpec {
        name: format!("movers-{seed}"),
        seed,
        world: mover_world(repeat_every),
        trajectory: TrajectorySpec {
            frames: 100,
            path,
            ..TrajectorySpec::default()
        },
        noise: NoiseSpec::default(),
        groundtruth,
        ..SimSpec::default()
    }
}

/// Fraction of observations in frames 1.. that belong to moving landmarks.
fn moving_fraction(sim: &SimOutput) -> f64 {
    let counted: Vec<Label> = sim.labels.iter().filter(|((f, _), _)| *f > 0).map(|(_, l)| *l).collect();
    counted.iter().filter(|l| **l == Label::Moving).count() as f64 / counted.len() as f64
}

#[test]
fn moving_object_benchmark() {
    let start = Instant::now();
    let seeds_n = 25;
    let mut nominal_final = Vec::new();
    let mut probe_final = Vec::new();
    let mut beta_moving = Vec::new();
    let mut beta_static = Vec::new();
    let mut fractions = Vec::new();
    for s in 0..seeds_n {
        let pipeline = PipelineConfig { seed: s, ..PipelineConfig::default() };
        let train = generate(&mover_spec(1000 + s, PathSpec::Line { speed: 1.0 }, 4.0, GroundTruthDensity::Every)).unwrap();
        let cfg = TrainConfig {
            mode: Some(RmseMode::FullPath),
            ..TrainConfig::default()
        };
        let (model, _) = fit_model(&train.dataset, &cfg, &pipeline).unwrap();

        let test = generate(&mover_spec(s, PathSpec::Line { speed: 1.0 }, 2.0, GroundTruthDensity::Every)).unwrap();
        fractions.push(moving_fraction(&test));
        let prepared = prepare_sequence(&test.dataset, &pipeline, true).unwrap();
        let nominal = run_prepared(&test.dataset, &prepared, EstimatorMode::NominalRansac, &pipeline);
        let probe = run_prepared(&test.dataset, &prepared, EstimatorMode::Probe(&model), &pipeline);
        nominal_final.push(nominal.metrics(&test.dataset).unwrap().final_error);
        probe_final.push(probe.metrics(&test.dataset).unwrap().final_error);
        for (pair, diag) in prepared.iter().zip(&probe.diagnostics) {
            for (&i, &beta) in pair.kept.iter().zip(&diag.betas) {
                match test.label(pair.frame_b, pair.track_ids[i]) {
                    Some(Label::Moving) => beta_moving.push(beta),
                    Some(Label::Static) => beta_static.push(beta),
                    _ => {}
                }
            }
        }
    }
    let (nominal, probe) = (median(&nominal_final), median(&probe_final));
    let error_ratio = probe / nominal;
    let beta_ratio = median(&beta_moving) / median(&beta_static);
    let fraction = median(&fractions);
    let pass = error_ratio <= PROBE_TO_NOMINAL_MAX && beta_ratio >= MOVING_TO_STATIC_BETA_MIN && (0.15..=0.25).contains(&fraction);
    finish(
        "moving-object benchmark",
        pass,
        format!(
            "{seeds_n} seeds, moving fraction {fraction:.3}, median final error probe {probe:.4} m vs nominal {nominal:.4} m (ratio {error_ratio:.3}, max {PROBE_TO_NOMINAL_MAX}), median beta moving/static {beta_ratio:.2} (min {MOVING_TO_STATIC_BETA_MIN})"
        ),
        start,
        Duration::from_secs(600),
    );
}

/// One-sided Mann-Whitney test that `high` tends to exceed `low`, normal
/// approximation with tie-corrected variance. Returns `(U, p)`.
fn mann_whitney_greater(high: &[f64], low: &[f64]) -> (f64, f64) {
    let mut all: Vec<(f64, bool)> = high.iter().map(|&v| (v, true)).chain(low.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; all.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|r| *r = rank);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let (n1, n2) = (high.len() as f64, low.len() as f64);
    let r1: f64 = all.iter().zip(&ranks).filter(|(v, _)| v.1).map(|(_, r)| r).sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let sigma = (n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)))).sqrt();
    let z = (u - n1 * n2 / 2.0) / sigma;
    (u, 1.0 - Normal::standard().cdf(z))
}

/// Probability that a random positive outscores a random negative.
fn auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in positives {
        for n in negatives {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (positives.len() * negatives.len()) as f64
}

#[test]
fn blur_raises_residual_variance() {
    let start = Instant::now();
    let spec = SimSpec {
        name: "blur".into(),
        seed: 6,
        trajectory: TrajectorySpec {
            frames: 100,
            path: PathSpec::Arc { speed: 1.0, yaw_rate: 0.1 },
            ..TrajectorySpec::default()
        },
        noise: NoiseSpec {
            blur: BlurSchedule::Alternating { low: 0.0, high: 0.8, period: 4 },
            ..NoiseSpec::default()
        },
        ..SimSpec::default()
    };
    let sim = generate(&spec).unwrap();
    let cfg = PipelineConfig::default();
    let is_high = |k: usize| sim.blur_levels[k] > 0.5;

    // Alignment residuals at the true increment, over static tracks of pairs
    // whose two frames share a blur class.
    let (mut high, mut low) = (Vec::new(), Vec::new());
    for b in 1..sim.dataset.frames.len() {
        if is_high(b - 1) != is_high(b) {
            continue;
        }
        let pair = prepare_pair(&sim.dataset, b, &cfg, false).unwrap();
        let truth = sim.poses[b - 1].between(&sim.poses[b]);
        let residuals: Vec<Vector3<f64>> = pair
            .corrs
            .iter()
            .zip(&pair.track_ids)
            .filter(|(_, id)| sim.label(b, **id) == Some(Label::Static))
            .map(|(c, _)| c.residual(&truth))
            .collect();
        let variance = residuals.iter().map(|e| e.norm_squared()).sum::<f64>() / (3 * residuals.len()) as f64;
        if is_high(b) {
            high.push(variance);
        } else {
            low.push(variance);
        }
    }
    let (_, p) = mann_whitney_greater(&high, &low);

    let metric = |k: usize| blur_metric(sim.dataset.frames[k].image.as_ref().expect("rendered")).unwrap();
    let (blurred, sharp): (Vec<usize>, Vec<usize>) = (0..sim.dataset.frames.len()).partition(|&k| is_high(k));
    let area = auc(&blurred.iter().map(|&k| metric(k)).collect::<Vec<_>>(), &sharp.iter().map(|&k| metric(k)).collect::<Vec<_>>());

    finish(
        "blur property",
        p < RANK_TEST_P_MAX && area > BLUR_AUC_MIN,
        format!(
            "{} high vs {} low pairs, rank test p = {p:.2e} (max {RANK_TEST_P_MAX}), blur metric AUC {area:.3} (min {BLUR_AUC_MIN})",
            high.len(),
            low.len()
        ),
        start,
        Duration::from_secs(120),
    );
}

#[test]
fn loop_closure_training_without_ground_truth() {
    let start = Instant::now();
    let mut nominal_gap = Vec::new();
    let mut probe_gap = Vec::new();
    let mut modes = Vec::new();
    for s in 0..10 {
        let pipeline = PipelineConfig { seed: s, ..PipelineConfig::default() };
        let train = generate(&mover_spec(2000 + s, PathSpec::Loop { speed: 1.5 }, 4.0, GroundTruthDensity::None)).unwrap();
        assert!(train.dataset.groundtruth.is_none());
        let (model, report) = fit_model(&train.dataset, &TrainConfig::default(), &pipeline).unwrap();
        modes.push(report.mode);

        let test = generate(&mover_spec(3000 + s, PathSpec::Loop { speed: 1.5 }, 2.0, GroundTruthDensity::Every)).unwrap();
        let prepared = prepare_sequence(&test.dataset, &pipeline, true).unwrap();
        nominal_gap.push(run_prepared(&test.dataset, &prepared, EstimatorMode::NominalRansac, &pipeline).loop_closure_error());
        probe_gap.push(run_prepared(&test.dataset, &prepared, EstimatorMode::Probe(&model), &pipeline).loop_closure_error());
    }
    let (nominal, probe) = (median(&nominal_gap), median(&probe_gap));
    let all_loop = modes.iter().all(|m| *m == RmseMode::LoopClosure);
    finish(
        "loop-closure training",
        all_loop && probe < nominal,
        format!(
            "10 seeds, trained in {} mode, median loop gap probe {probe:.4} m vs nominal {nominal:.4} m",
            if all_loop { "loop_closure" } else { "unexpected" }
        ),
        start,
        Duration::from_secs(300),
    );
}

/// Smallest N with `1 - (1 - w^s)^N >= p`, by counting.
fn iterations_oracle(p: f64, outlier_fraction: f64, s: i32) -> usize {
    let clean = (1.0 - outlier_fraction).powi(s);
    let mut miss = 1.0;
    let mut n = 0;
    while 1.0 - miss < p {
        miss *= 1.0 - clean;
        n += 1;
    }
    n
}

#[test]
fn ransac_iteration_counts() {
    let start = Instant::now();
    let nominal = ransac_iterations(&RansacConfig::nominal());
    let aggressive = ransac_iterations(&RansacConfig::aggressive());
    let oracle = (iterations_oracle(0.99, 0.5, 3), iterations_oracle(0.9999, 0.5, 3));
    let pass = (nominal, aggressive) == (NOMINAL_ITERATIONS, AGGRESSIVE_ITERATIONS) && (nominal, aggressive) == oracle;
    finish(
        "ransac iteration counts",
        pass,
        format!("nominal {nominal}, aggressive {aggressive} (expected {NOMINAL_ITERATIONS} and {AGGRESSIVE_ITERATIONS}, oracle {} and {})", oracle.0, oracle.1),
        start,
        Duration::from_secs(1),
    );
}

fn probe(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_probe")).args(args).output().unwrap();
    assert!(out.status.success(), "probe {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn compare_is_deterministic() {
    let start = Instant::now();
    let tmp = tempfile::TempDir::new().unwrap();
    let spec = SimSpec {
        name: "determinism".into(),
        seed: 9,
        world: mover_world(2.0),
        trajectory: TrajectorySpec {
            frames: 40,
            ..TrajectorySpec::default()
        },
        noise: NoiseSpec {
            outlier_probability: 0.05,
            ..NoiseSpec::default()
        },
        ..SimSpec::default()
    };
    let spec_path = tmp.path().join("spec.json");
    fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let p = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    probe(&["simulate", &p("spec.json"), "--out", &p("ds"), "--predictors-only"]);
    probe(&["train", "--dataset", &p("ds"), "--out", &p("model.bin"), "--iterations", "3", "--seed", "5"]);
    probe(&["compare", "--dataset", &p("ds"), "--model", &p("model.bin"), "--out", &p("first"), "--seed", "5"]);
    probe(&["compare", "--dataset", &p("ds"), "--model", &p("model.bin"), "--out", &p("second"), "--seed", "5"]);
    let (first, second) = (tree_bytes(&tmp.path().join("first")), tree_bytes(&tmp.path().join("second")));
    let identical = first == second && first.contains_key("comparison.json");
    finish(
        "compare determinism",
        identical,
        format!("{} output files, byte-identical: {identical}", first.len()),
        start,
        Duration::from_secs(120),
    );
}
