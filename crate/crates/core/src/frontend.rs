//! Frame-pair orchestration and whole-sequence runs.
//!
//! Each consecutive pair of frames is turned into a [`PreparedPair`]: the
//! matched tracks as correspondences, the gyro rotation over the pair, the
//! prefilter verdicts and, when needed, one predictor vector per match.
//! The three estimator modes then work from that shared preparation.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix3, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::estimator::{direct_solution, refine, Correspondence, RefineOutcome, SolverConfig};
use crate::geometry::{integrate_gyro, Point3, Pose, StereoCamera};
use crate::model::ProbeModel;
use crate::predictors::{FlowVector, FramePredictors, PredictorConfig, PredictorVector};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    /// Probability that at least one sample is outlier-free.
    pub confidence: f64,
    /// Assumed worst-case outlier fraction.
    pub outlier_fraction: f64,
    pub sample_size: usize,
    /// Inlier threshold on the 3-D alignment residual (m).
    pub threshold: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self::nominal()
    }
}

impl RansacConfig {
    pub fn nominal() -> Self {
        Self {
            confidence: 0.99,
            outlier_fraction: 0.5,
            sample_size: 3,
            threshold: 0.1,
        }
    }

    pub fn aggressive() -> Self {
        Self {
            confidence: 0.9999,
            ..Self::nominal()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.confidence > 0.0
            && self.confidence < 1.0
            && (0.0..1.0).contains(&self.outlier_fraction)
            && self.sample_size >= 3
            && self.threshold > 0.0
            && self.threshold.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid RANSAC config {self:?}")))
        }
    }
}

/// Number of samples needed to draw one all-inlier minimal set with
/// probability `confidence`.
pub fn ransac_iterations(cfg: &RansacConfig) -> usize {
    let all_inliers = (1.0 - cfg.outlier_fraction).powi(cfg.sample_size as i32);
    if all_inliers >= 1.0 {
        return 1;
    }
    let n = ((1.0 - cfg.confidence).ln() / (1.0 - all_inliers).ln()).ceil();
    (n as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct RansacOutcome {
    /// Indices into the input correspondences, ascending.
    pub inliers: Vec<usize>,
    pub refine: RefineOutcome,
    pub iterations: usize,
}

/// Minimal-set RANSAC with the rotation fixed at `rotation`.
///
/// Each hypothesis takes three random correspondences and solves only for
/// translation from their centroids. The largest consensus set (earliest on
/// ties) is refined with uniform weights.
pub fn ransac_align<R: Rng>(
    corrs: &[Correspondence],
    rotation: &Matrix3<f64>,
    cfg: &RansacConfig,
    solver: &SolverConfig,
    rng: &mut R,
) -> Result<RansacOutcome> {
    cfg.validate()?;
    let n = corrs.len();
    if n < cfg.sample_size {
        return Err(Error::UnobservableMotion { usable: n });
    }
    let iterations = ransac_iterations(cfg);
    let mut best: Vec<usize> = Vec::new();
    let mut sample = Vec::with_capacity(cfg.sample_size);
    for _ in 0..iterations {
        sample.clear();
        for idx in rand::seq::index::sample(rng, n, cfg.sample_size) {
            sample.push(corrs[idx].clone());
        }
        let r = direct_solution(&sample, rotation)?;
        let hypothesis = Pose {
            rotation: *rotation,
            translation: r,
        };
        let inliers: Vec<usize> = (0..n).filter(|&i| corrs[i].residual(&hypothesis).norm() < cfg.threshold).collect();
        if inliers.len() > best.len() {
            best = inliers;
        }
    }
    if best.len() < cfg.sample_size {
        return Err(Error::DegenerateGeometry(format!(
            "best RANSAC hypothesis has {} inliers, need {}",
            best.len(),
            cfg.sample_size
        )));
    }
    let chosen: Vec<Correspondence> = best.iter().map(|&i| corrs[i].clone()).collect();
    let outcome = refine_from_rotation(&chosen, rotation, solver)?;
    Ok(RansacOutcome {
        inliers: best,
        refine: outcome,
        iterations,
    })
}

/// Refinement started from `rotation` and the centroid translation.
pub fn refine_from_rotation(corrs: &[Correspondence], rotation: &Matrix3<f64>, solver: &SolverConfig) -> Result<RefineOutcome> {
    if corrs.len() < 3 {
        return Err(Error::UnobservableMotion { usable: corrs.len() });
    }
    let initial = Pose {
        rotation: *rotation,
        translation: direct_solution(corrs, rotation)?,
    };
    refine(corrs, &initial, solver)
}

/// Angle (rad) between the left-camera bearing of `y_a` rotated into frame
/// `b` and the bearing of `y_b`.
pub fn bearing_separation(cam: &StereoCamera, corr: &Correspondence, rotation: &Matrix3<f64>) -> f64 {
    let a = rotation * cam.left_bearing(&corr.y_a);
    let b = cam.left_bearing(&corr.y_b);
    a.cross(&b).norm().atan2(a.dot(&b))
}

/// Indices of correspondences whose gyro-compensated bearings agree within
/// `threshold_deg`.
pub fn prefilter_cosine(corrs: &[Correspondence], rotation: &Matrix3<f64>, cam: &StereoCamera, threshold_deg: f64) -> Vec<usize> {
    let limit = threshold_deg.to_radians();
    (0..corrs.len()).filter(|&i| bearing_separation(cam, &corrs[i], rotation) <= limit).collect()
}

/// Which estimator runs on each frame pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    Nominal,
    Aggressive,
    Probe,
}

impl ModeKind {
    pub const ALL: [ModeKind; 3] = [ModeKind::Nominal, ModeKind::Aggressive, ModeKind::Probe];

    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Nominal => "nominal",
            ModeKind::Aggressive => "aggressive",
            ModeKind::Probe => "probe",
        }
    }
}

impl fmt::Display for ModeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum EstimatorMode<'m> {
    NominalRansac,
    AggressiveRansac,
    Probe(&'m ProbeModel),
}

impl<'m> EstimatorMode<'m> {
    pub fn from_kind(kind: ModeKind, model: Option<&'m ProbeModel>) -> Result<Self> {
        Ok(match kind {
            ModeKind::Nominal => EstimatorMode::NominalRansac,
            ModeKind::Aggressive => EstimatorMode::AggressiveRansac,
            ModeKind::Probe => EstimatorMode::Probe(model.ok_or_else(|| Error::Configuration("probe mode requires a trained model".into()))?),
        })
    }

    pub fn kind(&self) -> ModeKind {
        match self {
            EstimatorMode::NominalRansac => ModeKind::Nominal,
            EstimatorMode::AggressiveRansac => ModeKind::Aggressive,
            EstimatorMode::Probe(_) => ModeKind::Probe,
        }
    }
}

/// Everything tunable in a sequence run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub solver: SolverConfig,
    /// Settings for the nominal baseline; the aggressive baseline uses the
    /// same values with `aggressive_confidence`.
    pub ransac: RansacConfig,
    pub aggressive_confidence: f64,
    pub prefilter_deg: f64,
    pub predictors: PredictorConfig,
    /// Overrides the dataset's pixel noise when set.
    pub sigma_px: Option<f64>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            ransac: RansacConfig::nominal(),
            aggressive_confidence: RansacConfig::aggressive().confidence,
            prefilter_deg: 5.0,
            predictors: PredictorConfig::default(),
            sigma_px: None,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.ransac.validate()?;
        self.predictors.validate()?;
        RansacConfig {
            confidence: self.aggressive_confidence,
            ..self.ransac
        }
        .validate()?;
        if !(self.prefilter_deg > 0.0 && self.prefilter_deg <= 180.0) {
            return Err(Error::InvalidParameter(format!("prefilter threshold {}° outside (0, 180]", self.prefilter_deg)));
        }
        if let Some(s) = self.sigma_px {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!("sigma_px = {s} must be positive")));
            }
        }
        Ok(())
    }

    pub fn ransac_for(&self, kind: ModeKind) -> RansacConfig {
        match kind {
            ModeKind::Aggressive => RansacConfig {
                confidence: self.aggressive_confidence,
                ..self.ransac
            },
            _ => self.ransac,
        }
    }
}

/// One frame pair ready for estimation.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub frame_a: usize,
    pub frame_b: usize,
    pub track_ids: Vec<u64>,
    /// Unit-weight correspondences, aligned with `track_ids`.
    pub corrs: Vec<Correspondence>,
    /// Gyro-integrated rotation from frame `a` to frame `b`.
    pub rotation: Matrix3<f64>,
    /// Indices that pass the bearing prefilter, ascending.
    pub kept: Vec<usize>,
    /// One vector per correspondence when predictors were requested.
    pub predictors: Option<Vec<PredictorVector>>,
    /// Matches discarded for too small a disparity.
    pub rejected_disparity: usize,
    pub imu_samples: usize,
}

/// Builds the pair ending at frame `b` (`b >= 1`).
pub fn prepare_pair(dataset: &Dataset, b: usize, cfg: &PipelineConfig, with_predictors: bool) -> Result<PreparedPair> {
    let a = b - 1;
    let (fa, fb) = (&dataset.frames[a], &dataset.frames[b]);
    let sigma = cfg.sigma_px.unwrap_or(dataset.sigma_px);
    let window = dataset.imu_window(fa.t, fb.t);
    let rotation = integrate_gyro(&window, &dataset.rig);

    // matches and sparse flow over all tracks common to both frames
    let mut matches = Vec::new();
    let mut flows = Vec::new();
    let mut ia = 0;
    for ob in &fb.observations {
        while ia < fa.observations.len() && fa.observations[ia].track_id < ob.track_id {
            ia += 1;
        }
        if let Some(oa) = fa.observations.get(ia).filter(|o| o.track_id == ob.track_id) {
            matches.push((ob.track_id, oa.point, ob.point));
            flows.push(FlowVector {
                position: Vector2::new(ob.point.ul, ob.point.vl),
                flow: Vector2::new(ob.point.ul - oa.point.ul, ob.point.vl - oa.point.vl),
            });
        }
    }

    let mut track_ids = Vec::with_capacity(matches.len());
    let mut corrs = Vec::with_capacity(matches.len());
    let mut rejected = 0;
    for &(id, ya, yb) in &matches {
        match Correspondence::isotropic(&dataset.camera, ya, yb, sigma) {
            Ok(c) => {
                track_ids.push(id);
                corrs.push(c);
            }
            Err(Error::DegenerateDisparity { .. }) | Err(Error::NonPositiveDepth { .. }) => rejected += 1,
            Err(e) => return Err(e.at_frame(b)),
        }
    }

    let predictors = if with_predictors {
        let fp = FramePredictors::new(fb.image.as_ref(), &window, &flows, &cfg.predictors).map_err(|e| e.at_frame(b))?;
        let mut out = Vec::with_capacity(corrs.len());
        for (id, c) in track_ids.iter().zip(&corrs) {
            let external = fb.image_terms.get(id).copied();
            out.push(fp.predict(c.y_b.ul, c.y_b.vl, external).map_err(|e| e.at_frame(b))?);
        }
        Some(out)
    } else {
        None
    };

    let kept = prefilter_cosine(&corrs, &rotation, &dataset.camera, cfg.prefilter_deg);
    Ok(PreparedPair {
        frame_a: a,
        frame_b: b,
        track_ids,
        corrs,
        rotation,
        kept,
        predictors,
        rejected_disparity: rejected,
        imu_samples: window.len(),
    })
}

pub fn prepare_sequence(dataset: &Dataset, cfg: &PipelineConfig, with_predictors: bool) -> Result<Vec<PreparedPair>> {
    cfg.validate()?;
    (1..dataset.frames.len()).map(|b| prepare_pair(dataset, b, cfg, with_predictors)).collect()
}

/// Per-pair record of what the estimator saw and did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub frame: usize,
    pub matches: usize,
    pub after_prefilter: usize,
    pub ransac_inliers: Option<usize>,
    pub used: usize,
    pub dropped_weights: usize,
    pub rejected_disparity: usize,
    pub iterations: usize,
    pub converged: bool,
    pub cost: f64,
    #[serde(skip)]
    pub betas: Vec<f64>,
}

/// Refinement over `indices` of `pair` with the given covariance scales.
pub fn estimate_weighted(pair: &PreparedPair, indices: &[usize], betas: Option<&[f64]>, solver: &SolverConfig) -> Result<RefineOutcome> {
    let mut chosen = Vec::with_capacity(indices.len());
    for (j, &i) in indices.iter().enumerate() {
        let mut c = pair.corrs[i].clone();
        if let Some(b) = betas {
            c.set_beta(b[j])?;
        }
        chosen.push(c);
    }
    refine_from_rotation(&chosen, &pair.rotation, solver)
}

/// β for every prefiltered correspondence of `pair`.
pub fn probe_betas(pair: &PreparedPair, model: &ProbeModel) -> Result<Vec<f64>> {
    let pis = pair
        .predictors
        .as_ref()
        .ok_or_else(|| Error::Configuration("probe mode needs predictor vectors; prepare the pair with predictors".into()))?;
    Ok(pair.kept.iter().map(|&i| model.weight(&pis[i])).collect())
}

/// Motion increment from frame `a` to frame `b` of `pair`.
pub fn estimate_motion(pair: &PreparedPair, mode: EstimatorMode<'_>, cfg: &PipelineConfig) -> Result<(Pose, PairDiagnostics)> {
    let mut diag = PairDiagnostics {
        frame: pair.frame_b,
        matches: pair.corrs.len(),
        after_prefilter: pair.corrs.len(),
        ransac_inliers: None,
        used: 0,
        dropped_weights: 0,
        rejected_disparity: pair.rejected_disparity,
        iterations: 0,
        converged: false,
        cost: 0.0,
        betas: Vec::new(),
    };
    let outcome = match mode {
        EstimatorMode::NominalRansac | EstimatorMode::AggressiveRansac => {
            let mut rng = seeds::stream(cfg.seed, "ransac", pair.frame_b as u64);
            let r = ransac_align(&pair.corrs, &pair.rotation, &cfg.ransac_for(mode.kind()), &cfg.solver, &mut rng)?;
            diag.ransac_inliers = Some(r.inliers.len());
            diag.used = r.inliers.len();
            r.refine
        }
        EstimatorMode::Probe(model) => {
            let betas = probe_betas(pair, model)?;
            diag.after_prefilter = pair.kept.len();
            diag.used = pair.kept.len();
            let out = estimate_weighted(pair, &pair.kept, Some(&betas), &cfg.solver)?;
            diag.betas = betas;
            out
        }
    };
    diag.iterations = outcome.iterations;
    diag.converged = outcome.converged;
    diag.cost = outcome.cost;
    diag.dropped_weights = outcome.dropped;
    Ok((outcome.pose, diag))
}

/// Error of a trajectory against the dataset's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    /// Mean position error over the frames with ground truth (m).
    pub armse: f64,
    /// Position error at the last frame with ground truth (m).
    pub final_error: f64,
    /// `(frame, error)` for every frame with ground truth.
    pub errors: Vec<(usize, f64)>,
}

/// Compares `positions` (one per frame) with ground truth.
pub fn evaluate_positions(positions: &[Point3], dataset: &Dataset) -> Option<TrajectoryMetrics> {
    let errors: Vec<(usize, f64)> = dataset
        .groundtruth_frames()
        .into_iter()
        .filter(|&k| k < positions.len())
        .map(|k| (k, (positions[k] - dataset.groundtruth_at(k).expect("listed frame")).norm()))
        .collect();
    let last = errors.last()?.1;
    Some(TrajectoryMetrics {
        armse: errors.iter().map(|e| e.1).sum::<f64>() / errors.len() as f64,
        final_error: last,
        errors,
    })
}

/// Length of a polyline.
pub fn path_length(points: &[Point3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub frame: usize,
    pub message: String,
}

/// A chained trajectory and everything measured along the way.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub mode: ModeKind,
    /// Camera pose per frame relative to frame 0. Shorter than the dataset
    /// when `failure` is set.
    pub poses: Vec<Pose>,
    pub times: Vec<f64>,
    pub diagnostics: Vec<PairDiagnostics>,
    pub failure: Option<FrameFailure>,
}

impl SequenceRun {
    /// Camera positions in the first camera frame.
    pub fn positions(&self) -> Vec<Point3> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    pub fn metrics(&self, dataset: &Dataset) -> Option<TrajectoryMetrics> {
        evaluate_positions(&self.positions(), dataset)
    }

    /// Gap between the first and last estimated positions.
    pub fn loop_closure_error(&self) -> f64 {
        match (self.poses.first(), self.poses.last()) {
            (Some(a), Some(b)) => (b.translation - a.translation).norm(),
            _ => 0.0,
        }
    }

    pub fn diagnostics_summary(&self) -> DiagnosticsSummary {
        DiagnosticsSummary::from_pairs(&self.diagnostics)
    }
}

/// Chains per-pair estimates from the identity pose.
pub fn run_sequence(dataset: &Dataset, mode: EstimatorMode<'_>, cfg: &PipelineConfig) -> Result<SequenceRun> {
    let needs_predictors = matches!(mode, EstimatorMode::Probe(_));
    cfg.validate()?;
    let mut prepared = Vec::with_capacity(dataset.frames.len().saturating_sub(1));
    for b in 1..dataset.frames.len() {
        match prepare_pair(dataset, b, cfg, needs_predictors) {
            Ok(p) => prepared.push(p),
            Err(e) => {
                let mut run = run_prepared(dataset, &prepared, mode, cfg);
                if run.failure.is_none() {
                    run.failure = Some(FrameFailure {
                        frame: b,
                        message: e.to_string(),
                    });
                }
                return Ok(run);
            }
        }
    }
    Ok(run_prepared(dataset, &prepared, mode, cfg))
}

/// [`run_sequence`] over pairs that were already prepared.
pub fn run_prepared(dataset: &Dataset, prepared: &[PreparedPair], mode: EstimatorMode<'_>, cfg: &PipelineConfig) -> SequenceRun {
    let mut run = SequenceRun {
        mode: mode.kind(),
        poses: vec![Pose::identity()],
        times: vec![dataset.frame_time(0)],
        diagnostics: Vec::with_capacity(prepared.len()),
        failure: None,
    };
    for pair in prepared {
        match estimate_motion(pair, mode, cfg) {
            Ok((inc, diag)) => {
                let next = run.poses.last().expect("starts non-empty").then(&inc);
                run.poses.push(next);
                run.times.push(dataset.frame_time(pair.frame_b));
                run.diagnostics.push(diag);
            }
            Err(e) => {
                log::error!("{} mode failed at frame {}: {e}", mode.kind(), pair.frame_b);
                run.failure = Some(FrameFailure {
                    frame: pair.frame_b,
                    message: e.to_string(),
                });
                break;
            }
        }
    }
    run
}

/// Run-level aggregate of [`PairDiagnostics`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub pairs: usize,
    pub matches: usize,
    pub prefilter_rejected: usize,
    pub ransac_rejected: usize,
    pub dropped_weights: usize,
    pub rejected_disparity: usize,
    pub mean_iterations: f64,
    pub unconverged_pairs: usize,
    pub beta: Option<BetaSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSummary {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
    /// Counts per decade of β, keyed by the lower edge exponent.
    pub histogram_log10: BTreeMap<i32, usize>,
}

impl BetaSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut histogram_log10 = BTreeMap::new();
        for v in &sorted {
            *histogram_log10.entry(v.log10().floor() as i32).or_insert(0) += 1;
        }
        Some(Self {
            count: sorted.len(),
            min: sorted[0],
            median: median_sorted(&sorted),
            max: sorted[sorted.len() - 1],
            histogram_log10,
        })
    }
}

/// Median of an ascending slice.
pub fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

impl DiagnosticsSummary {
    pub fn from_pairs(pairs: &[PairDiagnostics]) -> Self {
        let betas: Vec<f64> = pairs.iter().flat_map(|d| d.betas.iter().copied()).collect();
        Self {
            pairs: pairs.len(),
            matches: pairs.iter().map(|d| d.matches).sum(),
            prefilter_rejected: pairs.iter().map(|d| d.matches - d.after_prefilter).sum(),
            ransac_rejected: pairs.iter().filter_map(|d| d.ransac_inliers.map(|n| d.matches - n)).sum(),
            dropped_weights: pairs.iter().map(|d| d.dropped_weights).sum(),
            rejected_disparity: pairs.iter().map(|d| d.rejected_disparity).sum(),
            mean_iterations: if pairs.is_empty() {
                0.0
            } else {
                pairs.iter().map(|d| d.iterations as f64).sum::<f64>() / pairs.len() as f64
            },
            unconverged_pairs: pairs.iter().filter(|d| !d.converged).count(),
            beta: BetaSummary::from_values(&betas),
        }
    }
}
