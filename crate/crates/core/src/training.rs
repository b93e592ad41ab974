//! Harvesting `(π, α)` samples from repeated traversals of a training
//! sequence, and fitting a [`ProbeModel`] to them.
//!
//! Each iteration re-estimates the whole path with a different subset of
//! features. The error of that estimate, measured in the way the available
//! ground truth allows, is attributed to every feature that took part.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::frontend::{estimate_weighted, evaluate_positions, prepare_sequence, PipelineConfig, PreparedPair};
use crate::geometry::{Point3, Pose};
use crate::model::{compute_rmse, select_gamma, select_k, ModelMetadata, ProbeModel, RmseMode, Standardization, TrainingSet};
use crate::predictors::{PredictorVector, PREDICTOR_DIM};
use crate::seeds;

/// How each iteration chooses the features it estimates with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SubsetPolicy {
    /// A uniformly random `fraction` of each step's features.
    Uniform { fraction: f64 },
    /// The `fraction` of each step's features that lie furthest along a
    /// random direction in standardized prediction space. One direction is
    /// drawn per iteration, so an iteration consistently keeps or drops
    /// whole regions of prediction space.
    Projection { fraction: f64 },
}

impl SubsetPolicy {
    pub fn fraction(&self) -> f64 {
        match *self {
            SubsetPolicy::Uniform { fraction } | SubsetPolicy::Projection { fraction } => fraction,
        }
    }

}

/// Half of every step by random projection. Uniform subsets spread every
/// region of prediction space evenly over the iterations, which leaves
/// almost no contrast between the errors attached to good and bad regions.
impl Default for SubsetPolicy {
    fn default() -> Self {
        SubsetPolicy::Projection { fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of traversals of the training path.
    pub iterations: usize,
    /// Chosen from the ground truth when unset.
    pub mode: Option<RmseMode>,
    /// Random projection of half of each step when unset.
    pub policy: Option<SubsetPolicy>,
    pub k_candidates: Vec<usize>,
    pub gamma_candidates: Vec<f64>,
    pub cv_queries_per_fold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            mode: None,
            policy: None,
            k_candidates: vec![5, 10, 20, 40, 80],
            gamma_candidates: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0],
            cv_queries_per_fold: 2000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be at least 1".into()));
        }
        if let Some(p) = self.policy {
            let f = p.fraction();
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidParameter(format!("subset fraction {f} outside (0, 1]")));
            }
        }
        if self.k_candidates.is_empty() || self.k_candidates.contains(&0) {
            return Err(Error::InvalidParameter("K candidates must be positive".into()));
        }
        if self.gamma_candidates.is_empty() || self.gamma_candidates.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::InvalidParameter("γ candidates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training mode implied by the dataset's ground truth: per-step when every
/// frame has a position, windowed when some do, loop closure when none do.
pub fn auto_mode(dataset: &Dataset) -> RmseMode {
    let gt = dataset.groundtruth_frames();
    if gt.is_empty() {
        RmseMode::LoopClosure
    } else if gt.len() == dataset.frames.len() {
        RmseMode::PerStep
    } else {
        RmseMode::Windowed
    }
}

/// Raw samples and bookkeeping from the traversals.
#[derive(Debug, Clone)]
pub struct Harvest {
    pub samples: Vec<(PredictorVector, f64)>,
    /// `(frame, track id)` each sample came from.
    pub sources: Vec<(usize, u64)>,
    pub standardization: Standardization,
    pub mode: RmseMode,
    pub policy: SubsetPolicy,
    /// Path error of each traversal (ARMSE, or the loop gap without ground truth).
    pub iteration_errors: Vec<f64>,
    pub skipped_steps: usize,
}

/// Chooses the subset of `pair.kept` used in iteration `l`.
fn choose_subset(policy: SubsetPolicy, pair: &PreparedPair, pis: &[[f64; PREDICTOR_DIM]], direction: &[f64; PREDICTOR_DIM], seed: u64, l: usize) -> Vec<usize> {
    let kept = &pair.kept;
    let take = ((policy.fraction() * kept.len() as f64).ceil() as usize).min(kept.len());
    let mut chosen: Vec<usize> = match policy {
        SubsetPolicy::Uniform { .. } => {
            let mut rng = seeds::stream(seed, &format!("subset/{l}"), pair.frame_b as u64);
            rand::seq::index::sample(&mut rng, kept.len(), take).into_iter().map(|j| kept[j]).collect()
        }
        SubsetPolicy::Projection { .. } => {
            let mut scored: Vec<(f64, usize)> = kept.iter().map(|&i| (pis[i].iter().zip(direction).map(|(a, b)| a * b).sum(), i)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scored.into_iter().take(take).map(|(_, i)| i).collect()
        }
    };
    chosen.sort_unstable();
    chosen
}

fn random_direction(seed: u64, l: usize) -> [f64; PREDICTOR_DIM] {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = seeds::stream(seed, "direction", l as u64);
    loop {
        let v: [f64; PREDICTOR_DIM] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.map(|x| x / n);
        }
    }
}

/// Error of one traversal used for reporting and γ selection.
pub fn path_error(positions: &[Point3], dataset: &Dataset, mode: RmseMode) -> f64 {
    match (mode, evaluate_positions(positions, dataset)) {
        (RmseMode::LoopClosure, _) | (_, None) => compute_rmse(positions, &[], RmseMode::LoopClosure).unwrap_or(f64::INFINITY),
        (_, Some(m)) => m.armse,
    }
}

/// Runs `cfg.iterations` traversals and attributes errors to features.
pub fn harvest(dataset: &Dataset, prepared: &[PreparedPair], cfg: &TrainConfig, pipeline: &PipelineConfig) -> Result<Harvest> {
    cfg.validate()?;
    let mode = cfg.mode.unwrap_or_else(|| auto_mode(dataset));
    let policy = cfg.policy.unwrap_or_default();
    let gt_frames = dataset.groundtruth_frames();
    match mode {
        RmseMode::PerStep | RmseMode::Windowed | RmseMode::FullPath if gt_frames.len() < 2 => {
            return Err(Error::Training(format!("{mode} training needs ground truth at two or more frames")));
        }
        _ => {}
    }

    let all_pis: Vec<&PredictorVector> = prepared
        .iter()
        .flat_map(|p| p.predictors.as_ref().map(|v| v.iter()).into_iter().flatten())
        .collect();
    let standardization = Standardization::fit(all_pis)?;
    let std_pis: Vec<Vec<[f64; PREDICTOR_DIM]>> = prepared
        .iter()
        .map(|p| {
            p.predictors
                .as_ref()
                .map(|v| v.iter().map(|pi| standardization.apply(pi)).collect())
                .unwrap_or_default()
        })
        .collect();

    let mut samples = Vec::new();
    let mut sources = Vec::new();
    let mut iteration_errors = Vec::with_capacity(cfg.iterations);
    let mut skipped = 0;
    for l in 0..cfg.iterations {
        let direction = random_direction(pipeline.seed, l);
        let mut poses = vec![Pose::identity()];
        // per step: the subset used, or None when the step failed
        let mut subsets: Vec<Option<Vec<usize>>> = Vec::with_capacity(prepared.len());
        for (s, pair) in prepared.iter().enumerate() {
            let subset = choose_subset(policy, pair, &std_pis[s], &direction, pipeline.seed, l);
            let increment = match estimate_weighted(pair, &subset, None, &pipeline.solver) {
                Ok(out) => {
                    subsets.push(Some(subset));
                    out.pose
                }
                Err(e) => {
                    log::warn!("training iteration {l}: skipping frame {}: {e}", pair.frame_b);
                    skipped += 1;
                    subsets.push(None);
                    Pose {
                        rotation: pair.rotation,
                        translation: Point3::zeros(),
                    }
                }
            };
            let next = poses.last().expect("non-empty").then(&increment);
            poses.push(next);
        }
        let positions: Vec<Point3> = poses.iter().map(|p| p.translation).collect();
        iteration_errors.push(path_error(&positions, dataset, mode));

        // α for each step of this traversal
        let mut step_alpha: Vec<Option<f64>> = vec![None; prepared.len()];
        match mode {
            RmseMode::PerStep => {
                for (s, pair) in prepared.iter().enumerate() {
                    if let (Some(ga), Some(gb)) = (dataset.groundtruth_at(pair.frame_a), dataset.groundtruth_at(pair.frame_b)) {
                        step_alpha[s] = Some(compute_rmse(&[positions[s], positions[s + 1]], &[ga, gb], RmseMode::PerStep)?);
                    }
                }
            }
            RmseMode::Windowed => {
                for w in gt_frames.windows(2) {
                    let (g0, g1) = (w[0], w[1]);
                    let est = [positions[g0], positions[g1]];
                    let truth = [dataset.groundtruth_at(g0).expect("gt"), dataset.groundtruth_at(g1).expect("gt")];
                    let alpha = compute_rmse(&est, &truth, RmseMode::Windowed)?;
                    // steps s cover frames s -> s + 1
                    for slot in &mut step_alpha[g0..g1] {
                        *slot = Some(alpha);
                    }
                }
            }
            RmseMode::FullPath => {
                let est: Vec<Point3> = gt_frames.iter().map(|&k| positions[k]).collect();
                let truth: Vec<Point3> = gt_frames.iter().map(|&k| dataset.groundtruth_at(k).expect("gt")).collect();
                let alpha = compute_rmse(&est, &truth, RmseMode::FullPath)?;
                step_alpha.iter_mut().for_each(|a| *a = Some(alpha));
            }
            RmseMode::LoopClosure => {
                let alpha = compute_rmse(&positions, &[], RmseMode::LoopClosure)?;
                step_alpha.iter_mut().for_each(|a| *a = Some(alpha));
            }
        }

        for (s, pair) in prepared.iter().enumerate() {
            let (Some(subset), Some(alpha)) = (&subsets[s], step_alpha[s]) else { continue };
            let pis = pair.predictors.as_ref().ok_or_else(|| Error::Training("pairs were prepared without predictors".into()))?;
            samples.extend(subset.iter().map(|&i| (pis[i], alpha)));
            sources.extend(subset.iter().map(|&i| (pair.frame_b, pair.track_ids[i])));
        }
        log::info!("training iteration {l}: path error {:.4} m", iteration_errors[l]);
    }

    Ok(Harvest {
        samples,
        sources,
        standardization,
        mode,
        policy,
        iteration_errors,
        skipped_steps: skipped,
    })
}

/// Summary written next to a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub dataset: String,
    pub mode: RmseMode,
    pub policy: SubsetPolicy,
    pub iterations: usize,
    pub alpha_bar: f64,
    pub k: usize,
    pub gamma: f64,
    pub theta_size: usize,
    pub skipped_steps: usize,
    /// Path error of each training traversal (m).
    pub iteration_armse: Vec<f64>,
    /// Cross-validated mean squared α error per K candidate.
    pub k_scores: Vec<(usize, f64)>,
    /// Training path error per γ candidate (m).
    pub gamma_scores: Vec<(f64, f64)>,
}

/// Probe-mode path error on the training pairs for each γ, reusing one
/// neighbour search per feature.
pub struct GammaEvaluator<'a> {
    dataset: &'a Dataset,
    prepared: &'a [PreparedPair],
    /// Neighbour-mean α per prefiltered feature, per pair.
    means: Vec<Vec<f64>>,
    alpha_bar: f64,
    mode: RmseMode,
    pipeline: &'a PipelineConfig,
}

impl<'a> GammaEvaluator<'a> {
    pub fn new(dataset: &'a Dataset, prepared: &'a [PreparedPair], model: &ProbeModel, mode: RmseMode, pipeline: &'a PipelineConfig) -> Result<Self> {
        let mut means = Vec::with_capacity(prepared.len());
        for pair in prepared {
            let pis = pair.predictors.as_ref().ok_or_else(|| Error::Training("pairs were prepared without predictors".into()))?;
            means.push(pair.kept.iter().map(|&i| model.neighbor_mean(&pis[i])).collect());
        }
        Ok(Self {
            dataset,
            prepared,
            means,
            alpha_bar: model.alpha_bar,
            mode,
            pipeline,
        })
    }

    pub fn evaluate(&self, gamma: f64) -> Result<f64> {
        let mut pose = Pose::identity();
        let mut positions = vec![pose.translation];
        for (pair, means) in self.prepared.iter().zip(&self.means) {
            let betas: Vec<f64> = means.iter().map(|m| crate::model::beta_from_ratio(m / self.alpha_bar, gamma)).collect();
            let increment = match estimate_weighted(pair, &pair.kept, Some(&betas), &self.pipeline.solver) {
                Ok(out) => out.pose,
                // a γ that breaks the estimator is simply a bad candidate
                Err(_) => return Ok(f64::INFINITY),
            };
            pose = pose.then(&increment);
            positions.push(pose.translation);
        }
        Ok(path_error(&positions, self.dataset, self.mode))
    }
}

/// Full training: harvest, K by cross-validation, γ by training error.
pub fn fit_model(dataset: &Dataset, cfg: &TrainConfig, pipeline: &PipelineConfig) -> Result<(ProbeModel, TrainingReport)> {
    pipeline.validate()?;
    let prepared = prepare_sequence(dataset, pipeline, true)?;
    fit_prepared(dataset, &prepared, cfg, pipeline)
}

/// [`fit_model`] over pairs that were already prepared with predictors.
pub fn fit_prepared(dataset: &Dataset, prepared: &[PreparedPair], cfg: &TrainConfig, pipeline: &PipelineConfig) -> Result<(ProbeModel, TrainingReport)> {
    let h = harvest(dataset, prepared, cfg, pipeline)?;
    let set = TrainingSet::new(&h.samples, h.standardization.clone(), h.mode)?;
    let (k, k_scores) = select_k(&set, &cfg.k_candidates, cfg.cv_queries_per_fold)?;
    let metadata = ModelMetadata {
        camera: dataset.camera,
        predictor_fingerprint: pipeline.predictors.fingerprint(),
        mode: h.mode,
    };
    let base = ProbeModel::new(&set, k, 1.0, metadata)?;
    let evaluator = GammaEvaluator::new(dataset, prepared, &base, h.mode, pipeline)?;
    let (gamma, gamma_scores) = select_gamma(&cfg.gamma_candidates, |g| evaluator.evaluate(g))?;
    let model = base.with_gamma(gamma);
    log::info!("trained on {} samples: K = {k}, γ = {gamma}, ᾱ = {:.5} m", set.len(), set.alpha_bar);
    let report = TrainingReport {
        dataset: dataset.name.clone(),
        mode: h.mode,
        policy: h.policy,
        iterations: cfg.iterations,
        alpha_bar: set.alpha_bar,
        k,
        gamma,
        theta_size: set.len(),
        skipped_steps: h.skipped_steps,
        iteration_armse: h.iteration_errors,
        k_scores,
        gamma_scores,
    };
    Ok((model, report))
}
