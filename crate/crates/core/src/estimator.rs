//! Two-frame motion estimation: closed-form translation from point-cloud
//! centroids, then covariance-weighted point-cloud alignment solved with
//! damped Gauss-Newton steps.
//!
//! The alignment error for correspondence `i` is
//! `e = p_b - C (p_a - r)`, weighted by the information matrix
//! `Γ = (G_b R_b G_bᵀ + C G_a R_a G_aᵀ Cᵀ)⁻¹ / β`, where `G` are Jacobians of
//! the stereo triangulation and `β` is the per-feature covariance scale.

use nalgebra::{Cholesky, Matrix3, Matrix3x4, Matrix3x6, Matrix4, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle_matrix, orthonormalize, skew, ImagePoint, Point3, Pose, StereoCamera};

/// Information matrices with a condition number above this are dropped.
pub const MAX_WEIGHT_CONDITION: f64 = 1e12;

/// Relative eigenvalue floor below which the normal matrix is rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Largest damping factor tried before the solver gives up on a step.
const MAX_LAMBDA: f64 = 1e12;

/// One landmark observed by the stereo pair in frames `a` and `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub y_a: ImagePoint,
    pub y_b: ImagePoint,
    pub p_a: Point3,
    pub p_b: Point3,
    /// Image-space covariance of `y_a` in px².
    pub r_a: Matrix4<f64>,
    /// Image-space covariance of `y_b` in px².
    pub r_b: Matrix4<f64>,
    /// Covariance scale; values above one de-weight the feature.
    pub beta: f64,
    // G R Gᵀ for each frame, cached because neither depends on the pose
    cov_a: Matrix3<f64>,
    cov_b: Matrix3<f64>,
}

impl Correspondence {
    pub fn new(cam: &StereoCamera, y_a: ImagePoint, y_b: ImagePoint, r_a: Matrix4<f64>, r_b: Matrix4<f64>) -> Result<Self> {
        check_covariance(&r_a)?;
        check_covariance(&r_b)?;
        let p_a = cam.unproject(&y_a)?;
        let p_b = cam.unproject(&y_b)?;
        let cov_a = propagate_covariance(&cam.unproject_jacobian(&y_a)?, &r_a);
        let cov_b = propagate_covariance(&cam.unproject_jacobian(&y_b)?, &r_b);
        Ok(Self {
            y_a,
            y_b,
            p_a,
            p_b,
            r_a,
            r_b,
            beta: 1.0,
            cov_a,
            cov_b,
        })
    }

    /// Correspondence with `R = σ²·I` in both frames.
    pub fn isotropic(cam: &StereoCamera, y_a: ImagePoint, y_b: ImagePoint, sigma_px: f64) -> Result<Self> {
        let r = Matrix4::identity() * (sigma_px * sigma_px);
        Self::new(cam, y_a, y_b, r, r)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        self.set_beta(beta)?;
        Ok(self)
    }

    pub fn set_beta(&mut self, beta: f64) -> Result<()> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta must be positive and finite, got {beta}")));
        }
        self.beta = beta;
        Ok(())
    }

    /// Triangulated point covariances `(G_a R_a G_aᵀ, G_b R_b G_bᵀ)` in m².
    pub fn point_covariances(&self) -> (Matrix3<f64>, Matrix3<f64>) {
        (self.cov_a, self.cov_b)
    }

    pub fn residual(&self, pose: &Pose) -> Vector3<f64> {
        self.p_b - pose.transform_point(&self.p_a)
    }

    /// Information matrix Γ evaluated with rotation `c`.
    pub fn gamma_weight(&self, c: &Matrix3<f64>) -> Result<Matrix3<f64>> {
        information_matrix(&self.cov_a, &self.cov_b, c, self.beta)
    }
}

fn check_covariance(r: &Matrix4<f64>) -> Result<()> {
    let scale = r.abs().max();
    if !((r - r.transpose()).abs().max() <= 1e-12 * scale) {
        return Err(Error::InvalidParameter("image covariance is not symmetric".into()));
    }
    if Cholesky::new(*r).is_none() {
        return Err(Error::InvalidParameter("image covariance is not positive definite".into()));
    }
    Ok(())
}

/// `G R Gᵀ` for a triangulation Jacobian `G` and image covariance `R`.
pub fn propagate_covariance(g: &Matrix3x4<f64>, r: &Matrix4<f64>) -> Matrix3<f64> {
    let s = g * r * g.transpose();
    0.5 * (s + s.transpose())
}

/// `(cov_b + C cov_a Cᵀ)⁻¹ / β`.
pub fn information_matrix(cov_a: &Matrix3<f64>, cov_b: &Matrix3<f64>, c: &Matrix3<f64>, beta: f64) -> Result<Matrix3<f64>> {
    let s = cov_b + c * cov_a * c.transpose();
    let s = 0.5 * (s + s.transpose());
    let eig = SymmetricEigen::new(s);
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if !(lo > 0.0) || hi / lo > MAX_WEIGHT_CONDITION {
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        return Err(Error::NearSingularWeight { condition });
    }
    let inv = eig.eigenvectors * Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l)) * eig.eigenvectors.transpose();
    Ok(0.5 * (inv + inv.transpose()) * (1.0 / beta))
}

/// How residuals are weighted in the alignment cost.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Γ from propagated stereo covariances scaled by β.
    #[default]
    Propagated,
    /// Γ = I for every correspondence (plain least squares).
    Identity,
}

/// Damped Gauss-Newton controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop once the update norm `|ξ|` falls below this.
    pub convergence_tol: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub weighting: Weighting,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_tol: 1e-10,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            weighting: Weighting::Propagated,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.convergence_tol > 0.0
            && self.lambda_init > 0.0
            && self.lambda_up > 1.0
            && self.lambda_down > 0.0
            && self.lambda_down < 1.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid solver config {self:?}")));
        }
        Ok(())
    }
}

/// Closed-form translation given a rotation estimate: `u_a - Cᵀ u_b`.
pub fn direct_solution(corrs: &[Correspondence], c: &Matrix3<f64>) -> Result<Vector3<f64>> {
    if corrs.is_empty() {
        return Err(Error::EmptyInput("direct solution needs at least one correspondence"));
    }
    let n = corrs.len() as f64;
    let u_a = corrs.iter().map(|k| k.p_a).sum::<Vector3<f64>>() / n;
    let u_b = corrs.iter().map(|k| k.p_b).sum::<Vector3<f64>>() / n;
    Ok(u_a - c.transpose() * u_b)
}

fn weight_for(corr: &Correspondence, c: &Matrix3<f64>, weighting: Weighting) -> Result<Matrix3<f64>> {
    match weighting {
        Weighting::Propagated => corr.gamma_weight(c),
        Weighting::Identity => Ok(Matrix3::identity()),
    }
}

/// Alignment cost `½ Σ eᵀ Γ e` with every Γ evaluated at `pose`.
/// Correspondences whose Γ is near-singular are skipped.
pub fn cost(corrs: &[Correspondence], pose: &Pose) -> f64 {
    cost_weighted(corrs, pose, Weighting::Propagated)
}

pub fn cost_weighted(corrs: &[Correspondence], pose: &Pose, weighting: Weighting) -> f64 {
    corrs
        .iter()
        .filter_map(|k| {
            let w = weight_for(k, &pose.rotation, weighting).ok()?;
            let e = k.residual(pose);
            Some(0.5 * e.dot(&(w * e)))
        })
        .sum()
}

/// Per-correspondence pieces of the quadratic cost model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedTerm {
    /// Index into the correspondence slice.
    pub index: usize,
    pub residual: Vector3<f64>,
    /// `[C, -(C (p_a - r))×]`, columns ordered (ε, φ).
    pub jacobian: Matrix3x6<f64>,
    pub weight: Matrix3<f64>,
}

/// Normal equations `A ξ = b` of the cost linearized at one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    pub terms: Vec<LinearizedTerm>,
    pub a: Matrix6<f64>,
    pub b: Vector6<f64>,
    /// Cost at the linearization point.
    pub cost: f64,
    /// Correspondences skipped because their Γ was near-singular.
    pub dropped: usize,
}

impl LinearizedSystem {
    /// Undamped Gauss-Newton step.
    pub fn solve(&self) -> Result<Vector6<f64>> {
        self.solve_damped(0.0)
    }

    /// Solves `(A + λ diag(A)) ξ = b`.
    pub fn solve_damped(&self, lambda: f64) -> Result<Vector6<f64>> {
        let mut a = self.a;
        for k in 0..6 {
            a[(k, k)] += lambda * self.a[(k, k)];
        }
        if let Some(chol) = Cholesky::new(a) {
            return Ok(chol.solve(&self.b));
        }
        a.lu()
            .solve(&self.b)
            .ok_or_else(|| Error::DegenerateGeometry("normal matrix is singular".into()))
    }

    /// Value of the quadratic model `½ Σ (ē + Ē ξ)ᵀ Γ̄ (ē + Ē ξ)`.
    pub fn model_cost(&self, xi: &Vector6<f64>) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let e = t.residual + t.jacobian * xi;
                0.5 * e.dot(&(t.weight * e))
            })
            .sum()
    }

    /// Cost at `pose` with the weights frozen at the linearization point.
    pub fn cost_at(&self, corrs: &[Correspondence], pose: &Pose) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let e = corrs[t.index].residual(pose);
                0.5 * e.dot(&(t.weight * e))
            })
            .sum()
    }
}

/// Linearizes the alignment cost at `pose`.
pub fn build_linear_system(corrs: &[Correspondence], pose: &Pose) -> Result<LinearizedSystem> {
    build_linear_system_weighted(corrs, pose, Weighting::Propagated)
}

pub fn build_linear_system_weighted(corrs: &[Correspondence], pose: &Pose, weighting: Weighting) -> Result<LinearizedSystem> {
    if corrs.is_empty() {
        return Err(Error::EmptyInput("cannot linearize without correspondences"));
    }
    let c = pose.rotation;
    let mut terms = Vec::with_capacity(corrs.len());
    let mut a = Matrix6::zeros();
    let mut b = Vector6::zeros();
    let mut cost = 0.0;
    let mut dropped = 0;
    for (index, corr) in corrs.iter().enumerate() {
        let weight = match weight_for(corr, &c, weighting) {
            Ok(w) => w,
            Err(Error::NearSingularWeight { .. }) => {
                dropped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let rotated = c * (corr.p_a - pose.translation);
        let residual = corr.p_b - rotated;
        let mut jacobian = Matrix3x6::zeros();
        jacobian.fixed_view_mut::<3, 3>(0, 0).copy_from(&c);
        jacobian.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&rotated)));
        let jt_w = jacobian.transpose() * weight;
        a += jt_w * jacobian;
        b -= jt_w * residual;
        cost += 0.5 * residual.dot(&(weight * residual));
        terms.push(LinearizedTerm {
            index,
            residual,
            jacobian,
            weight,
        });
    }
    let a = 0.5 * (a + a.transpose());
    if terms.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{} usable correspondences, at least 3 required",
            terms.len()
        )));
    }
    let eig = a.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo <= RANK_TOL * hi {
        return Err(Error::DegenerateGeometry(format!(
            "normal matrix is rank deficient (eigenvalue ratio {:e})",
            lo / hi
        )));
    }
    Ok(LinearizedSystem {
        terms,
        a,
        b,
        cost,
        dropped,
    })
}

/// `C ← exp(-φ×) C`, `r ← r + ε` for `ξ = [ε; φ]`.
pub fn apply_update(pose: &Pose, xi: &Vector6<f64>) -> Pose {
    let eps = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    Pose {
        rotation: orthonormalize(&(axis_angle_matrix(&phi) * pose.rotation)),
        translation: pose.translation + eps,
    }
}

/// One accepted damped step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LmStep {
    pub cost_before: f64,
    pub cost_after: f64,
    pub lambda: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub pose: Pose,
    /// Cost at the returned pose, weights evaluated at that pose.
    pub cost: f64,
    /// Outer (relinearization) iterations performed.
    pub iterations: usize,
    pub converged: bool,
    pub steps: Vec<LmStep>,
    /// Near-singular correspondences skipped in the last linearization.
    pub dropped: usize,
}

/// Minimizes the alignment cost starting from `initial`.
///
/// Γ is evaluated once per outer iteration at the current rotation and held
/// fixed while the damping factor is adjusted, so every accepted step lowers
/// (or keeps) the cost of the model it was computed for.
pub fn refine(corrs: &[Correspondence], initial: &Pose, cfg: &SolverConfig) -> Result<RefineOutcome> {
    cfg.validate()?;
    let unobservable = |e: Error| match e {
        Error::DegenerateGeometry(_) | Error::EmptyInput(_) => Error::UnobservableMotion { usable: corrs.len() },
        other => other,
    };
    let mut pose = *initial;
    let mut lambda = cfg.lambda_init;
    let mut steps = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut dropped = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let sys = build_linear_system_weighted(corrs, &pose, cfg.weighting).map_err(unobservable)?;
        dropped = sys.dropped;
        let mut accepted = false;
        loop {
            let xi = sys.solve_damped(lambda).map_err(unobservable)?;
            let candidate = apply_update(&pose, &xi);
            let after = sys.cost_at(corrs, &candidate);
            let small = xi.norm() < cfg.convergence_tol;
            if after <= sys.cost {
                steps.push(LmStep {
                    cost_before: sys.cost,
                    cost_after: after,
                    lambda,
                    step_norm: xi.norm(),
                });
                pose = candidate;
                lambda = (lambda * cfg.lambda_down).max(f64::MIN_POSITIVE);
                accepted = true;
                converged = small;
                break;
            }
            if small {
                converged = true;
                break;
            }
            lambda *= cfg.lambda_up;
            if lambda > MAX_LAMBDA {
                // No descent direction left at machine precision.
                converged = true;
                break;
            }
        }
        if converged || !accepted {
            break;
        }
    }
    Ok(RefineOutcome {
        cost: cost_weighted(corrs, &pose, cfg.weighting),
        pose,
        iterations,
        converged,
        steps,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3x4, Vector4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    fn cam() -> StereoCamera {
        StereoCamera::new(400.0, 0.5, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, rot: f64, trans: f64) -> Pose {
        let psi = Vector3::from_fn(|_, _| rng.random_range(-rot..rot));
        let r = Vector3::from_fn(|_, _| rng.random_range(-trans..trans));
        Pose::new(axis_angle_matrix(&psi), r).unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng) -> Point3 {
        let z = rng.random_range(4.0..30.0);
        Point3::new(rng.random_range(-0.5..0.5) * z, rng.random_range(-0.4..0.4) * z, z)
    }

    /// Correspondences for landmarks seen from two poses, with optional pixel noise.
    fn scene(rng: &mut ChaCha8Rng, pose: &Pose, n: usize, noise: f64) -> Vec<Correspondence> {
        let cam = cam();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::new();
        while out.len() < n {
            let p_a = random_point(rng);
            let p_b = pose.transform_point(&p_a);
            if p_b.z < 2.0 {
                continue;
            }
            let mut jitter = |y: ImagePoint| {
                let d = Vector4::from_fn(|_, _| noise * normal.sample(rng));
                ImagePoint::from_vector(&(y.to_vector() + d))
            };
            let y_a = jitter(cam.project(&p_a).unwrap());
            let y_b = jitter(cam.project(&p_b).unwrap());
            if let Ok(c) = Correspondence::isotropic(&cam, y_a, y_b, noise.max(0.5)) {
                out.push(c);
            }
        }
        out
    }

    #[test]
    fn direct_solution_pure_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Vector3::new(0.3, -0.1, 1.2);
        let pose = Pose::new(Matrix3::identity(), t).unwrap();
        let corrs = scene(&mut rng, &pose, 20, 0.0);
        assert_abs_diff_eq!(direct_solution(&corrs, &Matrix3::identity()).unwrap(), t, epsilon = 1e-10);
    }

    #[test]
    fn direct_solution_single_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = random_pose(&mut rng, 0.2, 1.0);
        let corrs = scene(&mut rng, &pose, 1, 0.0);
        let c = pose.rotation;
        let r = direct_solution(&corrs, &c).unwrap();
        assert_eq!(r, corrs[0].p_a - c.transpose() * corrs[0].p_b);
        assert!(matches!(direct_solution(&[], &c), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn direct_solution_exact_on_clean_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng, 0.1, 1.0);
        let corrs = scene(&mut rng, &pose, 50, 0.0);
        let r = direct_solution(&corrs, &pose.rotation).unwrap();
        assert_abs_diff_eq!(r, pose.translation, epsilon = 1e-10);
    }

    #[test]
    fn gamma_identity_case() {
        let mut g = Matrix3x4::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        let cov = propagate_covariance(&g, &Matrix4::identity());
        let gamma = information_matrix(&cov, &cov, &Matrix3::identity(), 1.0).unwrap();
        assert_abs_diff_eq!(gamma, Matrix3::identity() * 0.5, epsilon = 1e-15);
        let scaled = information_matrix(&cov, &cov, &Matrix3::identity(), 4.0).unwrap();
        assert_eq!(scaled, gamma * 0.25);
    }

    #[test]
    fn gamma_scales_inversely_with_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pose = random_pose(&mut rng, 0.2, 1.0);
        let corr = scene(&mut rng, &pose, 1, 0.0).remove(0);
        let g1 = corr.gamma_weight(&pose.rotation).unwrap();
        let g4 = corr.clone().with_beta(4.0).unwrap().gamma_weight(&pose.rotation).unwrap();
        assert_eq!(g4, g1 * 0.25);
    }

    #[test]
    fn gamma_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cam = cam();
        for _ in 0..200 {
            let spd = |rng: &mut ChaCha8Rng| {
                let m = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
                m * m.transpose() + Matrix4::identity() * 0.1
            };
            let pose = random_pose(&mut rng, 0.3, 1.0);
            let p_a = random_point(&mut rng);
            let p_b = pose.transform_point(&p_a);
            if p_b.z < 2.0 {
                continue;
            }
            let (y_a, y_b) = (cam.project(&p_a).unwrap(), cam.project(&p_b).unwrap());
            let (r_a, r_b) = (spd(&mut rng), spd(&mut rng));
            let beta = rng.random_range(0.1..10.0);
            let corr = Correspondence::new(&cam, y_a, y_b, r_a, r_b).unwrap().with_beta(beta).unwrap();
            let gamma = corr.gamma_weight(&pose.rotation).unwrap();

            // independent route: explicit products and an LU inverse
            let ga = cam.unproject_jacobian(&y_a).unwrap();
            let gb = cam.unproject_jacobian(&y_b).unwrap();
            let c = pose.rotation;
            let inner = gb * (r_b * beta) * gb.transpose() + c * ga * (r_a * beta) * ga.transpose() * c.transpose();
            let oracle = inner.try_inverse().unwrap();
            let scale = oracle.abs().max();
            assert!((gamma - oracle).abs().max() <= 1e-9 * scale);
            assert!(gamma.symmetric_eigenvalues().min() > 0.0);
        }
    }

    #[test]
    fn rejects_bad_covariances() {
        let cam = cam();
        let y = cam.project(&Point3::new(1.0, 1.0, 10.0)).unwrap();
        let mut asym = Matrix4::identity();
        asym[(0, 1)] = 0.5;
        assert!(Correspondence::new(&cam, y, y, asym, Matrix4::identity()).is_err());
        assert!(Correspondence::new(&cam, y, y, -Matrix4::identity(), Matrix4::identity()).is_err());
        let corr = Correspondence::isotropic(&cam, y, y, 0.5).unwrap();
        assert!(corr.clone().with_beta(0.0).is_err());
        assert!(corr.with_beta(f64::NAN).is_err());
    }

    #[test]
    fn near_singular_weight_is_reported() {
        let flat = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1e-14));
        let err = information_matrix(&flat, &flat, &Matrix3::identity(), 1.0).unwrap_err();
        assert!(matches!(err, Error::NearSingularWeight { .. }));
    }

    #[test]
    fn cost_is_zero_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pose = random_pose(&mut rng, 0.2, 1.0);
        let corrs = scene(&mut rng, &pose, 30, 0.0);
        assert!(cost(&corrs, &pose) < 1e-18);
    }

    #[test]
    fn cost_single_term_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pose = random_pose(&mut rng, 0.2, 1.0);
        let corrs = scene(&mut rng, &pose, 1, 0.0);
        let off = Pose {
            translation: pose.translation + Vector3::new(0.1, 0.2, -0.3),
            ..pose
        };
        let e = corrs[0].residual(&off);
        assert_abs_diff_eq!(cost_weighted(&corrs, &off, Weighting::Identity), 0.5 * e.norm_squared(), epsilon = 1e-15);
    }

    /// Central differences of the cost with weights frozen at `pose`.
    fn numeric_gradient(corrs: &[Correspondence], sys: &LinearizedSystem, pose: &Pose, h: f64) -> Vector6<f64> {
        Vector6::from_fn(|k, _| {
            let mut d = Vector6::zeros();
            d[k] = h;
            let plus = sys.cost_at(corrs, &apply_update(pose, &d));
            let minus = sys.cost_at(corrs, &apply_update(pose, &(-d)));
            (plus - minus) / (2.0 * h)
        })
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let truth = random_pose(&mut rng, 0.2, 1.0);
            let corrs = scene(&mut rng, &truth, 40, 0.5);
            let at = apply_update(&truth, &Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05)));
            let sys = build_linear_system(&corrs, &at).unwrap();
            let numeric = numeric_gradient(&corrs, &sys, &at, 1e-6);
            let analytic = -sys.b;
            let rel = (analytic - numeric).norm() / analytic.norm();
            assert!(rel < 1e-5, "relative gradient error {rel:e}");
        }
    }

    #[test]
    fn normal_equations_at_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pose = random_pose(&mut rng, 0.2, 1.0);
        let corrs = scene(&mut rng, &pose, 30, 0.0);
        let sys = build_linear_system(&corrs, &pose).unwrap();
        assert!(sys.b.abs().max() < 1e-9);
        assert!((sys.a - sys.a.transpose()).abs().max() <= 1e-12 * sys.a.abs().max());
    }

    #[test]
    fn two_points_are_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pose = random_pose(&mut rng, 0.2, 1.0);
        let corrs = scene(&mut rng, &pose, 2, 0.0);
        assert!(matches!(build_linear_system(&corrs, &pose), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(
            refine(&corrs, &pose, &SolverConfig::default()),
            Err(Error::UnobservableMotion { .. })
        ));
    }

    #[test]
    fn collinear_points_are_unobservable() {
        let cam = cam();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.5)).unwrap();
        let corrs: Vec<_> = (0..6)
            .map(|k| {
                let p_a = Point3::new(0.5, 0.2, 5.0) + Vector3::new(0.1, 0.05, 1.0) * k as f64;
                let y_a = cam.project(&p_a).unwrap();
                let y_b = cam.project(&pose.transform_point(&p_a)).unwrap();
                Correspondence::isotropic(&cam, y_a, y_b, 0.5).unwrap()
            })
            .collect();
        assert!(matches!(
            refine(&corrs, &pose, &SolverConfig::default()),
            Err(Error::UnobservableMotion { .. })
        ));
    }

    #[test]
    fn normal_equations_minimize_quadratic_model() {
        // grid-refinement oracle on a three-point toy problem
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = random_pose(&mut rng, 0.1, 0.5);
        let corrs = scene(&mut rng, &truth, 3, 0.5);
        let at = apply_update(&truth, &Vector6::from_fn(|_, _| rng.random_range(-0.02..0.02)));
        let sys = build_linear_system(&corrs, &at).unwrap();
        let xi = sys.solve().unwrap();

        let mut center = Vector6::zeros();
        let mut half = 1.0;
        let mut best = sys.model_cost(&center);
        while half > 1e-13 {
            // coordinate-wise grid sweeps; shrink only once a sweep stalls
            let before = best;
            for k in 0..6 {
                let mut best_k = center;
                for step in -8..=8 {
                    let mut cand = center;
                    cand[k] += half * f64::from(step) / 8.0;
                    let v = sys.model_cost(&cand);
                    if v < best {
                        best = v;
                        best_k = cand;
                    }
                }
                center = best_k;
            }
            if best >= before {
                half *= 0.5;
            }
        }
        assert!(sys.model_cost(&xi) <= best + 1e-12 * best.max(1e-12));
        assert!((center - xi).norm() < 1e-4 * xi.norm().max(1.0), "grid {center:?} vs solve {xi:?}");
    }

    #[test]
    fn update_identity_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pose = random_pose(&mut rng, 0.5, 1.0);
        assert_abs_diff_eq!(apply_update(&pose, &Vector6::zeros()).rotation, pose.rotation, epsilon = 1e-15);
        let xi = Vector6::new(0.1, -0.2, 0.3, 0.0, 0.0, 0.0);
        let moved = apply_update(&pose, &xi);
        assert_eq!(moved.translation, pose.translation + Vector3::new(0.1, -0.2, 0.3));
        assert_abs_diff_eq!(moved.rotation, pose.rotation, epsilon = 1e-15);
    }

    #[test]
    fn successive_small_rotations_compose_to_first_order() {
        let pose = Pose::identity();
        for scale in [1e-2, 1e-3, 1e-4] {
            let a = Vector3::new(0.3, -0.5, 0.2) * scale;
            let b = Vector3::new(-0.1, 0.4, 0.6) * scale;
            let two = apply_update(&apply_update(&pose, &Vector6::new(0.0, 0.0, 0.0, a.x, a.y, a.z)), &Vector6::new(0.0, 0.0, 0.0, b.x, b.y, b.z));
            let sum = a + b;
            let one = apply_update(&pose, &Vector6::new(0.0, 0.0, 0.0, sum.x, sum.y, sum.z));
            let gap = two.rotation_error(&one);
            // BCH: the discrepancy is ½|a × b| to leading order
            assert!(gap <= a.cross(&b).norm() * 0.5 * 1.01 + 1e-15, "scale {scale}: {gap:e}");
        }
    }

    #[test]
    fn refine_recovers_clean_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let truth = random_pose(&mut rng, 0.15, 1.5);
            let corrs = scene(&mut rng, &truth, 60, 0.0);
            let start = Pose {
                rotation: axis_angle_matrix(&Vector3::new(0.01, -0.02, 0.015)) * truth.rotation,
                translation: Vector3::zeros(),
            };
            let start = Pose {
                translation: direct_solution(&corrs, &start.rotation).unwrap(),
                ..start
            };
            let out = refine(&corrs, &start, &SolverConfig::default()).unwrap();
            assert!((out.pose.translation - truth.translation).norm() < 1e-8);
            assert!(out.pose.rotation_error(&truth) < 1e-8);
            assert!(out.steps.iter().all(|s| s.cost_after <= s.cost_before));
        }
    }

    #[test]
    fn refine_at_truth_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let truth = random_pose(&mut rng, 0.15, 1.5);
        let corrs = scene(&mut rng, &truth, 60, 0.0);
        let out = refine(&corrs, &truth, &SolverConfig::default()).unwrap();
        assert!(out.iterations <= 1);
        assert!(out.converged);
        assert!(out.steps.iter().all(|s| s.step_norm < 1e-9));
    }

    #[test]
    fn refine_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let truth = random_pose(&mut rng, 0.15, 1.5);
        let corrs = scene(&mut rng, &truth, 80, 0.5);
        let start = Pose::new(truth.rotation, direct_solution(&corrs, &truth.rotation).unwrap()).unwrap();
        let a = refine(&corrs, &start, &SolverConfig::default()).unwrap();
        let b = refine(&corrs, &start, &SolverConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weighting_beats_plain_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut wins = 0;
        for _ in 0..100 {
            let truth = Pose::new(Matrix3::identity(), Vector3::new(0.1, 0.0, 1.0)).unwrap();
            let corrs = scene(&mut rng, &truth, 200, 0.5);
            let start = Pose::new(truth.rotation, direct_solution(&corrs, &truth.rotation).unwrap()).unwrap();
            let weighted = refine(&corrs, &start, &SolverConfig::default()).unwrap();
            let plain_cfg = SolverConfig {
                weighting: Weighting::Identity,
                ..SolverConfig::default()
            };
            let plain = refine(&corrs, &start, &plain_cfg).unwrap();
            let ew = (weighted.pose.translation - truth.translation).norm();
            let ep = (plain.pose.translation - truth.translation).norm();
            if ew < ep {
                wins += 1;
            }
        }
        assert!(wins >= 80, "weighted alignment won {wins}/100");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn common_beta_scale_leaves_step_unchanged(seed in 0u64..10_000, k in 0.01..100.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_pose(&mut rng, 0.2, 1.0);
            let corrs = scene(&mut rng, &truth, 12, 0.5);
            let at = apply_update(&truth, &Vector6::from_fn(|_, _| rng.random_range(-0.05..0.05)));
            let scaled: Vec<_> = corrs.iter().map(|c| c.clone().with_beta(k).unwrap()).collect();
            let s1 = build_linear_system(&corrs, &at).unwrap();
            let sk = build_linear_system(&scaled, &at).unwrap();
            prop_assert!((sk.a * k - s1.a).abs().max() <= 1e-10 * s1.a.abs().max());
            prop_assert!((sk.b * k - s1.b).abs().max() <= 1e-10 * s1.b.abs().max().max(1e-300));
            prop_assert!((sk.cost * k - s1.cost).abs() <= 1e-10 * s1.cost);
            let (x1, xk) = (s1.solve().unwrap(), sk.solve().unwrap());
            prop_assert!((x1 - xk).norm() <= 1e-10 * x1.norm().max(1e-3));
        }

        #[test]
        fn weights_are_positive_definite(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_pose(&mut rng, 0.3, 1.0);
            for corr in scene(&mut rng, &truth, 5, 0.5) {
                let g = corr.gamma_weight(&truth.rotation).unwrap();
                prop_assert!(g.symmetric_eigenvalues().min() > 0.0);
            }
        }
    }
}
