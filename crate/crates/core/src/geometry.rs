//! Rectified stereo camera model, rotation utilities and gyro integration.
//!
//! Rotations follow the frame-rotation convention used throughout the crate:
//! a rotation matrix `C_ba` maps coordinates expressed in frame `a` into
//! frame `b`, and the axis-angle map produces `exp(-ψ×)`, i.e. the transpose
//! of the usual Rodrigues formula. The simulator uses the same convention, so
//! integrated gyro rates reproduce ground-truth inter-frame rotations.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-frame point in meters (x right, y down, z forward).
pub type Point3 = Vector3<f64>;

/// Disparities below this are rejected by [`StereoCamera::unproject`].
pub const MIN_DISPARITY: f64 = 0.1;

const SMALL_ANGLE: f64 = 1e-12;
const ROTATION_TOL: f64 = 1e-9;

/// Rectified pinhole stereo pair with the origin at the left camera centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoCamera {
    /// Focal length in pixels.
    pub f: f64,
    /// Baseline in meters.
    pub b: f64,
    pub cu: f64,
    pub cv: f64,
    pub image_width: u32,
    pub image_height: u32,
}

/// Left and right pixel coordinates of one stereo observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub ul: f64,
    pub vl: f64,
    pub ur: f64,
    pub vr: f64,
}

impl ImagePoint {
    pub fn new(ul: f64, vl: f64, ur: f64, vr: f64) -> Self {
        Self { ul, vl, ur, vr }
    }

    pub fn disparity(&self) -> f64 {
        self.ul - self.ur
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.ul, self.vl, self.ur, self.vr)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl StereoCamera {
    pub fn new(f: f64, b: f64, cu: f64, cv: f64, image_width: u32, image_height: u32) -> Result<Self> {
        let cam = Self {
            f,
            b,
            cu,
            cv,
            image_width,
            image_height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0 && self.f.is_finite()) {
            return Err(Error::InvalidParameter(format!("focal length must be positive, got {}", self.f)));
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::InvalidParameter(format!("baseline must be positive, got {}", self.b)));
        }
        if !(0.0..f64::from(self.image_width)).contains(&self.cu) {
            return Err(Error::InvalidParameter(format!(
                "principal point cu = {} outside [0, {})",
                self.cu, self.image_width
            )));
        }
        if !(0.0..f64::from(self.image_height)).contains(&self.cv) {
            return Err(Error::InvalidParameter(format!(
                "principal point cv = {} outside [0, {})",
                self.cv, self.image_height
            )));
        }
        Ok(())
    }

    pub fn project(&self, p: &Point3) -> Result<ImagePoint> {
        if !(p.z > 0.0) {
            return Err(Error::NonPositiveDepth { z: p.z });
        }
        let s = self.f / p.z;
        Ok(ImagePoint {
            ul: s * p.x + self.cu,
            vl: s * p.y + self.cv,
            ur: s * (p.x - self.b) + self.cu,
            vr: s * p.y + self.cv,
        })
    }

    /// Triangulates a stereo observation. The vertical coordinate uses the
    /// mean of the left and right rows, since noise breaks the rectified
    /// `vl == vr` constraint.
    pub fn unproject(&self, y: &ImagePoint) -> Result<Point3> {
        let d = self.checked_disparity(y)?;
        let z = self.f * self.b / d;
        let v_mean = 0.5 * (y.vl + y.vr);
        Ok(Point3::new(
            (y.ul - self.cu) * z / self.f,
            (v_mean - self.cv) * z / self.f,
            z,
        ))
    }

    /// Analytic Jacobian of [`Self::unproject`] with respect to
    /// `(ul, vl, ur, vr)`.
    pub fn unproject_jacobian(&self, y: &ImagePoint) -> Result<Matrix3x4<f64>> {
        let d = self.checked_disparity(y)?;
        let b = self.b;
        let du = y.ul - self.cu;
        let dv = 0.5 * (y.vl + y.vr) - self.cv;
        let d2 = d * d;
        // x = du·b/d, y = dv·b/d, z = f·b/d with d = ul - ur
        Ok(Matrix3x4::new(
            b / d - du * b / d2,
            0.0,
            du * b / d2,
            0.0,
            -dv * b / d2,
            0.5 * b / d,
            dv * b / d2,
            0.5 * b / d,
            -self.f * b / d2,
            0.0,
            self.f * b / d2,
            0.0,
        ))
    }

    /// Unit bearing of the left-camera ray through `(ul, vl)`.
    pub fn left_bearing(&self, y: &ImagePoint) -> Vector3<f64> {
        Vector3::new((y.ul - self.cu) / self.f, (y.vl - self.cv) / self.f, 1.0).normalize()
    }

    /// True when both left and right pixels fall inside the image.
    pub fn contains(&self, y: &ImagePoint) -> bool {
        let w = f64::from(self.image_width);
        let h = f64::from(self.image_height);
        let inside = |u: f64, v: f64| u >= 0.0 && u < w && v >= 0.0 && v < h;
        inside(y.ul, y.vl) && inside(y.ur, y.vr)
    }

    fn checked_disparity(&self, y: &ImagePoint) -> Result<f64> {
        let d = y.disparity();
        if !(d >= MIN_DISPARITY) {
            return Err(Error::DegenerateDisparity {
                disparity: d,
                minimum: MIN_DISPARITY,
            });
        }
        Ok(d)
    }
}

/// Rigid transform between two camera frames: `p_b = C (p_a - r)`.
///
/// `rotation` is `C_ba` and `translation` is the origin of frame `b`
/// expressed in frame `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Maps a point from frame `a` into frame `b`.
    pub fn transform_point(&self, p_a: &Point3) -> Point3 {
        self.rotation * (p_a - self.translation)
    }

    /// Chains an increment onto this pose. `self` locates frame `a` in a
    /// reference frame `w`; `next` locates `b` in `a`. The result locates `b`
    /// in `w`.
    pub fn then(&self, next: &Pose) -> Pose {
        Pose {
            rotation: orthonormalize(&(next.rotation * self.rotation)),
            translation: self.translation + self.rotation.transpose() * next.translation,
        }
    }

    /// Increment that takes frame `self` to frame `later`, both expressed in
    /// the same reference frame.
    pub fn between(&self, later: &Pose) -> Pose {
        Pose {
            rotation: later.rotation * self.rotation.transpose(),
            translation: self.rotation * (later.translation - self.translation),
        }
    }

    /// Rotation angle of `self.rotation * other.rotationᵀ`, in radians.
    pub fn rotation_error(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation * other.rotation.transpose()))
    }
}

/// One gyro/accelerometer sample, held constant over `dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    /// Angular velocity in rad/s (IMU frame).
    pub omega: Vector3<f64>,
    /// Specific force in m/s² (IMU frame).
    pub accel: Vector3<f64>,
    pub dt: f64,
}

/// Camera/IMU extrinsic rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigCalibration {
    /// Rotation from the IMU frame to the camera frame.
    pub c_cv: Matrix3<f64>,
}

impl Default for RigCalibration {
    fn default() -> Self {
        Self {
            c_cv: Matrix3::identity(),
        }
    }
}

impl RigCalibration {
    pub fn new(c_cv: Matrix3<f64>) -> Result<Self> {
        check_rotation(&c_cv)?;
        Ok(Self { c_cv })
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `cos ψ·I + (1 - cos ψ)·ââᵀ - sin ψ·â×` for `ψ = |psi|`, `â = psi / ψ`.
///
/// Below 1e-12 rad the second-order expansion `I - ψ× + ½(ψψᵀ - ψ²I)` is
/// used instead, which avoids normalizing a vanishing axis.
pub fn axis_angle_matrix(psi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = psi.norm();
    if angle < SMALL_ANGLE {
        return Matrix3::identity() - skew(psi) + 0.5 * (psi * psi.transpose() - angle * angle * Matrix3::identity());
    }
    let axis = psi / angle;
    let (s, c) = angle.sin_cos();
    c * Matrix3::identity() + (1.0 - c) * axis * axis.transpose() - s * skew(&axis)
}

/// Integrates gyro rates into the inter-frame camera rotation
/// `C_cv Ψ_J ⋯ Ψ_1 C_cvᵀ`. An empty window means no elapsed rotation.
pub fn integrate_gyro(samples: &[ImuSample], rig: &RigCalibration) -> Matrix3<f64> {
    let imu = samples
        .iter()
        .fold(Matrix3::identity(), |acc, s| axis_angle_matrix(&(s.omega * s.dt)) * acc);
    rig.c_cv * imu * rig.c_cv.transpose()
}

/// Rotation angle of a rotation matrix, robust near 0 and π.
pub fn rotation_angle(c: &Matrix3<f64>) -> f64 {
    let axis = Vector3::new(c[(2, 1)] - c[(1, 2)], c[(0, 2)] - c[(2, 0)], c[(1, 0)] - c[(0, 1)]);
    let sin2 = axis.norm();
    let cos2 = c.trace() - 1.0;
    sin2.atan2(cos2)
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(c: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = c.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

pub fn check_rotation(c: &Matrix3<f64>) -> Result<()> {
    let orth = (c.transpose() * c - Matrix3::identity()).abs().max();
    let det = c.determinant();
    if !(orth <= ROTATION_TOL && (det - 1.0).abs() <= ROTATION_TOL) {
        return Err(Error::InvalidParameter(format!(
            "not a rotation matrix (|CᵀC - I| = {orth:e}, det = {det})"
        )));
    }
    Ok(())
}
