//! Sim(3) similarity transforms and their Lie algebra.
//!
//! An element is stored as `(s, R, t)` and acts on points as `x ↦ s·R·x + t`.
//! Tangent vectors are ordered `[rho(3), phi(3), sigma]`, where `phi` is a
//! rotation vector and `sigma = ln s`.
//!
//! The exponential map is
//!
//! ```text
//! exp(rho, phi, sigma) = (e^sigma, Exp(phi), W(sigma, phi)·rho)
//! W = A·I + B·[phi]x + C·[phi]x²
//! ```
//!
//! with `A, B, C` the closed-form integrals of `e^(sigma·u)·Exp(u·phi)` over
//! `u ∈ [0, 1]`. Near `sigma = 0` and/or `|phi| = 0` the coefficients switch to
//! their Taylor expansions.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, SVector, Vector3};
use thiserror::Error;

/// Tangent-space vector of Sim(3).
pub type Vector7 = SVector<f64, 7>;

/// Below this magnitude `sigma` and `|phi|` use series expansions.
pub const SERIES_THRESHOLD: f64 = 1e-6;

/// Orthonormality tolerance for a validated rotation matrix.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Orthogonality drift that triggers re-projection onto SO(3) after composition.
const REORTHONORMALIZE_DRIFT: f64 = 1e-7;

/// `log` refuses rotations whose angle is this close to π.
pub const ANGLE_AT_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Sim3Error {
    #[error("rotation angle {angle} is within {ANGLE_AT_PI_MARGIN} of pi; logarithm is not unique")]
    AngleAtPi { angle: f64 },
    #[error("matrix is not a rotation (orthonormality error {orthogonality_error:e}, det {determinant})")]
    NotARotation {
        orthogonality_error: f64,
        determinant: f64,
    },
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

fn orthogonality_error(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).amax()
}

/// Nearest rotation matrix in the Frobenius sense, or `None` if the input
/// has a non-positive determinant or is too degenerate for SVD.
fn project_to_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = m.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        if m.determinant() <= 0.0 {
            return None;
        }
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    Some(r)
}

/// A 3×3 rotation matrix (orthonormal, det +1).
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl fmt::Debug for Rotation3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Rotation3({:?})", self.0.as_slice())
    }
}

impl Default for Rotation3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates `m` against [`ROTATION_TOLERANCE`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, Sim3Error> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Sim3Error::NonFinite("rotation"));
        }
        let orthogonality_error = orthogonality_error(&m);
        let determinant = m.determinant();
        if orthogonality_error > ROTATION_TOLERANCE || (determinant - 1.0).abs() > ROTATION_TOLERANCE
        {
            return Err(Sim3Error::NotARotation {
                orthogonality_error,
                determinant,
            });
        }
        Ok(Self(m))
    }

    /// Projects an approximately orthonormal matrix (e.g. one read from a
    /// float32 file) onto SO(3). Fails when the input is far from a rotation.
    pub fn from_matrix_projected(m: Matrix3<f64>, tolerance: f64) -> Result<Self, Sim3Error> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Sim3Error::NonFinite("rotation"));
        }
        let orthogonality_error = orthogonality_error(&m);
        let determinant = m.determinant();
        if orthogonality_error > tolerance || determinant <= 0.0 {
            return Err(Sim3Error::NotARotation {
                orthogonality_error,
                determinant,
            });
        }
        project_to_rotation(&m).map(Self).ok_or(Sim3Error::NotARotation {
            orthogonality_error,
            determinant,
        })
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Rodrigues' formula.
    pub fn exp(phi: &Vector3<f64>) -> Self {
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(phi);
        let (a, b) = if theta < SERIES_THRESHOLD {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            let half_sin = (0.5 * theta).sin();
            (theta.sin() / theta, 2.0 * half_sin * half_sin / theta2)
        };
        Self(Matrix3::identity() + k * a + k * k * b)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        Self::exp(&(axis * (angle / n)))
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let m = &self.0;
        let s = 0.5 * vee(&(m - m.transpose())).norm();
        let c = 0.5 * (m.trace() - 1.0);
        s.atan2(c)
    }

    /// Rotation vector. Fails within [`ANGLE_AT_PI_MARGIN`] of π.
    pub fn log(&self) -> Result<Vector3<f64>, Sim3Error> {
        let m = &self.0;
        let axis_times_sin = 0.5 * vee(&(m - m.transpose()));
        let s = axis_times_sin.norm();
        let c = 0.5 * (m.trace() - 1.0);
        let theta = s.atan2(c);
        if std::f64::consts::PI - theta < ANGLE_AT_PI_MARGIN {
            return Err(Sim3Error::AngleAtPi { angle: theta });
        }
        let factor = if theta < SERIES_THRESHOLD {
            1.0 + theta * theta / 6.0
        } else {
            theta / s
        };
        Ok(axis_times_sin * factor)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.0)
    }

    /// Product with re-projection onto SO(3) once accumulated drift exceeds 1e-7.
    pub fn compose(&self, other: &Rotation3) -> Rotation3 {
        let m = self.0 * other.0;
        if orthogonality_error(&m) > REORTHONORMALIZE_DRIFT {
            if let Some(r) = project_to_rotation(&m) {
                return Rotation3(r);
            }
        }
        Rotation3(m)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

/// Tangent vector of Sim(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sim3Tangent {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
    pub sigma: f64,
}

impl Sim3Tangent {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>, sigma: f64) -> Self {
        Self { rho, phi, sigma }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector7) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
            sigma: v[6],
        }
    }

    pub fn to_vector(&self) -> Vector7 {
        Vector7::from_column_slice(&[
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z, self.sigma,
        ])
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

/// Coefficients `(A, B, C)` of `W = A·I + B·K + C·K²`, `K = [phi]x`.
fn w_coefficients(sigma: f64, theta: f64) -> (f64, f64, f64) {
    let sigma_small = sigma.abs() < SERIES_THRESHOLD;
    let theta_small = theta < SERIES_THRESHOLD;
    let theta2 = theta * theta;

    let a = if sigma_small {
        1.0 + sigma / 2.0 + sigma * sigma / 6.0
    } else {
        sigma.exp_m1() / sigma
    };

    match (sigma_small, theta_small) {
        (true, true) => {
            let s2 = sigma * sigma;
            let b = 0.5 + sigma / 3.0 + s2 / 8.0 - theta2 / 24.0;
            let c = 1.0 / 6.0 + sigma / 8.0 + s2 / 20.0 - theta2 / 120.0;
            (a, b, c)
        }
        (false, true) => {
            // Leading terms in theta: ∫u·e^(σu) du and ½∫u²·e^(σu) du.
            (a, exp_moment(1, sigma), 0.5 * exp_moment(2, sigma))
        }
        (true, false) => {
            let (sin_t, cos_t) = theta.sin_cos();
            let half_sin = (0.5 * theta).sin();
            let b0 = 2.0 * half_sin * half_sin / theta2;
            let c0 = (theta - sin_t) / (theta2 * theta);
            // First-order correction in sigma: ∫u·sin(uθ)/θ du and ∫u·(1-cos uθ)/θ² du.
            let b1 = (sin_t - theta * cos_t) / (theta2 * theta);
            let c1 = (0.5 - (cos_t + theta * sin_t - 1.0) / theta2) / theta2;
            (a, b0 + sigma * b1, c0 + sigma * c1)
        }
        (false, false) => {
            let es = sigma.exp();
            let (sin_t, cos_t) = theta.sin_cos();
            let denom = sigma * sigma + theta2;
            let int_sin = (es * (sigma * sin_t - theta * cos_t) + theta) / denom;
            let int_cos = (es * (sigma * cos_t + theta * sin_t) - sigma) / denom;
            let b = int_sin / theta;
            let c = (a - int_cos) / theta2;
            (a, b, c)
        }
    }
}

/// `∫₀¹ uⁿ e^(σu) du`, by power series for moderate `σ` where the closed
/// form cancels badly.
fn exp_moment(n: i32, sigma: f64) -> f64 {
    if sigma.abs() < 1.0 {
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 0..40 {
            sum += term / f64::from(n + k + 1);
            term *= sigma / f64::from(k + 1);
        }
        sum
    } else {
        let es = sigma.exp();
        match n {
            0 => sigma.exp_m1() / sigma,
            1 => (es * (sigma - 1.0) + 1.0) / (sigma * sigma),
            2 => (es * (sigma * sigma - 2.0 * sigma + 2.0) - 2.0) / (sigma * sigma * sigma),
            _ => unreachable!("only moments 0..=2 are used"),
        }
    }
}

fn w_matrix(sigma: f64, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (a, b, c) = w_coefficients(sigma, theta);
    let k = hat(phi);
    Matrix3::identity() * a + k * b + k * k * c
}

/// Similarity transform `x ↦ s·R·x + t`.
#[derive(Clone, Copy, PartialEq)]
pub struct Sim3 {
    scale: f64,
    rotation: Rotation3,
    translation: Vector3<f64>,
}

impl fmt::Debug for Sim3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sim3")
            .field("scale", &self.scale)
            .field("rotation", &self.rotation)
            .field("translation", &self.translation.as_slice())
            .finish()
    }
}

impl Default for Sim3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: Rotation3, translation: Vector3<f64>) -> Result<Self, Sim3Error> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Sim3Error::InvalidScale(scale));
        }
        if translation.iter().any(|x| !x.is_finite()) {
            return Err(Sim3Error::NonFinite("translation"));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn from_scale(scale: f64) -> Result<Self, Sim3Error> {
        Self::new(scale, Rotation3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Rotation3) -> Self {
        Self {
            scale: 1.0,
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// Rigid transform (`s = 1`).
    pub fn rigid(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        Self {
            scale: 1.0,
            rotation,
            translation,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Rotation3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `a.compose(b)` applies `b` first, then `a`.
    pub fn compose(&self, other: &Sim3) -> Sim3 {
        Sim3 {
            scale: self.scale * other.scale,
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) * self.scale + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3 {
        let rt = self.rotation.transpose();
        let inv_scale = 1.0 / self.scale;
        Sim3 {
            scale: inv_scale,
            translation: -(rt.rotate(&self.translation) * inv_scale),
            rotation: rt,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) * self.scale + self.translation
    }

    pub fn exp(tau: &Sim3Tangent) -> Sim3 {
        let w = w_matrix(tau.sigma, &tau.phi);
        Sim3 {
            scale: tau.sigma.exp(),
            rotation: Rotation3::exp(&tau.phi),
            translation: w * tau.rho,
        }
    }

    pub fn log(&self) -> Result<Sim3Tangent, Sim3Error> {
        let phi = self.rotation.log()?;
        let sigma = self.scale.ln();
        let w = w_matrix(sigma, &phi);
        // W is invertible for |phi| < π.
        let rho = w
            .lu()
            .solve(&self.translation)
            .ok_or(Sim3Error::NonFinite("W matrix inverse"))?;
        Ok(Sim3Tangent { rho, phi, sigma })
    }

    /// 4×4 homogeneous matrix `[sR t; 0 1]`.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.rotation.matrix() * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Inverse of [`Sim3::to_homogeneous`]; the linear block must be `s·R`.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Sim3, Sim3Error> {
        let block: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let det = block.determinant();
        if !(det.is_finite() && det > 0.0) {
            return Err(Sim3Error::InvalidScale(det));
        }
        let scale = det.cbrt();
        let rotation = Rotation3::from_matrix_projected(block / scale, 1e-6)?;
        Sim3::new(scale, rotation, m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// Maximum absolute component difference across scale, rotation and translation.
    pub fn max_abs_diff(&self, other: &Sim3) -> f64 {
        let ds = (self.scale - other.scale).abs();
        let dr = (self.rotation.matrix() - other.rotation.matrix()).amax();
        let dt = (self.translation - other.translation).amax();
        ds.max(dr).max(dt)
    }
}

impl Mul for Sim3 {
    type Output = Sim3;
    fn mul(self, rhs: Sim3) -> Sim3 {
        self.compose(&rhs)
    }
}

impl Mul<&Sim3> for &Sim3 {
    type Output = Sim3;
    fn mul(self, rhs: &Sim3) -> Sim3 {
        self.compose(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tangent(rng: &mut ChaCha8Rng, max_angle: f64) -> Sim3Tangent {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        let angle = rng.random_range(0.0..max_angle);
        Sim3Tangent::new(
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
            axis * angle,
            rng.random_range(-1.0..1.0),
        )
    }

    /// Oracle for W: midpoint quadrature of ∫ e^(σu) Exp(u·phi) du.
    fn w_by_quadrature(sigma: f64, phi: &Vector3<f64>) -> Matrix3<f64> {
        let n = 20_000;
        let mut acc = Matrix3::zeros();
        for k in 0..n {
            let u = (k as f64 + 0.5) / n as f64;
            acc += Rotation3::exp(&(phi * u)).matrix() * (sigma * u).exp();
        }
        acc / n as f64
    }

    #[test]
    fn compose_identity_is_neutral() {
        let s = Sim3::exp(&Sim3Tangent::new(
            Vector3::new(0.3, -1.0, 2.0),
            Vector3::new(0.1, 0.2, -0.3),
            0.4,
        ));
        assert!(Sim3::identity().compose(&s).max_abs_diff(&s) < 1e-15);
        assert!(s.compose(&s.inverse()).max_abs_diff(&Sim3::identity()) < 1e-9);
    }

    #[test]
    fn compose_scale_then_translation() {
        let a = Sim3::from_scale(2.0).unwrap();
        let b = Sim3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let c = a.compose(&b);
        assert_eq!(c.scale(), 2.0);
        assert_eq!(*c.translation(), Vector3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(Sim3::identity().inverse(), Sim3::identity());
        assert_eq!(Sim3::from_scale(2.0).unwrap().inverse().scale(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = Sim3::exp(&random_tangent(&mut rng, 3.0));
            assert!(s.inverse().inverse().max_abs_diff(&s) < 1e-12);
        }
    }

    #[test]
    fn apply_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Sim3::identity().apply(&p), p);
        let s = Sim3::new(2.0, Rotation3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(s.apply(&Vector3::x()), Vector3::new(3.0, 0.0, 0.0));
        let rz = Sim3::from_rotation(Rotation3::from_axis_angle(
            &Vector3::z(),
            std::f64::consts::FRAC_PI_2,
        ));
        assert_relative_eq!(rz.apply(&Vector3::x()), Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn exp_examples() {
        assert_eq!(Sim3::exp(&Sim3Tangent::zero()), Sim3::identity());
        let t = Sim3::exp(&Sim3Tangent::new(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros(), 0.0));
        assert_eq!(*t.translation(), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(*t.rotation(), Rotation3::identity());
        assert_eq!(t.scale(), 1.0);
    }

    #[test]
    fn log_examples() {
        assert_eq!(Sim3::identity().log().unwrap(), Sim3Tangent::zero());
        let s = Sim3::from_scale(std::f64::consts::E).unwrap().log().unwrap();
        assert_relative_eq!(s.sigma, 1.0, epsilon = 1e-15);
        assert_eq!(s.rho, Vector3::zeros());
        assert_eq!(s.phi, Vector3::zeros());
    }

    #[test]
    fn log_rejects_half_turn() {
        let r = Rotation3::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), std::f64::consts::PI);
        let s = Sim3::from_rotation(r);
        assert!(matches!(s.log(), Err(Sim3Error::AngleAtPi { .. })));
    }

    #[test]
    fn w_matches_quadrature_in_every_branch() {
        let cases = [
            (0.0, Vector3::new(0.0, 0.0, 0.0)),
            (3e-7, Vector3::new(2e-7, -1e-7, 0.0)),
            (0.7, Vector3::new(1e-7, 0.0, 0.0)),
            (-0.5, Vector3::zeros()),
            (4e-7, Vector3::new(0.4, -1.1, 0.6)),
            (0.0, Vector3::new(0.0, 2.5, 0.0)),
            (-0.8, Vector3::new(1.0, 0.5, -2.0)),
            (1.2, Vector3::new(0.01, 0.02, 0.0)),
        ];
        for (sigma, phi) in cases {
            let closed = w_matrix(sigma, &phi);
            let quad = w_by_quadrature(sigma, &phi);
            assert!(
                (closed - quad).amax() < 1e-8,
                "sigma {sigma}, phi {phi:?}: {}",
                (closed - quad).amax()
            );
        }
    }

    #[test]
    fn exp_agrees_with_homogeneous_matrix_exponential() {
        // The generator of exp(τ) in 4×4 form is [[σI + [φ]x, ρ], [0, 0]].
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let tau = random_tangent(&mut rng, 3.0);
            let mut g = Matrix4::zeros();
            g.fixed_view_mut::<3, 3>(0, 0)
                .copy_from(&(Matrix3::identity() * tau.sigma + hat(&tau.phi)));
            g.fixed_view_mut::<3, 1>(0, 3).copy_from(&tau.rho);
            // Scaling and squaring with a Taylor core.
            let squarings = 12;
            let h = g / f64::from(1u32 << squarings);
            let mut term = Matrix4::identity();
            let mut e = Matrix4::identity();
            for k in 1..20 {
                term = term * h / k as f64;
                e += term;
            }
            for _ in 0..squarings {
                e = e * e;
            }
            let ours = Sim3::exp(&tau).to_homogeneous();
            assert!((ours - e).amax() < 1e-9, "{}", (ours - e).amax());
        }
    }

    #[test]
    fn roundtrip_near_identity_and_near_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for scale in [1e-9, 1e-7, 1e-6, 1e-5, 1e-3] {
            for _ in 0..200 {
                let mut tau = random_tangent(&mut rng, 1.0);
                tau.phi *= scale;
                tau.sigma *= scale;
                let back = Sim3::exp(&tau).log().unwrap();
                assert!((back.to_vector() - tau.to_vector()).norm() < 1e-9);
            }
        }
        let limit = std::f64::consts::PI - 1e-3;
        for _ in 0..200 {
            let mut tau = random_tangent(&mut rng, 1.0);
            tau.phi = tau.phi.normalize() * limit;
            let back = Sim3::exp(&tau).log().unwrap();
            assert!((back.to_vector() - tau.to_vector()).norm() < 1e-9);
        }
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = Sim3::identity();
        for _ in 0..100_000 {
            acc = acc.compose(&Sim3::exp(&random_tangent(&mut rng, 0.5)));
            acc = Sim3::new(1.0, *acc.rotation(), Vector3::zeros()).unwrap();
        }
        assert!(acc.rotation().orthogonality_error() <= 1e-7);
    }

    #[test]
    fn rotation_validation() {
        assert!(Rotation3::from_matrix(Matrix3::identity() * 1.01).is_err());
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(Rotation3::from_matrix(reflection).is_err());
        assert!(Rotation3::from_matrix_projected(reflection, 1e-3).is_err());
        let noisy = Rotation3::exp(&Vector3::new(0.2, 0.1, -0.4)).matrix() + Matrix3::repeat(1e-7);
        let r = Rotation3::from_matrix_projected(noisy, 1e-3).unwrap();
        assert!(r.orthogonality_error() < 1e-14);
    }

    #[test]
    fn invalid_scale_is_rejected() {
        assert!(Sim3::from_scale(0.0).is_err());
        assert!(Sim3::from_scale(f64::NAN).is_err());
        assert!(Sim3::from_scale(-1.0).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn tangent() -> impl Strategy<Value = Sim3Tangent> {
            (
                prop::array::uniform3(-5.0f64..5.0),
                prop::array::uniform3(-1.0f64..1.0),
                0.0f64..(std::f64::consts::PI - 1e-3),
                -2.0f64..2.0,
            )
                .prop_filter_map("non-zero axis", |(rho, axis, angle, sigma)| {
                    let axis = Vector3::from(axis);
                    let n = axis.norm();
                    (n > 1e-3).then(|| {
                        Sim3Tangent::new(Vector3::from(rho), axis * (angle / n), sigma)
                    })
                })
        }

        proptest! {
            #[test]
            fn composition_is_associative(a in tangent(), b in tangent(), c in tangent()) {
                let (a, b, c) = (Sim3::exp(&a), Sim3::exp(&b), Sim3::exp(&c));
                let left = a.compose(&b.compose(&c));
                let right = a.compose(&b).compose(&c);
                prop_assert!(left.max_abs_diff(&right) < 1e-9 * (1.0 + left.translation().norm()));
            }

            #[test]
            fn apply_distributes_over_compose(a in tangent(), b in tangent(), p in prop::array::uniform3(-10.0f64..10.0)) {
                let (a, b) = (Sim3::exp(&a), Sim3::exp(&b));
                let p = Vector3::from(p);
                let lhs = a.compose(&b).apply(&p);
                let rhs = a.apply(&b.apply(&p));
                prop_assert!((lhs - rhs).amax() < 1e-9 * (1.0 + lhs.norm()));
            }

            #[test]
            fn closure_preserves_invariants(a in tangent(), b in tangent()) {
                let c = Sim3::exp(&a).compose(&Sim3::exp(&b));
                prop_assert!(c.scale() > 0.0 && c.scale().is_finite());
                prop_assert!(c.rotation().orthogonality_error() < 1e-9);
                prop_assert!((c.rotation().matrix().determinant() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn log_exp_roundtrip(t in tangent()) {
                let back = Sim3::exp(&t).log().unwrap();
                prop_assert!((back.to_vector() - t.to_vector()).norm() < 1e-9);
            }
        }
    }
}
