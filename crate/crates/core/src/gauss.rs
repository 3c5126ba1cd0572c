//! Bi-variate Gaussian algebra.
//!
//! [`Gaussian2D`] is the unit the decoder emits and the metric suite
//! consumes. Construction enforces the validity floor (σ ≥ [`SIGMA_FLOOR`],
//! |ρ| ≤ [`RHO_MAX`]) so the density, Mahalanobis distance and sampling
//! routines never need to re-check it.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest admissible standard deviation, in meters.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Largest admissible correlation magnitude.
pub const RHO_MAX: f64 = 0.999;

/// A planar position or displacement in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Unit vector in the same direction, or `None` for (near) zero vectors.
    pub fn normalized(self) -> Option<Vec2> {
        let n = self.norm();
        (n > 1e-12).then(|| self * (1.0 / n))
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// A bi-variate Gaussian parameterized by mean, axis deviations and correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian2D", into = "RawGaussian2D")]
pub struct Gaussian2D {
    mu: Vec2,
    sigma_x: f64,
    sigma_y: f64,
    rho: f64,
}

#[derive(Serialize, Deserialize)]
struct RawGaussian2D {
    mu: Vec2,
    sigma_x: f64,
    sigma_y: f64,
    rho: f64,
}

impl TryFrom<RawGaussian2D> for Gaussian2D {
    type Error = Error;
    fn try_from(r: RawGaussian2D) -> Result<Self> {
        Gaussian2D::new(r.mu, r.sigma_x, r.sigma_y, r.rho)
    }
}

impl From<Gaussian2D> for RawGaussian2D {
    fn from(g: Gaussian2D) -> Self {
        RawGaussian2D {
            mu: g.mu,
            sigma_x: g.sigma_x,
            sigma_y: g.sigma_y,
            rho: g.rho,
        }
    }
}

impl Gaussian2D {
    pub fn new(mu: Vec2, sigma_x: f64, sigma_y: f64, rho: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::invalid(format!("non-finite mean {mu:?}")));
        }
        if !(sigma_x >= SIGMA_FLOOR && sigma_x.is_finite()) {
            return Err(Error::invalid(format!("sigma_x {sigma_x} below floor {SIGMA_FLOOR}")));
        }
        if !(sigma_y >= SIGMA_FLOOR && sigma_y.is_finite()) {
            return Err(Error::invalid(format!("sigma_y {sigma_y} below floor {SIGMA_FLOOR}")));
        }
        if !(rho.abs() <= RHO_MAX) {
            return Err(Error::invalid(format!("|rho| = {} exceeds {RHO_MAX}", rho.abs())));
        }
        Ok(Self {
            mu,
            sigma_x,
            sigma_y,
            rho,
        })
    }

    /// Isotropic Gaussian with deviation `sigma` on both axes.
    pub fn isotropic(mu: Vec2, sigma: f64) -> Result<Self> {
        Self::new(mu, sigma, sigma, 0.0)
    }

    /// Builds a Gaussian from a 2×2 covariance, flooring the deviations and
    /// clamping the correlation into the admissible range.
    pub fn from_covariance_floored(mu: Vec2, cxx: f64, cxy: f64, cyy: f64) -> Result<Self> {
        let sx = cxx.max(0.0).sqrt().max(SIGMA_FLOOR);
        let sy = cyy.max(0.0).sqrt().max(SIGMA_FLOOR);
        let rho = (cxy / (sx * sy)).clamp(-RHO_MAX, RHO_MAX);
        let rho = if rho.is_finite() { rho } else { 0.0 };
        Self::new(mu, sx, sy, rho)
    }

    pub fn mu(&self) -> Vec2 {
        self.mu
    }

    pub fn sigma_x(&self) -> f64 {
        self.sigma_x
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Covariance entries `(Σxx, Σxy, Σyy)`.
    pub fn covariance(&self) -> (f64, f64, f64) {
        (
            self.sigma_x * self.sigma_x,
            self.rho * self.sigma_x * self.sigma_y,
            self.sigma_y * self.sigma_y,
        )
    }

    pub fn with_mu(&self, mu: Vec2) -> Self {
        Self { mu, ..*self }
    }

    /// Squared Mahalanobis distance `(p−μ)ᵀ Σ⁻¹ (p−μ)`.
    pub fn mahalanobis_sq(&self, p: Vec2) -> f64 {
        let zx = (p.x - self.mu.x) / self.sigma_x;
        let zy = (p.y - self.mu.y) / self.sigma_y;
        (zx * zx - 2.0 * self.rho * zx * zy + zy * zy) / (1.0 - self.rho * self.rho)
    }

    pub fn mahalanobis(&self, p: Vec2) -> f64 {
        self.mahalanobis_sq(p).sqrt()
    }

    /// Negative log density at `p`.
    pub fn nll(&self, p: Vec2) -> f64 {
        let one_minus = 1.0 - self.rho * self.rho;
        (2.0 * PI * self.sigma_x * self.sigma_y * one_minus.sqrt()).ln() + 0.5 * self.mahalanobis_sq(p)
    }

    /// Differential entropy `ln(2πe·√det Σ)`.
    pub fn entropy(&self) -> f64 {
        let one_minus = 1.0 - self.rho * self.rho;
        1.0 + (2.0 * PI * self.sigma_x * self.sigma_y * one_minus.sqrt()).ln()
    }

    /// Draws one point through the Cholesky factor of Σ.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let c = (1.0 - self.rho * self.rho).sqrt();
        Vec2::new(
            self.mu.x + self.sigma_x * e1,
            self.mu.y + self.sigma_y * (self.rho * e1 + c * e2),
        )
    }

    /// Eigenvalues (descending) and the angle of the leading eigenvector of Σ.
    pub fn principal_axes(&self) -> (f64, f64, f64) {
        let (a, b, c) = self.covariance();
        let mean = 0.5 * (a + c);
        let half_diff = 0.5 * (a - c);
        let r = half_diff.hypot(b);
        let angle = 0.5 * (2.0 * b).atan2(a - c);
        (mean + r, (mean - r).max(0.0), angle)
    }

    /// `n` points evenly spaced in parameter on the contour where the
    /// Mahalanobis distance equals `k_sigma`.
    pub fn ellipse_points(&self, k_sigma: f64, n: usize) -> Result<Vec<Vec2>> {
        if !(k_sigma > 0.0) {
            return Err(Error::invalid(format!("k_sigma must be positive, got {k_sigma}")));
        }
        if n < 3 {
            return Err(Error::invalid(format!("need at least 3 ellipse points, got {n}")));
        }
        let (l1, l2, angle) = self.principal_axes();
        let major = Vec2::new(angle.cos(), angle.sin()) * (k_sigma * l1.sqrt());
        let minor = Vec2::new(-angle.sin(), angle.cos()) * (k_sigma * l2.sqrt());
        Ok((0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                self.mu + major * t.cos() + minor * t.sin()
            })
            .collect())
    }
}

/// A diagonal multivariate Gaussian, used for the latent distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianN {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiagGaussianN {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::invalid(format!(
                "mean has {} entries but sigma has {}",
                mu.len(),
                sigma.len()
            )));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("non-positive sigma {s}")));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("non-finite latent mean"));
        }
        Ok(Self { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// `KL(self ‖ N(0, I))` in closed form.
    pub fn kl_to_standard(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| {
                let v = s * s;
                v + m * m - 1.0 - v.ln()
            })
            .sum::<f64>()
    }

    /// `KL(self ‖ other)` for two diagonal Gaussians of equal dimension.
    pub fn kl_to(&self, other: &DiagGaussianN) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::invalid("KL between Gaussians of different dimension"));
        }
        Ok(self
            .mu
            .iter()
            .zip(&self.sigma)
            .zip(other.mu.iter().zip(&other.sigma))
            .map(|((mq, sq), (mp, sp))| (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5)
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}
