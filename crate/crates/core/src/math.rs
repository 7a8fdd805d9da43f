//! Small fixed-size linear algebra, bivariate Gaussians, activations and
//! displacement metrics.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or displacement in the ground plane, in meters.
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

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x, self.y]
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(a: [f64; 2]) -> Self {
        Self::new(a[0], a[1])
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// 2x2 matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2(pub [f64; 4]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([1.0, 0.0, 0.0, 1.0]);

    pub fn diag(a: f64, b: f64) -> Self {
        Mat2([a, 0.0, 0.0, b])
    }

    pub fn xx(&self) -> f64 {
        self.0[0]
    }
    pub fn xy(&self) -> f64 {
        self.0[1]
    }
    pub fn yx(&self) -> f64 {
        self.0[2]
    }
    pub fn yy(&self) -> f64 {
        self.0[3]
    }

    pub fn det(&self) -> f64 {
        self.0[0] * self.0[3] - self.0[1] * self.0[2]
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[3]
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2([self.0[0], self.0[2], self.0[1], self.0[3]])
    }

    pub fn matmul(&self, o: &Mat2) -> Mat2 {
        let [a, b, c, d] = self.0;
        let [e, f, g, h] = o.0;
        Mat2([a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Exact symmetry plus strictly positive Cholesky pivots.
    pub fn is_spd(&self) -> bool {
        if !self.is_finite() || self.0[1] != self.0[2] {
            return false;
        }
        // pivots of the Cholesky factorization
        self.0[0] > 0.0 && self.schur() > 0.0
    }

    /// `yy - xy² / xx`, the second Cholesky pivot.
    fn schur(&self) -> f64 {
        self.0[3] - self.0[1] * self.0[1] / self.0[0]
    }

    /// Eigenvalues of the symmetric part, largest first.
    pub fn sym_eigenvalues(&self) -> (f64, f64) {
        let a = self.0[0];
        let c = self.0[3];
        let b = 0.5 * (self.0[1] + self.0[2]);
        let mean = 0.5 * (a + c);
        let r = (0.5 * (a - c)).hypot(b);
        (mean + r, mean - r)
    }
}

/// Bivariate Gaussian with SPD covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2D {
    pub mean: Vec2,
    pub cov: Mat2,
}

impl Gaussian2D {
    pub fn new(mean: Vec2, cov: Mat2) -> Result<Self> {
        if !mean.is_finite() {
            return Err(Error::InvalidInput("non-finite Gaussian mean".into()));
        }
        if !cov.is_spd() {
            return Err(Error::InvalidInput(format!(
                "covariance is not SPD: {:?}",
                cov.0
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn isotropic(mean: Vec2, sigma: f64) -> Result<Self> {
        Self::new(mean, Mat2::diag(sigma * sigma, sigma * sigma))
    }
}

/// Negative log-density of `z` under `g`.
pub fn gaussian2d_nll(g: &Gaussian2D, z: Vec2) -> Result<f64> {
    if !g.cov.is_spd() {
        return Err(Error::InvalidInput(format!(
            "covariance is not SPD: {:?}",
            g.cov.0
        )));
    }
    let d = z - g.mean;
    let [a, b, _, _] = g.cov.0;
    let s = g.cov.schur();
    // whiten through the Cholesky factor: det = a·s
    let u0 = d.x / a.sqrt();
    let u1 = (d.y - b / a * d.x) / s.sqrt();
    Ok((2.0 * PI).ln() + 0.5 * (a * s).ln() + 0.5 * (u0 * u0 + u1 * u1))
}

/// Floor on the Cholesky diagonal, in meters. Without it a network trained
/// on noiseless targets drives `softplus` to ~1e-100 and the covariance
/// underflows.
pub const CHOL_DIAG_MIN: f64 = 1e-6;

/// Cholesky diagonal entry `max(softplus(raw), CHOL_DIAG_MIN)` and its
/// derivative with respect to `raw`.
#[inline]
pub fn chol_diag(raw: f64) -> (f64, f64) {
    let s = softplus(raw);
    if s > CHOL_DIAG_MIN {
        (s, sigmoid(raw))
    } else {
        (CHOL_DIAG_MIN, 0.0)
    }
}

/// Maps three unconstrained reals to an SPD covariance through a lower
/// Cholesky factor `[[d(r0), 0], [r2, d(r1)]]` with `d` from [`chol_diag`].
pub fn chol_params_to_cov(raw: [f64; 3]) -> Mat2 {
    let a = chol_diag(raw[0]).0;
    let b = chol_diag(raw[1]).0;
    let c = raw[2];
    Mat2([a * a, a * c, a * c, c * c + b * b])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative expressed through the input `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn activation(kind: Activation, x: f64) -> f64 {
    kind.apply(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean and population standard deviation of per-step Euclidean errors.
pub fn ade(est: &[Vec2], gt: &[Vec2]) -> Result<(f64, f64)> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "ade: length mismatch ({} vs {})",
            est.len(),
            gt.len()
        )));
    }
    let errors: Vec<f64> = est.iter().zip(gt).map(|(e, g)| (*e - *g).norm()).collect();
    mean_std(&errors)
}

/// Mean and population standard deviation of a nonempty sample.
pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::InvalidInput("empty sample".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Semi-axes and orientation of the `n_sigma` contour of a covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Angle of the major axis from +x, radians in (-π/2, π/2].
    pub angle: f64,
}

pub fn covariance_ellipse(cov: &Mat2, n_sigma: f64) -> Ellipse {
    let (l1, l2) = cov.sym_eigenvalues();
    let b = 0.5 * (cov.xy() + cov.yx());
    let angle = 0.5 * (2.0 * b).atan2(cov.xx() - cov.yy());
    Ellipse {
        semi_major: n_sigma * l1.max(0.0).sqrt(),
        semi_minor: n_sigma * l2.max(0.0).sqrt(),
        angle,
    }
}
