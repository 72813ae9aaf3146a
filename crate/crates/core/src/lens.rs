//! Unified camera model restricted to the single-parameter radial form.
//!
//! Incident angles are measured from the optical axis. The radius of a ray
//! with incidence `theta` is
//!
//! ```text
//! r(theta) = f * sin(theta) / (xi + cos(theta))
//! ```
//!
//! which is the image-plane-angle form `f cos(t) / (xi + sin(t))` under
//! `t = pi/2 - theta`. The focal length is always derived from `(xi, fov)` so
//! that the half field of view lands on the unit radius.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the angle and radius domains before a value is rejected.
pub const DOMAIN_TOL: f64 = 1e-12;

/// Default field of view used throughout the pipeline (175 degrees).
pub const DEFAULT_FOV_DEG: f64 = 175.0;

/// Focal length that maps `fov / 2` onto the unit radius.
pub fn focal_from_fov(xi: f64, fov: f64) -> f64 {
    let half = 0.5 * fov;
    (xi + half.cos()) / half.sin()
}

/// `dr / dtheta` of the unified model for an arbitrary, fixed focal length.
#[inline]
pub fn radius_derivative(xi: f64, focal: f64, theta: f64) -> f64 {
    let c = theta.cos();
    let den = xi + c;
    focal * (1.0 + xi * c) / (den * den)
}

/// Unified camera model with normalized focal length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LensModel {
    xi: f64,
    fov: f64,
    focal: f64,
}

impl LensModel {
    pub fn new(xi: f64, fov: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&xi) || !xi.is_finite() {
            return Err(Error::Domain(format!("xi = {xi} outside [0, 1]")));
        }
        if !(fov > 0.0 && fov < std::f64::consts::PI) {
            return Err(Error::Domain(format!("fov = {fov} rad outside (0, pi)")));
        }
        Ok(Self {
            xi,
            fov,
            focal: focal_from_fov(xi, fov),
        })
    }

    pub fn from_degrees(xi: f64, fov_deg: f64) -> Result<Self> {
        Self::new(xi, fov_deg.to_radians())
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn fov(&self) -> f64 {
        self.fov
    }

    pub fn fov_deg(&self) -> f64 {
        self.fov.to_degrees()
    }

    pub fn focal(&self) -> f64 {
        self.focal
    }

    /// Largest incident angle covered by the lens.
    pub fn max_theta(&self) -> f64 {
        0.5 * self.fov
    }

    fn check_theta(&self, theta: f64) -> Result<f64> {
        let hi = self.max_theta();
        if !(theta >= -DOMAIN_TOL && theta <= hi + DOMAIN_TOL) {
            return Err(Error::Domain(format!(
                "incident angle {theta} outside [0, {hi}]"
            )));
        }
        Ok(theta.clamp(0.0, hi))
    }

    /// Normalized image radius of a ray with incident angle `theta`.
    pub fn project(&self, theta: f64) -> Result<f64> {
        let theta = self.check_theta(theta)?;
        Ok(self.project_unchecked(theta))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, theta: f64) -> f64 {
        self.focal * theta.sin() / (self.xi + theta.cos())
    }

    /// Incident angle that projects to `radius`.
    ///
    /// With `t = tan(theta / 2)` the projection becomes
    /// `r (1 - xi) t^2 + 2 f t - r (1 + xi) = 0`; its nonnegative root is the
    /// branch that starts at the optical axis.
    pub fn unproject(&self, radius: f64) -> Result<f64> {
        if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&radius) {
            return Err(Error::Domain(format!("radius {radius} outside [0, 1]")));
        }
        let r = radius.clamp(0.0, 1.0);
        if r == 0.0 {
            return Ok(0.0);
        }
        let f = self.focal;
        let qa = r * (1.0 - self.xi);
        let disc = f * f + r * r * (1.0 - self.xi * self.xi);
        if disc < -1e-12 {
            return Err(Error::NoSolution(format!(
                "negative discriminant {disc} for radius {r}"
            )));
        }
        let sq = disc.max(0.0).sqrt();
        // (sq - f) / qa rewritten as r (1 + xi) / (f + sq) to avoid cancellation.
        let t = if qa == 0.0 {
            r / f
        } else {
            r * (1.0 + self.xi) / (f + sq)
        };
        let theta = 2.0 * t.atan();
        Ok(theta.min(self.max_theta()))
    }

    /// Analytic `dr / dtheta`.
    pub fn projection_derivative(&self, theta: f64) -> Result<f64> {
        let theta = self.check_theta(theta)?;
        Ok(self.derivative_unchecked(theta))
    }

    #[inline]
    pub(crate) fn derivative_unchecked(&self, theta: f64) -> f64 {
        radius_derivative(self.xi, self.focal, theta)
    }

    pub fn to_meta(&self) -> LensMeta {
        LensMeta {
            model: "unified".to_string(),
            xi: self.xi,
            fov_deg: self.fov_deg(),
        }
    }
}

/// JSON form of a lens: `{"model":"unified","xi":..,"fov_deg":..}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensMeta {
    pub model: String,
    pub xi: f64,
    pub fov_deg: f64,
}

impl LensMeta {
    pub fn to_lens(&self) -> Result<LensModel> {
        if self.model != "unified" {
            return Err(Error::Format(format!(
                "unsupported lens model '{}'",
                self.model
            )));
        }
        LensModel::from_degrees(self.xi, self.fov_deg)
    }
}

impl From<LensModel> for LensMeta {
    fn from(lens: LensModel) -> Self {
        lens.to_meta()
    }
}
