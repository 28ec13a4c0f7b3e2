//! Path-loss and ranging error models.
//!
//! RSS is handled in dB around a log-distance mean with Gaussian shadowing,
//! TOA in seconds around `d / c` with an unbiased Gaussian error whose standard
//! deviation depends on the propagation condition. All quantities are SI
//! internally (meters, seconds); nanoseconds only appear in config files.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Propagation speed of the radio wave, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Default path-loss exponent.
pub const DEFAULT_ETA: f64 = 3.086;
/// Default shadowing standard deviation in dB.
pub const DEFAULT_SHADOW_STD_DB: f64 = 8.0;

/// Parameters of the single channel condition used for every link in a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Path-loss exponent.
    pub eta: f64,
    /// Calibration loss in dB. Shifts every RSS mean; has no effect on accuracy.
    pub g0_db: f64,
    /// Shadowing standard deviation, dB.
    pub sigma_g_db: f64,
    /// TOA error standard deviation, seconds.
    pub sigma_tau_s: f64,
    /// Rician factor (informational).
    pub k_factor: f64,
    /// Mean excess delay of the reflected path, seconds (informational).
    pub mean_excess_delay_s: f64,
}

impl ChannelParams {
    /// Clear line-of-sight: K = 5, 25.8 ns excess delay, 8.8 ns TOA error.
    pub fn clear() -> Self {
        ChannelParams {
            eta: DEFAULT_ETA,
            g0_db: 0.0,
            sigma_g_db: DEFAULT_SHADOW_STD_DB,
            sigma_tau_s: 8.8e-9,
            k_factor: 5.0,
            mean_excess_delay_s: 25.8e-9,
        }
    }

    /// Heavily obstructed: K = 2, 76.9 ns excess delay, 40.2 ns TOA error.
    pub fn obstructed() -> Self {
        ChannelParams {
            sigma_tau_s: 40.2e-9,
            k_factor: 2.0,
            mean_excess_delay_s: 76.9e-9,
            ..Self::clear()
        }
    }

    /// Look up a named preset (`"clear"` or `"obstructed"`).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "clear" => Some(Self::clear()),
            "obstructed" => Some(Self::obstructed()),
            _ => None,
        }
    }

    /// Same channel with every noise source switched off.
    pub fn noiseless(mut self) -> Self {
        self.sigma_g_db = 0.0;
        self.sigma_tau_s = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Domain(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.sigma_g_db >= 0.0 && self.sigma_g_db.is_finite()) {
            return Err(Error::Domain(format!(
                "shadowing std must be >= 0, got {}",
                self.sigma_g_db
            )));
        }
        if !(self.sigma_tau_s >= 0.0 && self.sigma_tau_s.is_finite()) {
            return Err(Error::Domain(format!(
                "TOA std must be >= 0, got {}",
                self.sigma_tau_s
            )));
        }
        if !self.g0_db.is_finite() {
            return Err(Error::Domain("g0 must be finite".into()));
        }
        Ok(())
    }

    /// Mean path loss `10 η log10(d) + g0` in dB.
    pub fn mean_path_loss_db(&self, d: f64) -> Result<f64> {
        check_positive_distance(d)?;
        Ok(10.0 * self.eta * d.log10() + self.g0_db)
    }

    /// One shadowed path-loss draw in dB.
    pub fn sample_path_loss_db<R: Rng + ?Sized>(&self, d: f64, rng: &mut R) -> Result<f64> {
        let mean = self.mean_path_loss_db(d)?;
        let z: f64 = StandardNormal.sample(rng);
        Ok(mean + self.sigma_g_db * z)
    }

    /// Standard deviation of an RSS-only range estimate at distance `d`.
    /// Grows linearly with `d`.
    pub fn rss_distance_std(&self, d: f64) -> Result<f64> {
        check_positive_distance(d)?;
        Ok(std::f64::consts::LN_10 * self.sigma_g_db * d / (10.0 * self.eta))
    }

    /// One noisy time-of-arrival in seconds.
    pub fn sample_toa<R: Rng + ?Sized>(&self, d: f64, rng: &mut R) -> Result<f64> {
        if !(d >= 0.0) || !d.is_finite() {
            return Err(Error::Domain(format!("distance must be >= 0, got {d}")));
        }
        let z: f64 = StandardNormal.sample(rng);
        Ok(d / SPEED_OF_LIGHT + self.sigma_tau_s * z)
    }

    /// TOA error expressed as a range error, `c σ_τ`, in meters.
    pub fn toa_range_std(&self) -> f64 {
        SPEED_OF_LIGHT * self.sigma_tau_s
    }

    /// Slope of the mean path loss with respect to ln(d): `10 η / ln 10` dB.
    pub fn rss_slope(&self) -> f64 {
        10.0 * self.eta / std::f64::consts::LN_10
    }
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self::clear()
    }
}

fn check_positive_distance(d: f64) -> Result<()> {
    if d > 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "distance must be > 0 (coincident nodes?), got {d}"
        )))
    }
}
