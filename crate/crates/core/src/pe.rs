//! Deterministic multi-scale spherical position encoding.
//!
//! For each scale `r_i` on a geometric ladder from `r_min` to `r_max`
//! (meters), the angular scale is `a_i = r_i / R` and the encoding emits
//! `sin(lat/a_i)`, `cos(lat/a_i) sin(lon/a_i)`, `cos(lat/a_i) cos(lon/a_i)`
//! with angles in radians. This is a harness-defined basis in the spirit of
//! sphereC; it is not claimed to be numerically identical to any published
//! implementation.

use serde::{Deserialize, Serialize};

use crate::repr::CoordinateEncoder;
use crate::{Error, Result};

pub const PE_ENCODER_ID: &str = "pe_spherec_approx";

/// Earth radius used to turn meter scales into angular scales.
pub const PE_EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeConfig {
    pub n_freq: usize,
    pub r_min_m: f64,
    pub r_max_m: f64,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            n_freq: 64,
            r_min_m: 10.0,
            r_max_m: 10_000_000.0,
        }
    }
}

impl PeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_freq == 0 || !(self.r_min_m > 0.0) || !(self.r_min_m < self.r_max_m) {
            return Err(Error::InvalidArgument(format!("invalid PE config {self:?}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        3 * self.n_freq
    }

    /// Angular scales in radians, smallest first.
    pub fn angular_scales(&self) -> Vec<f64> {
        let ratio = self.r_max_m / self.r_min_m;
        let steps = (self.n_freq.max(2) - 1) as f64;
        (0..self.n_freq)
            .map(|i| self.r_min_m * ratio.powf(i as f64 / steps) / PE_EARTH_RADIUS_M)
            .collect()
    }
}

/// Position encoder holding precomputed scales.
#[derive(Debug, Clone)]
pub struct PeEncoder {
    cfg: PeConfig,
    inv_scales: Vec<f64>,
}

impl PeEncoder {
    pub fn new(cfg: PeConfig) -> Result<Self> {
        cfg.validate()?;
        let inv_scales = cfg.angular_scales().into_iter().map(|a| 1.0 / a).collect();
        Ok(PeEncoder { cfg, inv_scales })
    }

    pub fn config(&self) -> &PeConfig {
        &self.cfg
    }

    pub fn encode_into(&self, lon: f64, lat: f64, out: &mut Vec<f64>) {
        let (lam, phi) = (lon.to_radians(), lat.to_radians());
        out.reserve(self.cfg.dim());
        for &k in &self.inv_scales {
            let (s_lat, c_lat) = (phi * k).sin_cos();
            let (s_lon, c_lon) = (lam * k).sin_cos();
            out.extend_from_slice(&[s_lat, c_lat * s_lon, c_lat * c_lon]);
        }
    }
}

impl Default for PeEncoder {
    fn default() -> Self {
        PeEncoder::new(PeConfig::default()).expect("default PE config is valid")
    }
}

/// Encodes one point with the given configuration.
pub fn encode(lon: f64, lat: f64, cfg: &PeConfig) -> Result<Vec<f64>> {
    let enc = PeEncoder::new(*cfg)?;
    let mut v = Vec::new();
    enc.encode_into(lon, lat, &mut v);
    Ok(v)
}

impl CoordinateEncoder for PeEncoder {
    fn id(&self) -> &str {
        PE_ENCODER_ID
    }

    fn dim(&self) -> usize {
        self.cfg.dim()
    }

    fn encode(&self, lon: f64, lat: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.cfg.dim());
        self.encode_into(lon, lat, &mut v);
        v
    }
}
