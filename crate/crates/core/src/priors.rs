//! Classical intensity priors: power-law gamma correction, linear and
//! optimized linear stretching, and local window contrast.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{percentile, Image};

/// Ordered set of gamma exponents applied in parallel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaBank {
    pub gammas: Vec<f64>,
    pub epsilon: f64,
}

impl Default for GammaBank {
    fn default() -> Self {
        Self { gammas: vec![0.25, 0.5, 2.0, 4.0], epsilon: 1.0 }
    }
}

impl GammaBank {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() || self.gammas.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidConfig(format!("gammas must be positive: {:?}", self.gammas)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive: {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Percentile truncation and bound-adjustment fractions for stretching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OlsParams {
    pub p_min: f64,
    pub p_max: f64,
    pub p_a_min: f64,
    pub p_a_max: f64,
}

impl Default for OlsParams {
    fn default() -> Self {
        Self { p_min: 0.01, p_max: 0.99, p_a_min: 0.0, p_a_max: 0.0 }
    }
}

impl OlsParams {
    pub fn new(p_min: f64, p_max: f64, p_a_min: f64, p_a_max: f64) -> Result<Self> {
        let p = Self { p_min, p_max, p_a_min, p_a_max };
        p.validate()?;
        Ok(p)
    }

    /// Default truncation fractions with the given adjustments.
    pub fn with_adjustment(p_a_min: f64, p_a_max: f64) -> Self {
        Self { p_a_min, p_a_max, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.p_min && self.p_min < self.p_max && self.p_max <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= p_min < p_max <= 1, got ({}, {})",
                self.p_min, self.p_max
            )));
        }
        if !(self.p_a_min >= 0.0 && self.p_a_max >= 0.0) {
            return Err(Error::InvalidConfig("adjustment fractions must be >= 0".into()));
        }
        Ok(())
    }
}

/// Expanded truncation interval of one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StretchBounds {
    pub lo: f64,
    pub hi: f64,
}

impl StretchBounds {
    /// Expands the truncated interval `[t_min, t_max]` by the adjustment
    /// fractions of its width.
    pub fn expand(t_min: f64, t_max: f64, params: &OlsParams) -> Self {
        let span = t_max - t_min;
        Self { lo: t_min - params.p_a_min * span, hi: t_max + params.p_a_max * span }
    }

    #[inline]
    pub fn map(&self, v: f64) -> f64 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// Truncation bounds for one channel's values. `channel` is only used to
/// label a degenerate-range error.
pub fn ols_bounds(values: &[f64], params: &OlsParams, channel: usize) -> Result<StretchBounds> {
    let t_min = percentile(values, params.p_min)?;
    let t_max = percentile(values, params.p_max)?;
    if t_max <= t_min {
        return Err(Error::DegenerateRange { channel });
    }
    Ok(StretchBounds::expand(t_min, t_max, params))
}

/// `ε·I^γ` elementwise.
pub fn gamma_correct(img: &Image, gamma: f64, epsilon: f64) -> Result<Image> {
    if !(gamma > 0.0) || !(epsilon > 0.0) {
        return Err(Error::Domain(format!("gamma {gamma} and epsilon {epsilon} must be positive")));
    }
    if let Some(v) = img.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Domain(format!("gamma correction of negative value {v}")));
    }
    Ok(img.map(|v| epsilon * v.powf(gamma)))
}

pub fn gamma_bank_apply(img: &Image, bank: &GammaBank) -> Result<Vec<Image>> {
    bank.validate()?;
    bank.gammas.iter().map(|&g| gamma_correct(img, g, bank.epsilon)).collect()
}

/// Per-channel min/max stretch to [0, 1].
pub fn linear_stretch(img: &Image) -> Result<Image> {
    let mut out = img.clone();
    for c in 0..img.channels() {
        let plane = img.channel(c);
        let (lo, hi) = plane
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if hi <= lo {
            return Err(Error::DegenerateRange { channel: c });
        }
        let mapped: Vec<f64> = plane.iter().map(|&v| (v - lo) / (hi - lo)).collect();
        out.set_channel(c, &mapped);
    }
    Ok(out)
}

/// Percentile-truncated stretch with adjusted bounds, clamped to [0, 1].
/// Each channel is handled independently.
pub fn optimized_linear_stretch(img: &Image, params: &OlsParams) -> Result<Image> {
    params.validate()?;
    let mut out = img.clone();
    for c in 0..img.channels() {
        let plane = img.channel(c);
        let bounds = ols_bounds(&plane, params, c)?;
        let mapped: Vec<f64> = plane.iter().map(|&v| bounds.map(v)).collect();
        out.set_channel(c, &mapped);
    }
    Ok(out)
}

/// Per-channel `max − min` over the `window × window` neighbourhood of each
/// pixel, with edge-replicated borders.
pub fn local_contrast(img: &Image, window: usize) -> Result<Image> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::BadWindow(window));
    }
    let r = window / 2;
    let (h, w, ch) = img.dims();
    let mut out = Image::filled(h, w, ch, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for dy in 0..window {
                    let yy = (y + dy).saturating_sub(r).min(h - 1);
                    for dx in 0..window {
                        let xx = (x + dx).saturating_sub(r).min(w - 1);
                        let v = img.get(yy, xx, c);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                out.set(y, x, c, hi - lo);
            }
        }
    }
    Ok(out)
}
