//! Paired training data: haze and sand through the scattering model with a
//! depth map, low light through illumination-dependent darkening.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{blur_plane, gaussian_kernel, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Haze,
    Sand,
    Lowlight,
}

impl SceneKind {
    pub const ALL: [SceneKind; 3] = [SceneKind::Haze, SceneKind::Sand, SceneKind::Lowlight];

    pub fn as_str(self) -> &'static str {
        match self {
            SceneKind::Haze => "haze",
            SceneKind::Sand => "sand",
            SceneKind::Lowlight => "lowlight",
        }
    }

    pub fn needs_depth(self) -> bool {
        !matches!(self, SceneKind::Lowlight)
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haze" => Ok(SceneKind::Haze),
            "sand" => Ok(SceneKind::Sand),
            "lowlight" | "low-light" | "low" => Ok(SceneKind::Lowlight),
            other => Err(Error::parse("scene kind", format!("unknown scene {other:?}"))),
        }
    }
}

/// Physical parameters of one synthesized degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: SceneKind,
    /// Scattering coefficient per unit (normalized) depth.
    pub beta: f64,
    pub atmo_light: [f64; 3],
    pub dark_gamma: f64,
    pub illum_scale: f64,
}

impl DegradationSpec {
    pub fn haze(beta: f64, atmo_light: [f64; 3]) -> Self {
        Self { kind: SceneKind::Haze, beta, atmo_light, dark_gamma: 2.0, illum_scale: 1.0 }
    }

    pub fn sand(beta: f64, atmo_light: [f64; 3]) -> Self {
        Self { kind: SceneKind::Sand, beta, atmo_light, dark_gamma: 2.0, illum_scale: 1.0 }
    }

    pub fn lowlight(dark_gamma: f64, illum_scale: f64) -> Self {
        Self { kind: SceneKind::Lowlight, beta: 0.0, atmo_light: [0.0; 3], dark_gamma, illum_scale }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SceneKind::Haze | SceneKind::Sand => {
                if !(self.beta >= 0.0 && self.beta.is_finite()) {
                    return Err(Error::Domain(format!("beta must be >= 0, got {}", self.beta)));
                }
                check_atmo_light(self.kind, self.atmo_light)
            }
            SceneKind::Lowlight => {
                if !(self.dark_gamma > 1.0 && self.dark_gamma.is_finite()) {
                    return Err(Error::Domain(format!("dark_gamma must be > 1, got {}", self.dark_gamma)));
                }
                if !(self.illum_scale > 0.0 && self.illum_scale <= 1.0) {
                    return Err(Error::Domain(format!("illum_scale must be in (0, 1], got {}", self.illum_scale)));
                }
                Ok(())
            }
        }
    }
}

/// Largest channel spread tolerated for a haze airlight.
pub const HAZE_MAX_SPREAD: f64 = 0.1;

fn check_atmo_light(kind: SceneKind, a: [f64; 3]) -> Result<()> {
    if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Domain(format!("atmospheric light {a:?} outside [0, 1]")));
    }
    match kind {
        SceneKind::Haze => {
            let spread = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - a.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread > HAZE_MAX_SPREAD + 1e-12 {
                return Err(Error::Domain(format!("haze light {a:?} is not near-achromatic")));
            }
        }
        SceneKind::Sand => {
            if !(a[0] >= a[1] && a[1] >= a[2]) {
                return Err(Error::Domain(format!("sand light {a:?} must satisfy R >= G >= B")));
            }
        }
        SceneKind::Lowlight => {}
    }
    Ok(())
}

/// Named list of candidate airlight colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtmoLightSet {
    pub name: String,
    pub entries: Vec<[f64; 3]>,
}

impl AtmoLightSet {
    /// Eight gray levels between 0.7 and 1.0.
    pub fn default_haze() -> Self {
        let entries = (0..8)
            .map(|i| {
                let v = round3(0.7 + 0.3 * i as f64 / 7.0);
                [v, v, v]
            })
            .collect();
        Self { name: "haze".into(), entries }
    }

    /// Eight red-dominant colors: R in [0.75, 0.95], G = R - [0.1, 0.2],
    /// B = G - [0.15, 0.3].
    pub fn default_sand() -> Self {
        let entries = (0..8)
            .map(|i| {
                let r = 0.75 + 0.2 * i as f64 / 7.0;
                let g = r - (0.1 + 0.1 * ((3 * i) % 8) as f64 / 7.0);
                let b = g - (0.15 + 0.15 * ((5 * i) % 8) as f64 / 7.0);
                [round3(r), round3(g).clamp(0.0, 1.0), round3(b).clamp(0.0, 1.0)]
            })
            .collect();
        Self { name: "sand".into(), entries }
    }

    pub fn default_for(kind: SceneKind) -> Option<Self> {
        match kind {
            SceneKind::Haze => Some(Self::default_haze()),
            SceneKind::Sand => Some(Self::default_sand()),
            SceneKind::Lowlight => None,
        }
    }

    /// Parses one `R G B` triple per line; blank lines and `#` comments are
    /// skipped.
    pub fn parse(name: &str, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(format!("{name} line {}", lineno + 1), e))?;
            if vals.len() != 3 {
                return Err(Error::parse(
                    format!("{name} line {}", lineno + 1),
                    format!("expected 3 values, found {}", vals.len()),
                ));
            }
            entries.push([vals[0], vals[1], vals[2]]);
        }
        Ok(Self { name: name.into(), entries })
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# atmospheric light set: {}\n# R G B\n", self.name);
        for e in &self.entries {
            s.push_str(&format!("{} {} {}\n", e[0], e[1], e[2]));
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&name, &text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Checks every entry against the color constraint of `kind`.
    pub fn validate_for(&self, kind: SceneKind) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptySet);
        }
        self.entries.iter().try_for_each(|&a| check_atmo_light(kind, a))
    }
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Uniform draw of one entry, deterministic in `seed`.
pub fn sample_atmo_light(set: &AtmoLightSet, seed: u64) -> Result<[f64; 3]> {
    if set.entries.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(set.entries[rng.random_range(0..set.entries.len())])
}

/// Ranges from which per-sample degradation parameters are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthRanges {
    pub beta: (f64, f64),
    pub dark_gamma: (f64, f64),
    pub illum_scale: (f64, f64),
}

impl Default for SynthRanges {
    fn default() -> Self {
        Self { beta: (0.8, 2.5), dark_gamma: (1.5, 2.5), illum_scale: (0.4, 0.9) }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.beta) || self.beta.0 < 0.0 {
            return Err(Error::InvalidConfig(format!("beta range {:?}", self.beta)));
        }
        if !ok(self.dark_gamma) || self.dark_gamma.0 <= 1.0 {
            return Err(Error::InvalidConfig(format!("dark_gamma range {:?}", self.dark_gamma)));
        }
        if !ok(self.illum_scale) || self.illum_scale.0 <= 0.0 || self.illum_scale.1 > 1.0 {
            return Err(Error::InvalidConfig(format!("illum_scale range {:?}", self.illum_scale)));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws a complete spec of the given kind. Haze and sand pick their airlight
/// from `lights`.
pub fn sample_spec(
    kind: SceneKind,
    ranges: &SynthRanges,
    lights: Option<&AtmoLightSet>,
    seed: u64,
) -> Result<DegradationSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SceneKind::Haze | SceneKind::Sand => {
            let beta = draw(&mut rng, ranges.beta);
            let fallback;
            let set = match lights {
                Some(s) => s,
                None => {
                    fallback = AtmoLightSet::default_for(kind).expect("scatter kinds have defaults");
                    &fallback
                }
            };
            let a = sample_atmo_light(set, rng.random())?;
            Ok(DegradationSpec { kind, beta, atmo_light: a, dark_gamma: 2.0, illum_scale: 1.0 })
        }
        SceneKind::Lowlight => {
            let g = draw(&mut rng, ranges.dark_gamma);
            let s = draw(&mut rng, ranges.illum_scale);
            Ok(DegradationSpec::lowlight(g, s))
        }
    }
}

/// `J·t + A·(1 − t)` with `t = exp(−β·d)` per pixel.
pub fn synth_scatter(clean: &Image, depth: &Image, beta: f64, atmo_light: [f64; 3]) -> Result<Image> {
    let (h, w, c) = clean.dims();
    if depth.channels() != 1 || depth.height() != h || depth.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "depth {:?} for image {:?}",
            depth.dims(),
            clean.dims()
        )));
    }
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected RGB, got {c} channels")));
    }
    if depth.data().iter().any(|&d| d < 0.0 || d.is_nan()) {
        return Err(Error::NegativeDepth);
    }
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!("beta must be >= 0, got {beta}")));
    }
    let mut out = clean.clone();
    for (px, &d) in out.data_mut().chunks_mut(3).zip(depth.data()) {
        let t = (-beta * d).exp();
        for (v, &a) in px.iter_mut().zip(&atmo_light) {
            *v = *v * t + a * (1.0 - t);
        }
    }
    Ok(out)
}

/// Rescales depth by its maximum so the farthest point has depth 1.
pub fn normalize_depth(depth: &Image) -> Result<Image> {
    if depth.data().iter().any(|&d| d < 0.0 || d.is_nan()) {
        return Err(Error::NegativeDepth);
    }
    let max = depth.data().iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(depth.clone());
    }
    Ok(depth.map(|d| d / max))
}

/// Smooth illumination estimate: Gaussian-blurred luminance with a kernel
/// radius of one eighth of the smaller image side.
pub fn illumination_map(clean: &Image) -> Image {
    let lum = clean.luminance();
    let radius = (clean.height().min(clean.width()) / 8).max(1);
    let kernel = gaussian_kernel(radius as f64 / 3.0, radius);
    let data = blur_plane(lum.data(), lum.height(), lum.width(), &kernel);
    Image::new(lum.height(), lum.width(), 1, data).expect("blur preserves size")
}

/// Darkens with the illumination map derived from `clean`.
pub fn synth_lowlight(clean: &Image, dark_gamma: f64, illum_scale: f64) -> Result<Image> {
    check_lowlight(dark_gamma, illum_scale)?;
    synth_lowlight_with(clean, &illumination_map(clean), dark_gamma, illum_scale)
}

/// `clean·(s·L)^(γ−1)` clamped to [0, 1] for a given single-channel `L`.
/// `dark_gamma = 1` is accepted as the no-op limit.
pub fn synth_lowlight_with(clean: &Image, illum: &Image, dark_gamma: f64, illum_scale: f64) -> Result<Image> {
    check_lowlight(dark_gamma, illum_scale)?;
    if illum.channels() != 1 || illum.height() != clean.height() || illum.width() != clean.width() {
        return Err(Error::ShapeMismatch(format!(
            "illumination {:?} for image {:?}",
            illum.dims(),
            clean.dims()
        )));
    }
    let c = clean.channels();
    let e = dark_gamma - 1.0;
    let mut out = clean.clone();
    for (px, &l) in out.data_mut().chunks_mut(c).zip(illum.data()) {
        let f = (illum_scale * l.clamp(0.0, 1.0)).powf(e);
        for v in px {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn check_lowlight(dark_gamma: f64, illum_scale: f64) -> Result<()> {
    if !(dark_gamma >= 1.0 && dark_gamma.is_finite()) {
        return Err(Error::Domain(format!("dark_gamma must be >= 1, got {dark_gamma}")));
    }
    if !(illum_scale > 0.0 && illum_scale <= 1.0) {
        return Err(Error::Domain(format!("illum_scale must be in (0, 1], got {illum_scale}")));
    }
    Ok(())
}

/// Degrades `clean` according to `spec`, returning `(degraded, clean)`.
/// Depth is normalized to [0, 1] before scattering.
pub fn synth_pair(clean: &Image, depth: Option<&Image>, spec: &DegradationSpec) -> Result<(Image, Image)> {
    let degraded = match spec.kind {
        SceneKind::Haze | SceneKind::Sand => {
            let depth = depth.ok_or_else(|| Error::MissingDepth {
                kind: spec.kind.to_string(),
                entry: "input image".into(),
            })?;
            synth_scatter(clean, &normalize_depth(depth)?, spec.beta, spec.atmo_light)?
        }
        SceneKind::Lowlight => synth_lowlight(clean, spec.dark_gamma, spec.illum_scale)?,
    };
    Ok((degraded, clean.clone()))
}
