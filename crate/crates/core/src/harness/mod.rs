//! Dataset assembly, the training loop, the OLS adjustment sweep and the
//! module/loss ablations.

mod ablation;
mod sweep;
mod train;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degrade::{DegradationSpec, SceneKind, SynthRanges};
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::imaging::Image;
use crate::losses::{FeatureTapWeights, LossWeights};
use crate::metrics::list_images;
use crate::net::NetworkConfig;

pub use ablation::{run_ablation, AblationKind, AblationReport, AblationRow, SplitScore};
pub use sweep::{load_sweep_sets, ols_sweep, parse_grid, SweepReport, SweepRow, SweepSet};
pub use train::{
    evaluate_entries, learning_rate, train, Adam, LoadedCorpus, LogRow, PairScore, TrainLog, TrainOutcome,
    CHECKPOINT_FILE, LOG_FILE,
};

/// Fraction of the corpus assigned to each scene kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneMix {
    pub haze: f64,
    pub sand: f64,
    pub lowlight: f64,
}

impl Default for SceneMix {
    fn default() -> Self {
        Self { haze: 1.0 / 3.0, sand: 1.0 / 3.0, lowlight: 1.0 / 3.0 }
    }
}

impl SceneMix {
    pub fn fraction(&self, kind: SceneKind) -> f64 {
        match kind {
            SceneKind::Haze => self.haze,
            SceneKind::Sand => self.sand,
            SceneKind::Lowlight => self.lowlight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = [self.haze, self.sand, self.lowlight];
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig(format!("scene_mix fractions must be >= 0: {f:?}")));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("scene_mix sums to {sum}, not 1")));
        }
        Ok(())
    }

    /// Largest-remainder split of `n` items. Ties go to the earlier kind.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let exact: Vec<f64> = SceneKind::ALL.iter().map(|&k| self.fraction(k) * n as f64).collect();
        let mut counts: [usize; 3] = [0; 3];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut left = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub loss_weights: LossWeights,
    pub tap_weights: FeatureTapWeights,
    pub network: NetworkConfig,
    pub scene_mix: SceneMix,
    pub extractor: ExtractorConfig,
    pub synth: SynthRanges,
    pub haze_lights: Option<PathBuf>,
    pub sand_lights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            lr_drop_epochs: vec![30, 60, 90],
            lr_drop_factor: 10.0,
            batch_size: 4,
            crop_size: 64,
            seed: 0,
            max_steps: None,
            loss_weights: LossWeights::default(),
            tap_weights: FeatureTapWeights::default(),
            network: NetworkConfig::default(),
            scene_mix: SceneMix::default(),
            extractor: ExtractorConfig::default(),
            synth: SynthRanges::default(),
            haze_lights: None,
            sand_lights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!("lr_drop_factor must be > 0, got {}", self.lr_drop_factor));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_drop_epochs must be strictly increasing: {:?}", self.lr_drop_epochs));
        }
        if self.lr_drop_epochs.iter().any(|&e| e >= self.epochs) {
            return bad(format!("lr_drop_epochs {:?} must be < epochs ({})", self.lr_drop_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.crop_size < 8 || self.crop_size % 4 != 0 {
            return bad(format!("crop_size must be a multiple of 4 and >= 8, got {}", self.crop_size));
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1 when given".into());
        }
        self.loss_weights.validate()?;
        self.network.validate()?;
        self.scene_mix.validate()?;
        self.synth.validate()
    }

    pub fn from_toml(text: &str, context: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(context, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("train config", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One clean image and how its degraded partner is obtained: from a file,
/// from a fixed spec, or drawn afresh each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: SceneKind,
    pub clean: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DegradationSpec>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(&e.id) {
                return Err(Error::InvalidConfig(format!("duplicate manifest id {}", e.id)));
            }
            if e.kind.needs_depth() && e.depth.is_none() && e.degraded.is_none() {
                return Err(Error::EmptyCorpus(format!(
                    "{} entry {} has neither a depth map nor a degraded file",
                    e.kind, e.id
                )));
            }
            if let Some(s) = &e.spec {
                if s.kind != e.kind {
                    return Err(Error::InvalidConfig(format!("entry {}: spec kind {} != {}", e.id, s.kind, e.kind)));
                }
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.split == split)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse("manifest", e.to_string()))
    }

    /// Reads a manifest; relative paths are taken relative to the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut e.clean);
            e.depth.as_mut().map(fix);
            e.degraded.as_mut().map(fix);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::store::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }
}

/// How a clean corpus is divided into scene kinds and splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifestPlan {
    pub scene_mix: SceneMix,
    /// Share of each kind's images held out for testing.
    pub test_fraction: f64,
}

impl Default for ManifestPlan {
    fn default() -> Self {
        Self { scene_mix: SceneMix::default(), test_fraction: 0.0 }
    }
}

/// Shuffles the PNGs under `clean_root` with `seed` and assigns scene kinds
/// in largest-remainder proportions. Haze and sand entries take the
/// same-named depth map from `depth_root`.
pub fn build_manifest(
    clean_root: &Path,
    depth_root: Option<&Path>,
    plan: &ManifestPlan,
    seed: u64,
) -> Result<DatasetManifest> {
    plan.scene_mix.validate()?;
    if !(0.0..1.0).contains(&plan.test_fraction) {
        return Err(Error::InvalidConfig(format!("test_fraction {} outside [0, 1)", plan.test_fraction)));
    }
    let mut files = list_images(clean_root)?;
    if files.is_empty() {
        return Err(Error::EmptyCorpus(format!("no PNG images in {}", clean_root.display())));
    }
    files.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let counts = plan.scene_mix.counts(files.len());
    let mut entries = Vec::with_capacity(files.len());
    let mut it = files.into_iter();
    for (k, &kind) in SceneKind::ALL.iter().enumerate() {
        let n = counts[k];
        let n_test = (n as f64 * plan.test_fraction).round() as usize;
        for i in 0..n {
            let clean = it.next().expect("counts sum to corpus size");
            let id = clean.file_name().expect("listed file").to_string_lossy().into_owned();
            let depth = if kind.needs_depth() {
                let d = depth_root.map(|r| r.join(&id)).filter(|p| p.is_file());
                Some(d.ok_or_else(|| {
                    Error::EmptyCorpus(format!("{kind} entry {id} has no depth map{}", match depth_root {
                        Some(r) => format!(" in {}", r.display()),
                        None => " (no depth root given)".into(),
                    }))
                })?)
            } else {
                None
            };
            let split = if i >= n - n_test { Split::Test } else { Split::Train };
            entries.push(ManifestEntry { id, kind, clean, depth, degraded: None, spec: None, split });
        }
    }
    Ok(DatasetManifest { entries })
}

/// Mixes several integers into one well-spread seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// A random outdoor-like test scene: sky over textured ground with a few
/// objects, plus a matching depth map (far = large).
pub fn procedural_scene(seed: u64, height: usize, width: usize) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(0.25..0.5) * height as f64;
    let sky: [f64; 3] = [rng.random_range(0.45..0.7), rng.random_range(0.6..0.8), rng.random_range(0.75..0.95)];
    let ground: [f64; 3] = [rng.random_range(0.2..0.5), rng.random_range(0.25..0.55), rng.random_range(0.1..0.35)];
    let freq: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.05..0.6), rng.random_range(0.05..0.6), rng.random_range(0.0..6.28)))
        .collect();
    struct Blob {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        color: [f64; 3],
        depth: f64,
    }
    let blobs: Vec<Blob> = (0..rng.random_range(2..5))
        .map(|_| {
            let cy = rng.random_range(horizon..height as f64);
            Blob {
                cy,
                cx: rng.random_range(0.0..width as f64),
                ry: rng.random_range(0.08..0.25) * height as f64,
                rx: rng.random_range(0.08..0.25) * width as f64,
                color: [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)],
                depth: 0.2 + 0.6 * (1.0 - cy / height as f64),
            }
        })
        .collect();
    let mut clean = Image::filled(height, width, 3, 0.0);
    let mut depth = Image::filled(height, width, 1, 0.0);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64, x as f64);
            let tex: f64 = freq.iter().map(|&(a, b, p)| (a * fy + b * fx + p).sin()).sum::<f64>() / 4.0;
            let (mut c, mut d) = if fy < horizon {
                let g = fy / horizon;
                (sky.map(|s| s * (0.85 + 0.15 * g) + 0.02 * tex), 1.0)
            } else {
                let g = (fy - horizon) / (height as f64 - horizon).max(1.0);
                (ground.map(|s| s * (0.7 + 0.5 * g) + 0.08 * tex), 0.9 - 0.8 * g)
            };
            for b in &blobs {
                let r = ((fy - b.cy) / b.ry).powi(2) + ((fx - b.cx) / b.rx).powi(2);
                if r <= 1.0 && b.depth <= d {
                    c = b.color.map(|v| v * (1.0 - 0.3 * r) + 0.05 * tex);
                    d = b.depth;
                }
            }
            for (ch, v) in c.iter().enumerate() {
                clean.set(y, x, ch, v.clamp(0.0, 1.0));
            }
            depth.set(y, x, 0, d);
        }
    }
    (clean, depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{save_depth, save_image};

    #[test]
    fn largest_remainder_counts() {
        let mix = SceneMix { haze: 0.4, sand: 0.3, lowlight: 0.3 };
        assert_eq!(mix.counts(10), [4, 3, 3]);
        assert_eq!(SceneMix::default().counts(10), [4, 3, 3]);
        assert_eq!(SceneMix::default().counts(2), [1, 1, 0]);
        for n in 0..40 {
            let c = mix.counts(n);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (k, &kind) in SceneKind::ALL.iter().enumerate() {
                assert!((c[k] as f64 - mix.fraction(kind) * n as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn train_config_defaults_and_validation() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lr_drop_epochs, vec![30, 60, 90]);
        let round = TrainConfig::from_toml(&c.to_toml().unwrap(), "t").unwrap();
        assert_eq!(round, c);
        let partial = TrainConfig::from_toml("epochs = 3\nlr_drop_epochs = [1]\n", "t").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, 4);
        for bad in [
            "epochs = 0\nlr_drop_epochs = []",
            "lr = 0.0",
            "lr_drop_epochs = [60, 30]",
            "epochs = 50",
            "[scene_mix]\nhaze = 0.5\nsand = 0.5\nlowlight = 0.5",
            "crop_size = 30",
        ] {
            assert!(TrainConfig::from_toml(bad, "t").is_err(), "{bad}");
        }
    }

    fn corpus(n: usize, with_depth: bool) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("clean")).unwrap();
        std::fs::create_dir(dir.path().join("depth")).unwrap();
        for i in 0..n {
            let (c, d) = procedural_scene(i as u64, 16, 16);
            save_image(&c, dir.path().join(format!("clean/{i:02}.png"))).unwrap();
            if with_depth {
                save_depth(&d, dir.path().join(format!("depth/{i:02}.png"))).unwrap();
            }
        }
        dir
    }

    #[test]
    fn manifest_proportions_and_determinism() {
        let dir = corpus(10, true);
        let plan = ManifestPlan { scene_mix: SceneMix { haze: 0.4, sand: 0.3, lowlight: 0.3 }, test_fraction: 0.3 };
        let clean = dir.path().join("clean");
        let depth = dir.path().join("depth");
        let m = build_manifest(&clean, Some(&depth), &plan, 7).unwrap();
        let count = |k| m.entries.iter().filter(|e| e.kind == k).count();
        assert_eq!([count(SceneKind::Haze), count(SceneKind::Sand), count(SceneKind::Lowlight)], [4, 3, 3]);
        assert_eq!(m, build_manifest(&clean, Some(&depth), &plan, 7).unwrap());
        assert_ne!(m, build_manifest(&clean, Some(&depth), &plan, 8).unwrap());
        let train: std::collections::BTreeSet<_> = m.split(Split::Train).map(|(_, e)| &e.clean).collect();
        let test: std::collections::BTreeSet<_> = m.split(Split::Test).map(|(_, e)| &e.clean).collect();
        assert!(train.is_disjoint(&test));
        assert_eq!(train.len() + test.len(), 10);
        assert!(m.entries.iter().filter(|e| e.kind == SceneKind::Lowlight).all(|e| e.depth.is_none()));
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(DatasetManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn manifest_names_entry_missing_depth() {
        let dir = corpus(3, false);
        let plan = ManifestPlan { scene_mix: SceneMix { haze: 1.0, sand: 0.0, lowlight: 0.0 }, test_fraction: 0.0 };
        let err = build_manifest(&dir.path().join("clean"), Some(&dir.path().join("depth")), &plan, 0).unwrap_err();
        assert!(matches!(&err, Error::EmptyCorpus(m) if m.contains("haze entry") && m.contains(".png")), "{err}");
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(build_manifest(empty.path(), None, &plan, 0), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(&[1, 0, 0]);
        assert_ne!(a, derive_seed(&[1, 0, 1]));
        assert_ne!(a, derive_seed(&[1, 1, 0]));
        assert_eq!(a, derive_seed(&[1, 0, 0]));
    }

    #[test]
    fn procedural_scene_is_in_range_and_seeded() {
        let (c, d) = procedural_scene(3, 24, 32);
        assert_eq!(c.dims(), (24, 32, 3));
        assert_eq!(d.dims(), (24, 32, 1));
        assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(d.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
        assert_eq!(procedural_scene(3, 24, 32).0, c);
        assert_ne!(procedural_scene(4, 24, 32).0, c);
    }
}
