use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, DatasetManifest, ManifestEntry, Split, TrainConfig};
use crate::degrade::{sample_spec, synth_pair, AtmoLightSet, SceneKind};
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::graph::{Graph, Ops};
use crate::imaging::{load_depth, load_image, Image};
use crate::losses::{total_loss_on_graph, LossBreakdown};
use crate::metrics::{psnr, ssim};
use crate::net::{aosrnet_forward, forward, init_weights, Checkpoint, ParamMap, TrainingMeta};
use crate::store::write_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.csv";

/// Seed slot reserved for evaluation pairs, distinct from any epoch.
const EVAL_EPOCH: u64 = u64::MAX;

/// `lr · factor^(−k)` with `k` the number of drop epochs `<= epoch`
/// (epochs counted from 0).
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = cfg.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.lr / cfg.lr_drop_factor.powi(k as i32)
}

/// ADAM with per-parameter first and second moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Adam {
    pub fn step(&mut self, params: &mut ParamMap<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// One row of the training log: epoch means of each loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub l1: f64,
    pub color: f64,
    pub cr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::parse("train log", e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["epoch", "lr", "total", "l1", "color", "cr"])
                .map_err(|e| Error::parse("train log", e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::parse("train log", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<LogRow>, _>>()
            .map_err(|e| Error::parse("train log", e.to_string()))?;
        Ok(Self { rows })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Manifest images decoded once, plus the airlight sets used for on-the-fly
/// synthesis.
pub struct LoadedCorpus {
    items: Vec<Loaded>,
    haze_lights: Option<AtmoLightSet>,
    sand_lights: Option<AtmoLightSet>,
}

struct Loaded {
    entry: ManifestEntry,
    clean: Image,
    depth: Option<Image>,
    degraded: Option<Image>,
}

impl LoadedCorpus {
    pub fn load(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Self> {
        manifest.validate()?;
        let mut items = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let clean = load_image(&e.clean)?;
            let degraded = e.degraded.as_ref().map(load_image).transpose()?;
            if let Some(d) = &degraded {
                if !d.same_shape(&clean) {
                    return Err(Error::PairMismatch(format!("entry {}: degraded and clean sizes differ", e.id)));
                }
            }
            let depth = match (&e.depth, &degraded) {
                (Some(p), None) => Some(load_depth(p)?),
                _ => None,
            };
            items.push(Loaded { entry: e.clone(), clean, depth, degraded });
        }
        let set = |p: &Option<std::path::PathBuf>, k: SceneKind| -> Result<Option<AtmoLightSet>> {
            p.as_ref()
                .map(|p| {
                    let s = AtmoLightSet::load(p)?;
                    s.validate_for(k)?;
                    Ok(s)
                })
                .transpose()
        };
        Ok(Self {
            items,
            haze_lights: set(&cfg.haze_lights, SceneKind::Haze)?,
            sand_lights: set(&cfg.sand_lights, SceneKind::Sand)?,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(degraded, clean)` for entry `idx`; specless entries draw their
    /// degradation from `seed`.
    pub fn pair(&self, idx: usize, cfg: &TrainConfig, seed: u64) -> Result<(Image, Image)> {
        let it = &self.items[idx];
        if let Some(d) = &it.degraded {
            return Ok((d.clone(), it.clean.clone()));
        }
        let spec = match &it.entry.spec {
            Some(s) => *s,
            None => {
                let lights = match it.entry.kind {
                    SceneKind::Haze => self.haze_lights.as_ref(),
                    SceneKind::Sand => self.sand_lights.as_ref(),
                    SceneKind::Lowlight => None,
                };
                sample_spec(it.entry.kind, &cfg.synth, lights, seed)?
            }
        };
        synth_pair(&it.clean, it.depth.as_ref(), &spec).map_err(|e| match e {
            Error::MissingDepth { kind, .. } => Error::MissingDepth { kind, entry: it.entry.id.clone() },
            e => e,
        })
    }

    fn entry(&self, idx: usize) -> &ManifestEntry {
        &self.items[idx].entry
    }
}

fn random_crop(d: &Image, c: &Image, size: usize, rng: &mut ChaCha8Rng, id: &str) -> Result<(Image, Image)> {
    let (h, w, _) = c.dims();
    if h < size || w < size {
        return Err(Error::InvalidConfig(format!("entry {id} is {h}x{w}, smaller than crop_size {size}")));
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    Ok((d.crop(top, left, size, size)?, c.crop(top, left, size, size)?))
}

/// Trains from a fresh initialization. When `out_dir` is given the log and
/// checkpoint there are rewritten atomically after every epoch.
pub fn train(cfg: &TrainConfig, manifest: &DatasetManifest, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let corpus = LoadedCorpus::load(manifest, cfg)?;
    let train_idx: Vec<usize> = manifest.split(Split::Train).map(|(i, _)| i).collect();
    if train_idx.is_empty() {
        return Err(Error::EmptyCorpus("manifest has no train entries".into()));
    }
    let ext = cfg.extractor.build()?;
    let mut ckpt = init_weights(&cfg.network, cfg.seed)?;
    let mut adam = Adam::default();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    'epochs: for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, u64::MAX])));
        let mut sums = [0.0f64; 4];
        let mut steps_in_epoch = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let b = train_step(cfg, &corpus, &ext, &mut ckpt, &mut adam, batch, epoch, lr, step)?;
            for (s, v) in sums.iter_mut().zip([b.total, b.l1, b.color, b.cr]) {
                *s += v;
            }
            steps_in_epoch += 1;
            step += 1;
        }
        if steps_in_epoch == 0 {
            break 'epochs;
        }
        let n = steps_in_epoch as f64;
        let row = LogRow { epoch, lr, total: sums[0] / n, l1: sums[1] / n, color: sums[2] / n, cr: sums[3] / n };
        log::info!(
            "epoch {epoch} lr {lr:e} loss {:.5} (l1 {:.5} color {:.5} cr {:.5})",
            row.total,
            row.l1,
            row.color,
            row.cr
        );
        log.rows.push(row);
        ckpt.meta = TrainingMeta { epochs: epoch + 1, steps: step, loss_weights: cfg.loss_weights, seed: cfg.seed };
        if let Some(dir) = out_dir {
            ckpt.save(dir.join(CHECKPOINT_FILE))?;
            write_atomic(&dir.join(LOG_FILE), log.to_csv()?.as_bytes())?;
        }
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &TrainConfig,
    corpus: &LoadedCorpus,
    ext: &FeatureExtractor,
    ckpt: &mut Checkpoint,
    adam: &mut Adam,
    batch: &[usize],
    epoch: usize,
    lr: f64,
    step: usize,
) -> Result<LossBreakdown> {
    let mut degraded = Vec::with_capacity(batch.len());
    let mut clean = Vec::with_capacity(batch.len());
    for &idx in batch {
        let (d, c) = corpus.pair(idx, cfg, derive_seed(&[cfg.seed, epoch as u64, idx as u64, 0]))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, idx as u64, 1]));
        let (d, c) = random_crop(&d, &c, cfg.crop_size, &mut rng, &corpus.entry(idx).id)?;
        degraded.push(d);
        clean.push(c);
    }
    let x: Tensor<f32> = Tensor::from_images(&degraded.iter().collect::<Vec<_>>())?;
    let y: Tensor<f32> = Tensor::from_images(&clean.iter().collect::<Vec<_>>())?;
    let mut g = Graph::<f32>::new();
    let xv = g.input(x.clone());
    let (out, _) = forward(&mut g, &ckpt.params, &cfg.network, &xv, None)?;
    let (loss, seeds) = total_loss_on_graph(&mut g, out, &x, &y, &cfg.loss_weights, ext, &cfg.tap_weights)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { step, total: loss.total });
    }
    let grads = g.backward(&seeds)?;
    adam.step(&mut ckpt.params, &grads.by_name, lr);
    Ok(loss)
}

/// Degraded and restored scores for one evaluation pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    pub kind: SceneKind,
    pub degraded_psnr: f64,
    pub restored_psnr: f64,
    pub restored_ssim: f64,
}

/// Restores every entry of `split` at full size and scores it against its
/// clean image. Specless entries use a fixed evaluation draw.
pub fn evaluate_entries(
    ckpt: &Checkpoint,
    corpus: &LoadedCorpus,
    manifest: &DatasetManifest,
    split: Split,
    cfg: &TrainConfig,
) -> Result<Vec<PairScore>> {
    let mut out = Vec::new();
    for (idx, e) in manifest.split(split) {
        let (d, c) = corpus.pair(idx, cfg, derive_seed(&[cfg.seed, EVAL_EPOCH, idx as u64, 0]))?;
        let r = aosrnet_forward(&d, ckpt)?;
        out.push(PairScore {
            id: e.id.clone(),
            kind: e.kind,
            degraded_psnr: psnr(&d, &c)?,
            restored_psnr: psnr(&r, &c)?,
            restored_ssim: ssim(&r, &c)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::DegradationSpec;
    use crate::harness::procedural_scene;
    use crate::imaging::{save_depth, save_image};
    use crate::net::NetworkConfig;

    proptest::proptest! {
        #[test]
        fn schedule_is_piecewise_constant_and_nonincreasing(
            drops in proptest::collection::btree_set(1usize..50, 0..4),
            factor in 1.5f64..20.0,
        ) {
            let cfg = TrainConfig { epochs: 50, lr_drop_epochs: drops.iter().copied().collect(), lr_drop_factor: factor, ..Default::default() };
            for e in 1..50 {
                let (prev, cur) = (learning_rate(&cfg, e - 1), learning_rate(&cfg, e));
                if drops.contains(&e) {
                    proptest::prop_assert!((prev / cur - factor).abs() < 1e-9);
                } else {
                    proptest::prop_assert_eq!(prev, cur);
                }
            }
            proptest::prop_assert_eq!(learning_rate(&cfg, 0), cfg.lr);
        }
    }

    #[test]
    fn schedule_closed_form() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = [0, 29, 30, 59, 60, 89, 90, 99].iter().map(|&e| learning_rate(&cfg, e)).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5, 1e-6, 1e-6]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamMap::new();
        p.insert("w".to_string(), Tensor::<f32>::from_vec([1, 2, 1, 1], vec![1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::<f32>::from_vec([1, 2, 1, 1], vec![0.5, -2.0]).unwrap());
        let mut adam = Adam::default();
        adam.step(&mut p, &g, 0.1);
        let d = p["w"].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn log_csv_round_trip() {
        let log = TrainLog {
            rows: vec![LogRow { epoch: 0, lr: 1e-3, total: 0.5, l1: 0.25, color: 0.125, cr: 1.0 / 3.0 }],
        };
        let text = log.to_csv().unwrap();
        assert!(text.starts_with("epoch,lr,total,l1,color,cr\n"));
        assert_eq!(TrainLog::from_csv(&text).unwrap(), log);
    }

    fn tiny_setup(dir: &Path) -> (TrainConfig, DatasetManifest) {
        let mut entries = Vec::new();
        for (i, kind) in SceneKind::ALL.iter().enumerate() {
            let (c, d) = procedural_scene(i as u64, 16, 16);
            let clean = dir.join(format!("c{i}.png"));
            let depth = dir.join(format!("d{i}.png"));
            save_image(&c, &clean).unwrap();
            save_depth(&d, &depth).unwrap();
            entries.push(ManifestEntry {
                id: format!("c{i}"),
                kind: *kind,
                clean,
                depth: kind.needs_depth().then_some(depth),
                degraded: None,
                spec: (i == 0).then(|| DegradationSpec::haze(1.0, [0.9, 0.9, 0.9])),
                split: Split::Train,
            });
        }
        let cfg = TrainConfig {
            epochs: 2,
            lr_drop_epochs: vec![1],
            batch_size: 2,
            crop_size: 8,
            network: NetworkConfig {
                base_channels: 3,
                edfm_channels: [3, 4, 5],
                atrous_rates: vec![1, 2, 3, 4],
                ..Default::default()
            },
            ..Default::default()
        };
        (cfg, DatasetManifest { entries })
    }

    #[test]
    fn training_is_deterministic_and_logs_each_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, m) = tiny_setup(dir.path());
        let out = dir.path().join("run");
        let a = train(&cfg, &m, Some(&out)).unwrap();
        let b = train(&cfg, &m, None).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.rows.len(), 2);
        assert_eq!(a.log.rows[1].lr, 1e-4);
        assert_eq!(a.checkpoint.meta.steps, 4);
        assert_eq!(Checkpoint::load(out.join(CHECKPOINT_FILE)).unwrap(), a.checkpoint);
        let text = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
        assert_eq!(TrainLog::from_csv(&text).unwrap(), a.log);
        let other = train(&TrainConfig { seed: 1, ..cfg.clone() }, &m, None).unwrap();
        assert_ne!(other.checkpoint.params, a.checkpoint.params);
    }

    #[test]
    fn max_steps_cuts_training_short() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, m) = tiny_setup(dir.path());
        let cfg = TrainConfig { max_steps: Some(3), ..cfg };
        let o = train(&cfg, &m, None).unwrap();
        assert_eq!(o.checkpoint.meta.steps, 3);
        assert_eq!(o.log.rows.len(), 2);
    }

    #[test]
    fn crop_larger_than_image_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, m) = tiny_setup(dir.path());
        let cfg = TrainConfig { crop_size: 32, ..cfg };
        assert!(matches!(train(&cfg, &m, None), Err(Error::InvalidConfig(s)) if s.contains("crop_size")));
    }

    #[test]
    fn no_train_entries_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, mut m) = tiny_setup(dir.path());
        for e in &mut m.entries {
            e.split = Split::Test;
        }
        assert!(matches!(train(&cfg, &m, None), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn evaluation_pairs_are_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, m) = tiny_setup(dir.path());
        let corpus = LoadedCorpus::load(&m, &cfg).unwrap();
        let ckpt = init_weights(&cfg.network, 0).unwrap();
        let a = evaluate_entries(&ckpt, &corpus, &m, Split::Train, &cfg).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, evaluate_entries(&ckpt, &corpus, &m, Split::Train, &cfg).unwrap());
        assert!(evaluate_entries(&ckpt, &corpus, &m, Split::Test, &cfg).unwrap().is_empty());
    }
}
