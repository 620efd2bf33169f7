//! The restoration network: configuration, parameter layout, checkpoints
//! and the forward map.

mod model;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::priors::{GammaBank, OlsParams};
use crate::store::{ArrayStore, StoredArray};
use crate::tensor::{Real, Tensor};

pub use model::{
    aosrnet_forward, aosrnet_forward_batch, convl_forward, crm_forward, crm_stretch, dem_forward, edfm_forward,
    forward, mem_forward, srb_forward, Layers, PlaneStretch,
};

pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

/// Which prior-guided branches are active. A disabled branch keeps only its
/// stem convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub dem: bool,
    pub crm: bool,
    pub mem: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self { dem: true, crm: true, mem: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub gamma_bank: GammaBank,
    pub ols_triples: Vec<OlsParams>,
    pub atrous_rates: Vec<usize>,
    pub edfm_channels: [usize; 3],
    pub prelu_init: f64,
    pub norm_eps: f64,
    pub branches: Branches,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            gamma_bank: GammaBank::default(),
            ols_triples: default_ols_triples(),
            atrous_rates: vec![3, 6, 9, 12],
            edfm_channels: [16, 32, 64],
            prelu_init: 0.25,
            norm_eps: 1e-5,
            branches: Branches::default(),
        }
    }
}

/// One adjustment pair per scene kind (haze, sand, low light), taken from
/// the argmax of an OLS sweep over synthesized pairs.
pub fn default_ols_triples() -> Vec<OlsParams> {
    vec![
        OlsParams::with_adjustment(0.1, 0.5),
        OlsParams::with_adjustment(0.1, 0.5),
        OlsParams::with_adjustment(0.4, 0.3),
    ]
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        self.gamma_bank.validate()?;
        if self.gamma_bank.gammas.len() != 4 {
            return bad(format!("expected 4 gammas, got {}", self.gamma_bank.gammas.len()));
        }
        if self.ols_triples.len() != 3 {
            return bad(format!("expected 3 OLS triples, got {}", self.ols_triples.len()));
        }
        self.ols_triples.iter().try_for_each(|p| p.validate())?;
        if self.atrous_rates.len() != 4 || self.atrous_rates[0] == 0 {
            return bad(format!("expected 4 positive atrous rates, got {:?}", self.atrous_rates));
        }
        if self.atrous_rates.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("atrous rates must increase: {:?}", self.atrous_rates));
        }
        let e = self.edfm_channels;
        if e[0] == 0 || e[0] >= e[1] || e[1] >= e[2] {
            return bad(format!("edfm channels must increase: {e:?}"));
        }
        if !(self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on ±1/sqrt(fan_in).
    FanIn(usize),
    /// Uniform on ±bound.
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    /// Shape as stored on disk: `[out, in, k, k]` for kernels, `[n]` for
    /// vectors.
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    /// In-memory layout: vectors become `[1, n, 1, 1]`.
    pub fn dims(&self) -> [usize; 4] {
        match self.shape[..] {
            [a, b, c, d] => [a, b, c, d],
            [n] => [1, n, 1, 1],
            _ => unreachable!("parameters are 1-D or 4-D"),
        }
    }
}

struct Manifest<'a> {
    cfg: &'a NetworkConfig,
    out: Vec<ParamSpec>,
}

impl Manifest<'_> {
    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        let fan = cin * k * k;
        self.out.push(ParamSpec { name: format!("{prefix}.weight"), shape: vec![cout, cin, k, k], init: Init::FanIn(fan) });
        self.out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![cout], init: Init::FanIn(fan) });
    }

    fn norm(&mut self, prefix: &str, c: usize) {
        self.out.push(ParamSpec { name: format!("{prefix}.gain"), shape: vec![c], init: Init::Const(1.0) });
        self.out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![c], init: Init::Const(0.0) });
    }

    fn act(&mut self, prefix: &str) {
        self.out.push(ParamSpec { name: format!("{prefix}.slope"), shape: vec![1], init: Init::Const(self.cfg.prelu_init) });
    }

    fn convl(&mut self, prefix: &str, cout: usize, cin: usize) {
        self.conv(&format!("{prefix}.conv"), cout, cin, 3);
        self.norm(&format!("{prefix}.norm"), cout);
        self.act(&format!("{prefix}.act"));
    }

    fn srb(&mut self, prefix: &str, c: usize) {
        self.convl(&format!("{prefix}.l1"), c, c);
        self.convl(&format!("{prefix}.l2"), c, c);
        self.conv(&format!("{prefix}.conv"), c, c, 3);
        self.norm(&format!("{prefix}.norm"), c);
        self.act(&format!("{prefix}.act"));
    }
}

const HEAD_INIT_SCALE: f64 = 0.1;

/// Every trainable array of the configured network, in a fixed order.
pub fn param_manifest(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    let c = cfg.base_channels;
    let [e0, e1, e2] = cfg.edfm_channels;
    let mut m = Manifest { cfg, out: Vec::new() };
    m.conv("dem.stem", c, 3, 3);
    if cfg.branches.dem {
        m.conv("dem.fuse", c, c * cfg.gamma_bank.gammas.len(), 1);
        m.srb("dem.srb", c);
    }
    m.conv("crm.stem", c, 3, 3);
    if cfg.branches.crm {
        m.conv("crm.fuse", c, c * cfg.ols_triples.len(), 1);
        m.srb("crm.srb", c);
    }
    m.conv("mem.stem", c, 3, 3);
    if cfg.branches.mem {
        for i in 0..cfg.atrous_rates.len() {
            m.conv(&format!("mem.atrous{i}"), c, c, 3);
        }
        m.conv("mem.fuse", c, c * cfg.atrous_rates.len(), 1);
        m.srb("mem.srb", c);
    }
    m.conv("edfm.fuse", e0, 2 * c, 1);
    m.srb("edfm.enc0", e0);
    m.convl("edfm.down1", e1, e0);
    m.srb("edfm.enc1", e1);
    m.convl("edfm.down2", e2, e1);
    m.srb("edfm.enc2", e2);
    m.convl("edfm.up1", e1, e2);
    m.srb("edfm.dec1", e1);
    m.convl("edfm.up0", e0, e1);
    m.srb("edfm.dec0", e0);
    m.conv("edfm.head", 3, e0, 3);
    // Start the output near mid-gray so the final clamp passes gradient.
    let n = m.out.len();
    m.out[n - 2].init = Init::Uniform(HEAD_INIT_SCALE / ((9 * e0) as f64).sqrt());
    m.out[n - 1].init = Init::Const(0.5);
    m.out
}

/// Bookkeeping stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub steps: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParamMap<f32>,
    pub meta: TrainingMeta,
}

const FORMAT_TAG: &str = "aosrnet-checkpoint";
const FORMAT_VERSION: &str = "1";

/// Deterministic initialization: fan-in scaled uniform kernels and biases,
/// unit norm gains, zero norm biases, PReLU slopes at `prelu_init`.
pub fn init_weights(config: &NetworkConfig, seed: u64) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    for spec in param_manifest(config) {
        let dims = spec.dims();
        let n: usize = dims.iter().product();
        let data: Vec<f32> = match spec.init {
            Init::FanIn(fan) => {
                let bound = 1.0 / (fan as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect(),
            Init::Const(v) => vec![v as f32; n],
        };
        params.insert(spec.name, Tensor::from_vec(dims, data)?);
    }
    Ok(Checkpoint { config: config.clone(), params, meta: TrainingMeta::default() })
}

impl Checkpoint {
    /// Checks that parameter names and shapes match the configuration
    /// exactly.
    pub fn validate(&self) -> Result<()> {
        self.config.validate().map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        let manifest = param_manifest(&self.config);
        if manifest.len() != self.params.len() {
            let expected: std::collections::BTreeSet<_> = manifest.iter().map(|s| s.name.as_str()).collect();
            let extra: Vec<_> = self.params.keys().filter(|k| !expected.contains(k.as_str())).collect();
            return Err(Error::ConfigMismatch(format!(
                "{} arrays for {} expected; unexpected: {extra:?}",
                self.params.len(),
                manifest.len()
            )));
        }
        for spec in &manifest {
            let t = self
                .params
                .get(&spec.name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {}", spec.name)))?;
            if t.dims() != spec.dims() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} has dims {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn params_as<T: Real>(&self) -> ParamMap<T> {
        self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    pub fn to_store(&self) -> Result<ArrayStore> {
        self.validate()?;
        let mut store = ArrayStore::default();
        for spec in param_manifest(&self.config) {
            let t = &self.params[&spec.name];
            store.arrays.insert(spec.name, StoredArray { shape: spec.shape, data: t.data().to_vec() });
        }
        store.metadata.insert("format".into(), FORMAT_TAG.into());
        store.metadata.insert("version".into(), FORMAT_VERSION.into());
        store.metadata.insert("config".into(), to_json(&self.config)?);
        store.metadata.insert("training_meta".into(), to_json(&self.meta)?);
        Ok(store)
    }

    pub fn from_store(store: &ArrayStore) -> Result<Self> {
        let meta_field = |k: &str| {
            store.metadata.get(k).ok_or_else(|| Error::ConfigMismatch(format!("checkpoint lacks {k:?} metadata")))
        };
        if meta_field("format")? != FORMAT_TAG {
            return Err(Error::ConfigMismatch("not a network checkpoint".into()));
        }
        let config: NetworkConfig =
            serde_json::from_str(meta_field("config")?).map_err(|e| Error::parse("checkpoint config", e))?;
        let meta: TrainingMeta =
            serde_json::from_str(meta_field("training_meta")?).map_err(|e| Error::parse("checkpoint training_meta", e))?;
        let mut params = ParamMap::new();
        let manifest = param_manifest(&config);
        let dims: BTreeMap<&str, [usize; 4]> = manifest.iter().map(|s| (s.name.as_str(), s.dims())).collect();
        for (name, a) in &store.arrays {
            let d = dims
                .get(name.as_str())
                .ok_or_else(|| Error::ConfigMismatch(format!("unexpected parameter {name}")))?;
            if d.iter().product::<usize>() != a.data.len() {
                return Err(Error::ConfigMismatch(format!("parameter {name} has shape {:?}, expected {d:?}", a.shape)));
            }
            params.insert(name.clone(), Tensor::from_vec(*d, a.data.clone())?);
        }
        let ckpt = Self { config, params, meta };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_store()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_store(&ArrayStore::from_bytes(bytes, "checkpoint")?)
    }

    /// Atomic write (temporary file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&ArrayStore::load(path)?)
    }

    /// Fails with `ConfigMismatch` unless the stored configuration equals
    /// `expected`.
    pub fn expect_config(&self, expected: &NetworkConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::ConfigMismatch("checkpoint was built for a different network configuration".into()));
        }
        Ok(())
    }
}

fn to_json<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::parse("json", e))
}
