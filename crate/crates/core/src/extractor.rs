//! Convolutional feature extractors with five tap points, used by the
//! contrastive term.
//!
//! Layers are indexed exactly like torchvision's `vgg19().features`, so a
//! converted state dict with names `features.{i}.weight` / `features.{i}.bias`
//! loads directly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Ops;
use crate::kernels::ConvSpec;
use crate::store::ArrayStore;
use crate::tensor::{Real, Tensor};

/// Channel statistics of the ImageNet training set.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv { cin: usize, cout: usize },
    Relu,
    MaxPool,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub name: String,
    layers: Vec<Layer>,
    taps: Vec<usize>,
    tap_names: Vec<String>,
    weights: BTreeMap<usize, (Tensor<f32>, Tensor<f32>)>,
    mean: [f64; 3],
    std: [f64; 3],
}

/// Which extractor the contrastive term uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExtractorConfig {
    /// Small fixed random-weight network.
    Surrogate { seed: u64 },
    /// 19-layer VGG features loaded from a safetensors file.
    Vgg19 { weights: std::path::PathBuf },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::Surrogate { seed: SURROGATE_SEED }
    }
}

impl ExtractorConfig {
    pub fn build(&self) -> Result<FeatureExtractor> {
        match self {
            ExtractorConfig::Surrogate { seed } => Ok(FeatureExtractor::surrogate(*seed)),
            ExtractorConfig::Vgg19 { weights } => FeatureExtractor::vgg19_from_file(weights),
        }
    }
}

pub const SURROGATE_SEED: u64 = 0x5eed;

fn conv_relu(layers: &mut Vec<Layer>, cin: usize, cout: usize) {
    layers.push(Layer::Conv { cin, cout });
    layers.push(Layer::Relu);
}

impl FeatureExtractor {
    /// Conv widths 4, 8, 8, 16, 16 with pooling between the first four taps.
    pub fn surrogate(seed: u64) -> Self {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let widths = [(3, 4), (4, 8), (8, 8), (8, 16), (16, 16)];
        for (i, &(cin, cout)) in widths.iter().enumerate() {
            conv_relu(&mut layers, cin, cout);
            taps.push(layers.len() - 1);
            if i < 3 {
                layers.push(Layer::MaxPool);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = BTreeMap::new();
        for (i, l) in layers.iter().enumerate() {
            if let Layer::Conv { cin, cout } = *l {
                // He-style scale keeps activations from vanishing through the
                // stack.
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let w: Vec<f32> = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound) as f32).collect();
                let b: Vec<f32> = (0..cout).map(|_| rng.random_range(-0.1..0.1) as f32).collect();
                weights.insert(
                    i,
                    (
                        Tensor::from_vec([cout, cin, 3, 3], w).expect("sized"),
                        Tensor::from_vec([1, cout, 1, 1], b).expect("sized"),
                    ),
                );
            }
        }
        let tap_names = taps.iter().enumerate().map(|(k, i)| format!("tap{}@{i}", k + 1)).collect();
        Self {
            name: format!("surrogate-{seed}"),
            layers,
            taps,
            tap_names,
            weights,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }

    /// VGG-19 feature stack up to `relu5_4` and its pre-pooling taps.
    pub fn vgg19_layout() -> (Vec<Layer>, Vec<(usize, &'static str)>) {
        let blocks: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let names = ["relu1_2", "relu2_2", "relu3_4", "relu4_4", "relu5_4"];
        let mut cin = 3;
        for (bi, &(c, n)) in blocks.iter().enumerate() {
            for _ in 0..n {
                conv_relu(&mut layers, cin, c);
                cin = c;
            }
            taps.push((layers.len() - 1, names[bi]));
            if bi < 4 {
                layers.push(Layer::MaxPool);
            }
        }
        (layers, taps)
    }

    pub fn vgg19_from_store(store: &ArrayStore) -> Result<Self> {
        let (layers, taps) = Self::vgg19_layout();
        let mut weights = BTreeMap::new();
        for (i, l) in layers.iter().enumerate() {
            if let Layer::Conv { cin, cout } = *l {
                let get = |suffix: &str, dims: [usize; 4]| -> Result<Tensor<f32>> {
                    let name = format!("features.{i}.{suffix}");
                    let a = store
                        .arrays
                        .get(&name)
                        .ok_or_else(|| Error::ConfigMismatch(format!("extractor weights lack {name}")))?;
                    if a.data.len() != dims.iter().product::<usize>() {
                        return Err(Error::ConfigMismatch(format!("{name} has shape {:?}", a.shape)));
                    }
                    Tensor::from_vec(dims, a.data.clone())
                };
                weights.insert(i, (get("weight", [cout, cin, 3, 3])?, get("bias", [1, cout, 1, 1])?));
            }
        }
        Ok(Self {
            name: "vgg19".into(),
            layers,
            taps: taps.iter().map(|t| t.0).collect(),
            tap_names: taps.iter().map(|t| t.1.to_string()).collect(),
            weights,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        })
    }

    pub fn vgg19_from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::vgg19_from_store(&ArrayStore::load(path)?)
    }

    pub fn tap_names(&self) -> &[String] {
        &self.tap_names
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Normalizes `x` with the extractor's channel statistics and returns the
    /// five tapped activations. Weights enter as constants.
    pub fn taps<T: Real, O: Ops<T>>(&self, ops: &mut O, x: &O::V) -> Result<Vec<O::V>> {
        let [b, c, _, _] = ops.value(x).dims();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("extractor input has {c} channels")));
        }
        let scale = (0..b * 3).map(|i| T::of(1.0 / self.std[i % 3])).collect();
        let shift = (0..b * 3).map(|i| T::of(-self.mean[i % 3] / self.std[i % 3])).collect();
        let mut h = ops.channel_affine(x, scale, shift, vec![false; b * 3])?;
        let mut out = Vec::with_capacity(self.taps.len());
        let last = *self.taps.last().expect("five taps");
        for (i, l) in self.layers.iter().enumerate().take(last + 1) {
            h = match l {
                Layer::Conv { .. } => {
                    let (w, bias) = &self.weights[&i];
                    let w = ops.input(w.cast());
                    let bias = ops.input(bias.cast());
                    ops.conv2d(&h, &w, Some(&bias), ConvSpec::same(3, 1))?
                }
                Layer::Relu => ops.relu(&h),
                Layer::MaxPool => ops.max_pool2(&h)?,
            };
            if self.taps.contains(&i) {
                out.push(h.clone());
            }
        }
        Ok(out)
    }
}
