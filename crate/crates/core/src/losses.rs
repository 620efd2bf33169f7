//! Training objective: weighted sum of an ℓ1 term, a color-direction term
//! and a contrastive term in feature space.
//!
//! Each term returns its value together with the gradient with respect to
//! the restored batch (or, for the contrastive term, with respect to the
//! tapped features on a [`Graph`]), which seeds back-propagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::graph::{Eval, Graph, Ops, Var};
use crate::imaging::Image;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_color: f64,
    pub lambda_cr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_l1: 0.8, lambda_color: 0.1, lambda_cr: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_l1, self.lambda_color, self.lambda_cr];
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!("loss weights must be >= 0: {w:?}")));
        }
        Ok(())
    }

    /// `λ1·l1 + λ2·color + λ3·cr`.
    pub fn combine(&self, [l1, color, cr]: [f64; 3]) -> f64 {
        self.lambda_l1 * l1 + self.lambda_color * color + self.lambda_cr * cr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureTapWeights {
    pub omegas: [f64; 5],
}

impl Default for FeatureTapWeights {
    fn default() -> Self {
        Self { omegas: [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0] }
    }
}

/// A loss value and its gradient with respect to one tensor.
#[derive(Debug, Clone)]
pub struct LossGrad<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Mean absolute difference over all elements.
pub fn l1_term<T: Real>(restored: &Tensor<T>, truth: &Tensor<T>) -> Result<LossGrad<T>> {
    restored.same_dims(truth, "l1 loss")?;
    let n = restored.numel() as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(restored.dims());
    let g = T::of(1.0 / n);
    for ((d, &r), &t) in grad.data_mut().iter_mut().zip(restored.data()).zip(truth.data()) {
        let diff = r - t;
        sum += diff.abs().f64();
        *d = if diff > T::zero() {
            g
        } else if diff < T::zero() {
            -g
        } else {
            T::zero()
        };
    }
    Ok(LossGrad { value: sum / n, grad })
}

/// `1 − cos(restored, truth)` per batch item, averaged over the batch.
pub fn color_term<T: Real>(restored: &Tensor<T>, truth: &Tensor<T>) -> Result<LossGrad<T>> {
    restored.same_dims(truth, "color loss")?;
    let b = restored.batch();
    let mut grad = Tensor::zeros(restored.dims());
    let mut total = 0.0;
    for ib in 0..b {
        let r = restored.sample(ib);
        let t = truth.sample(ib);
        let (mut dot, mut rr, mut tt) = (0.0, 0.0, 0.0);
        for (&x, &y) in r.iter().zip(t) {
            let (x, y) = (x.f64(), y.f64());
            dot += x * y;
            rr += x * x;
            tt += y * y;
        }
        let (nr, nt) = (rr.sqrt(), tt.sqrt());
        if nr < 1e-12 || nt < 1e-12 {
            return Err(Error::ZeroVector);
        }
        let cos = dot / (nr * nt);
        total += 1.0 - cos;
        let len = r.len();
        let dst = &mut grad.data_mut()[ib * len..(ib + 1) * len];
        for ((d, &x), &y) in dst.iter_mut().zip(r).zip(t) {
            let v = -(y.f64() / (nr * nt) - cos * x.f64() / rr) / b as f64;
            *d = T::of(v);
        }
    }
    Ok(LossGrad { value: total / b as f64, grad })
}

/// Contrastive term with the restored taps already on `graph`.
///
/// Returns the loss and gradient seeds for those tap variables. Degraded and
/// truth features are plain constants.
pub fn cr_on_taps<T: Real>(
    graph: &Graph<T>,
    restored_taps: &[Var],
    degraded_taps: &[Tensor<T>],
    truth_taps: &[Tensor<T>],
    omegas: &FeatureTapWeights,
) -> Result<(f64, Vec<(Var, Tensor<T>)>)> {
    let vals: Vec<&Tensor<T>> = restored_taps.iter().map(|v| graph.value(v)).collect();
    let (value, grads) = cr_values(&vals, degraded_taps, truth_taps, omegas)?;
    Ok((value, restored_taps.iter().copied().zip(grads).collect()))
}

fn cr_values<T: Real>(
    restored: &[&Tensor<T>],
    degraded: &[Tensor<T>],
    truth: &[Tensor<T>],
    omegas: &FeatureTapWeights,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if restored.len() != 5 || degraded.len() != 5 || truth.len() != 5 {
        return Err(Error::ShapeMismatch("contrastive term needs five taps".into()));
    }
    let b = restored[0].batch();
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(5);
    for (i, ((r, d), g)) in restored.iter().zip(degraded).zip(truth).enumerate() {
        r.same_dims(g, "restored/truth taps")?;
        d.same_dims(g, "degraded/truth taps")?;
        let mut grad = Tensor::zeros(r.dims());
        for ib in 0..b {
            let (rs, ds, gs) = (r.sample(ib), d.sample(ib), g.sample(ib));
            let n = rs.len() as f64;
            let den = ds.iter().zip(gs).map(|(&x, &y)| (x - y).abs().f64()).sum::<f64>() / n;
            if den < 1e-12 {
                return Err(Error::DegenerateAnchor { tap: i });
            }
            let num = rs.iter().zip(gs).map(|(&x, &y)| (x - y).abs().f64()).sum::<f64>() / n;
            total += omegas.omegas[i] * num / den;
            let k = T::of(omegas.omegas[i] / (den * n * b as f64));
            let len = rs.len();
            let dst = &mut grad.data_mut()[ib * len..(ib + 1) * len];
            for ((o, &x), &y) in dst.iter_mut().zip(rs).zip(gs) {
                *o = if x > y {
                    k
                } else if x < y {
                    -k
                } else {
                    T::zero()
                };
            }
        }
        grads.push(grad);
    }
    Ok((total / b as f64, grads))
}

fn const_taps<T: Real>(ext: &FeatureExtractor, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut ops = Eval;
    let v = ops.input(x.clone());
    Ok(ext.taps(&mut ops, &v)?.into_iter().map(|t| (*t).clone()).collect())
}

/// Contrastive term and its gradient with respect to `restored`.
pub fn cr_term<T: Real>(
    restored: &Tensor<T>,
    degraded: &Tensor<T>,
    truth: &Tensor<T>,
    ext: &FeatureExtractor,
    omegas: &FeatureTapWeights,
) -> Result<LossGrad<T>> {
    restored.same_dims(truth, "contrastive loss")?;
    degraded.same_dims(truth, "contrastive loss")?;
    let dt = const_taps(ext, degraded)?;
    let gt = const_taps(ext, truth)?;
    let mut g = Graph::new();
    let x = g.leaf(restored.clone());
    let taps = ext.taps(&mut g, &x)?;
    let (value, seeds) = cr_on_taps(&g, &taps, &dt, &gt, omegas)?;
    let grads = g.backward(&seeds)?;
    let grad = grads.leaf(x).cloned().unwrap_or_else(|| Tensor::zeros(restored.dims()));
    Ok(LossGrad { value, grad })
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub color: f64,
    pub cr: f64,
}

/// Total loss for a restored batch living on `graph`, with gradient seeds
/// ready for [`Graph::backward`]. Terms with zero weight are still
/// evaluated for logging but contribute no gradient.
pub fn total_loss_on_graph<T: Real>(
    graph: &mut Graph<T>,
    restored: Var,
    degraded: &Tensor<T>,
    truth: &Tensor<T>,
    weights: &LossWeights,
    ext: &FeatureExtractor,
    omegas: &FeatureTapWeights,
) -> Result<(LossBreakdown, Vec<(Var, Tensor<T>)>)> {
    let r = graph.value(&restored).clone();
    let l1 = l1_term(&r, truth)?;
    let color = color_term(&r, truth)?;
    let mut seed = Tensor::zeros(r.dims());
    for ((s, &a), &b) in seed.data_mut().iter_mut().zip(l1.grad.data()).zip(color.grad.data()) {
        *s = T::of(weights.lambda_l1) * a + T::of(weights.lambda_color) * b;
    }
    let mut seeds = vec![(restored, seed)];
    let dt = const_taps(ext, degraded)?;
    let gt = const_taps(ext, truth)?;
    let cr = if weights.lambda_cr > 0.0 {
        let taps = ext.taps(graph, &restored)?;
        let (v, tap_seeds) = cr_on_taps(graph, &taps, &dt, &gt, omegas)?;
        let lam = T::of(weights.lambda_cr);
        seeds.extend(tap_seeds.into_iter().map(|(var, g)| (var, g.map(|x| x * lam))));
        v
    } else {
        let rt = const_taps(ext, &r)?;
        let refs: Vec<&Tensor<T>> = rt.iter().collect();
        cr_values(&refs, &dt, &gt, omegas)?.0
    };
    let parts = [l1.value, color.value, cr];
    let breakdown = LossBreakdown { total: weights.combine(parts), l1: parts[0], color: parts[1], cr };
    Ok((breakdown, seeds))
}

pub fn l1_loss(restored: &Image, truth: &Image) -> Result<f64> {
    restored.check_same_shape(truth)?;
    Ok(l1_term(&Tensor::<f64>::from_image(restored), &Tensor::from_image(truth))?.value)
}

pub fn color_loss(restored: &Image, truth: &Image) -> Result<f64> {
    restored.check_same_shape(truth)?;
    Ok(color_term(&Tensor::<f64>::from_image(restored), &Tensor::from_image(truth))?.value)
}

pub fn cr_loss(
    restored: &Image,
    degraded: &Image,
    truth: &Image,
    ext: &FeatureExtractor,
    omegas: &FeatureTapWeights,
) -> Result<f64> {
    restored.check_same_shape(truth)?;
    degraded.check_same_shape(truth)?;
    let t = |i: &Image| Tensor::<f64>::from_image(i);
    let (r, d, g) = (t(restored), t(degraded), t(truth));
    let rt = const_taps(ext, &r)?;
    let refs: Vec<&Tensor<f64>> = rt.iter().collect();
    Ok(cr_values(&refs, &const_taps(ext, &d)?, &const_taps(ext, &g)?, omegas)?.0)
}

/// Weighted total and the three component values.
pub fn total_loss(
    restored: &Image,
    degraded: &Image,
    truth: &Image,
    weights: &LossWeights,
    ext: &FeatureExtractor,
    omegas: &FeatureTapWeights,
) -> Result<(f64, [f64; 3])> {
    let parts = [
        l1_loss(restored, truth)?,
        color_loss(restored, truth)?,
        cr_loss(restored, degraded, truth, ext, omegas)?,
    ];
    Ok((weights.combine(parts), parts))
}
