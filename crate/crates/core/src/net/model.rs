//! Forward map written against [`Ops`], so one definition serves inference
//! and training.

use crate::error::{Error, Result};
use crate::graph::{Eval, Ops};
use crate::imaging::Image;
use crate::kernels::ConvSpec;
use crate::priors::{ols_bounds, OlsParams};
use crate::tensor::{Real, Tensor};

use super::{Checkpoint, NetworkConfig, ParamMap};

/// Parameter lookup shared by the layer builders.
pub struct Layers<'p, T> {
    params: &'p ParamMap<T>,
    eps: f64,
}

impl<'p, T: Real> Layers<'p, T> {
    pub fn new(params: &'p ParamMap<T>, eps: f64) -> Self {
        Self { params, eps }
    }

    fn get<O: Ops<T>>(&self, ops: &mut O, name: &str) -> Result<O::V> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter {name}")))?;
        Ok(ops.param(name, t))
    }

    fn conv<O: Ops<T>>(&self, ops: &mut O, prefix: &str, x: &O::V, spec: ConvSpec) -> Result<O::V> {
        let w = self.get(ops, &format!("{prefix}.weight"))?;
        let b = self.get(ops, &format!("{prefix}.bias"))?;
        let k = ops.value(&w).dims()[2];
        let spec = if k == 1 { ConvSpec { dilation: 1, padding: 0 } } else { spec };
        ops.conv2d(x, &w, Some(&b), spec)
    }

    fn norm<O: Ops<T>>(&self, ops: &mut O, prefix: &str, x: &O::V) -> Result<O::V> {
        let g = self.get(ops, &format!("{prefix}.gain"))?;
        let b = self.get(ops, &format!("{prefix}.bias"))?;
        ops.channel_norm(x, &g, &b, self.eps)
    }

    fn act<O: Ops<T>>(&self, ops: &mut O, prefix: &str, x: &O::V) -> Result<O::V> {
        let s = self.get(ops, &format!("{prefix}.slope"))?;
        ops.prelu(x, &s)
    }
}

fn same3() -> ConvSpec {
    ConvSpec::same(3, 1)
}

/// 3×3 conv, channel layer norm, PReLU.
pub fn convl_forward<T: Real, O: Ops<T>>(ops: &mut O, l: &Layers<T>, prefix: &str, x: &O::V) -> Result<O::V> {
    let h = l.conv(ops, &format!("{prefix}.conv"), x, same3())?;
    let h = l.norm(ops, &format!("{prefix}.norm"), &h)?;
    l.act(ops, &format!("{prefix}.act"), &h)
}

/// `PReLU(Norm(Conv(ConvL(ConvL(x)))) + x)`.
pub fn srb_forward<T: Real, O: Ops<T>>(ops: &mut O, l: &Layers<T>, prefix: &str, x: &O::V) -> Result<O::V> {
    let h = convl_forward(ops, l, &format!("{prefix}.l1"), x)?;
    let h = convl_forward(ops, l, &format!("{prefix}.l2"), &h)?;
    let h = l.conv(ops, &format!("{prefix}.conv"), &h, same3())?;
    let h = l.norm(ops, &format!("{prefix}.norm"), &h)?;
    let cin = ops.value(x).channels();
    let cout = ops.value(&h).channels();
    if cin != cout {
        return Err(Error::ShapeMismatch(format!("residual block maps {cin} to {cout} channels")));
    }
    let h = ops.add(&h, x)?;
    l.act(ops, &format!("{prefix}.act"), &h)
}

/// Stem conv, signed gamma bank, 1×1 fusion, residual block.
pub fn dem_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    l: &Layers<T>,
    cfg: &NetworkConfig,
    img: &O::V,
) -> Result<O::V> {
    let stem = l.conv(ops, "dem.stem", img, same3())?;
    if !cfg.branches.dem {
        return Ok(stem);
    }
    let parts: Vec<O::V> = cfg.gamma_bank.gammas.iter().map(|&g| ops.signed_pow(&stem, g)).collect();
    let cat = ops.concat(&parts)?;
    let fused = l.conv(ops, "dem.fuse", &cat, same3())?;
    srb_forward(ops, l, "dem.srb", &fused)
}

/// Constant per-plane affine map used by the color branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneStretch {
    pub scale: f64,
    pub shift: f64,
    pub clamp: bool,
}

impl PlaneStretch {
    pub const IDENTITY: PlaneStretch = PlaneStretch { scale: 1.0, shift: 0.0, clamp: false };
}

/// Per-(sample, channel) stretch coefficients for one parameter triple.
/// Planes whose truncated range collapses map through unchanged.
pub fn crm_stretch<T: Real>(x: &Tensor<T>, params: &OlsParams) -> Result<Vec<PlaneStretch>> {
    let [b, c, _, _] = x.dims();
    let mut out = Vec::with_capacity(b * c);
    for ib in 0..b {
        for ic in 0..c {
            let plane: Vec<f64> = x.plane(ib, ic).iter().map(|v| v.f64()).collect();
            out.push(match ols_bounds(&plane, params, ic) {
                Ok(bd) => {
                    let scale = 1.0 / (bd.hi - bd.lo);
                    PlaneStretch { scale, shift: -bd.lo * scale, clamp: true }
                }
                Err(Error::DegenerateRange { .. }) => PlaneStretch::IDENTITY,
                Err(e) => return Err(e),
            });
        }
    }
    Ok(out)
}

/// Stem conv, one stretch per parameter triple, 1×1 fusion, residual block.
///
/// Stretch coefficients are recomputed from the stem output unless `frozen`
/// supplies them; either way they are constants for differentiation. The
/// coefficients used are appended to `used`.
pub fn crm_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    l: &Layers<T>,
    cfg: &NetworkConfig,
    img: &O::V,
    frozen: Option<&[Vec<PlaneStretch>]>,
    used: &mut Vec<Vec<PlaneStretch>>,
) -> Result<O::V> {
    let stem = l.conv(ops, "crm.stem", img, same3())?;
    if !cfg.branches.crm {
        return Ok(stem);
    }
    let mut parts = Vec::with_capacity(cfg.ols_triples.len());
    for (i, p) in cfg.ols_triples.iter().enumerate() {
        let coeffs = match frozen {
            Some(f) => f
                .get(i)
                .cloned()
                .ok_or_else(|| Error::ShapeMismatch(format!("no frozen stretch for triple {i}")))?,
            None => crm_stretch(ops.value(&stem), p)?,
        };
        let scale = coeffs.iter().map(|s| T::of(s.scale)).collect();
        let shift = coeffs.iter().map(|s| T::of(s.shift)).collect();
        let clamp = coeffs.iter().map(|s| s.clamp).collect();
        parts.push(ops.channel_affine(&stem, scale, shift, clamp)?);
        used.push(coeffs);
    }
    let cat = ops.concat(&parts)?;
    let fused = l.conv(ops, "crm.fuse", &cat, same3())?;
    srb_forward(ops, l, "crm.srb", &fused)
}

/// Stem conv, parallel atrous convs, 1×1 fusion, residual block.
pub fn mem_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    l: &Layers<T>,
    cfg: &NetworkConfig,
    img: &O::V,
) -> Result<O::V> {
    let stem = l.conv(ops, "mem.stem", img, same3())?;
    if !cfg.branches.mem {
        return Ok(stem);
    }
    let mut parts = Vec::with_capacity(cfg.atrous_rates.len());
    for (i, &r) in cfg.atrous_rates.iter().enumerate() {
        parts.push(l.conv(ops, &format!("mem.atrous{i}"), &stem, ConvSpec::same(3, r))?);
    }
    let cat = ops.concat(&parts)?;
    let fused = l.conv(ops, "mem.fuse", &cat, same3())?;
    srb_forward(ops, l, "mem.srb", &fused)
}

/// Fusion of the three branch streams and the three-scale encoder-decoder.
pub fn edfm_forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    l: &Layers<T>,
    dem: &O::V,
    crm: &O::V,
    mem: &O::V,
) -> Result<O::V> {
    let d = ops.value(dem).dims();
    for v in [crm, mem] {
        if ops.value(v).dims() != d {
            return Err(Error::ShapeMismatch(format!(
                "branch streams {:?} and {:?}",
                d,
                ops.value(v).dims()
            )));
        }
    }
    let (h, w) = (d[2], d[3]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::IndivisibleSpatialDims { height: h, width: w });
    }
    let sum = ops.add(dem, crm)?;
    let cat = ops.concat(&[sum, mem.clone()])?;
    let x = l.conv(ops, "edfm.fuse", &cat, same3())?;

    let enc0 = srb_forward(ops, l, "edfm.enc0", &x)?;
    let p = ops.max_pool2(&enc0)?;
    let p = convl_forward(ops, l, "edfm.down1", &p)?;
    let enc1 = srb_forward(ops, l, "edfm.enc1", &p)?;
    let p = ops.max_pool2(&enc1)?;
    let p = convl_forward(ops, l, "edfm.down2", &p)?;
    let enc2 = srb_forward(ops, l, "edfm.enc2", &p)?;

    let u = convl_forward(ops, l, "edfm.up1", &enc2)?;
    let u = ops.upsample(&u, h / 2, w / 2);
    let u = ops.add(&u, &enc1)?;
    let dec1 = srb_forward(ops, l, "edfm.dec1", &u)?;
    let u = convl_forward(ops, l, "edfm.up0", &dec1)?;
    let u = ops.upsample(&u, h, w);
    let u = ops.add(&u, &enc0)?;
    let dec0 = srb_forward(ops, l, "edfm.dec0", &u)?;
    let out = l.conv(ops, "edfm.head", &dec0, same3())?;
    Ok(ops.clamp01(&out))
}

/// Full network on a `B×3×H×W` batch with `H`, `W` divisible by 4.
/// Returns the restored batch and the stretch coefficients the color branch
/// used, which can be passed back as `frozen` to replay them.
pub fn forward<T: Real, O: Ops<T>>(
    ops: &mut O,
    params: &ParamMap<T>,
    cfg: &NetworkConfig,
    img: &O::V,
    frozen: Option<&[Vec<PlaneStretch>]>,
) -> Result<(O::V, Vec<Vec<PlaneStretch>>)> {
    let [_, c, h, w] = ops.value(img).dims();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("network input has {c} channels")));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::IndivisibleSpatialDims { height: h, width: w });
    }
    let l = Layers::new(params, cfg.norm_eps);
    let mut used = Vec::new();
    let dem = dem_forward(ops, &l, cfg, img)?;
    let crm = crm_forward(ops, &l, cfg, img, frozen, &mut used)?;
    let mem = mem_forward(ops, &l, cfg, img)?;
    let out = edfm_forward(ops, &l, &dem, &crm, &mem)?;
    Ok((out, used))
}

/// Restores a batch of equally sized images. Sides that are not multiples
/// of 4 are reflect-padded for the pass and cropped afterwards.
pub fn aosrnet_forward_batch(images: &[&Image], ckpt: &Checkpoint) -> Result<Vec<Image>> {
    ckpt.validate()?;
    let x: Tensor<f32> = Tensor::from_images(images)?;
    if x.channels() != 3 {
        return Err(Error::ShapeMismatch(format!("expected RGB input, got {} channels", x.channels())));
    }
    let (h, w) = (x.height(), x.width());
    let (ph, pw) = ((4 - h % 4) % 4, (4 - w % 4) % 4);
    let x = if ph + pw > 0 { x.pad_bottom_right(ph, pw) } else { x };
    let mut ops = Eval;
    let xv = ops.input(x);
    let (y, _) = forward(&mut ops, &ckpt.params, &ckpt.config, &xv, None)?;
    let y = if ph + pw > 0 { y.crop_top_left(h, w) } else { (*y).clone() };
    Ok(y.to_images())
}

pub fn aosrnet_forward(img: &Image, ckpt: &Checkpoint) -> Result<Image> {
    Ok(aosrnet_forward_batch(&[img], ckpt)?.remove(0))
}
