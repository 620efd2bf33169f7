//! Forward and backward kernels for the differentiable layer primitives.

use crate::error::{Error, Result};
use crate::tensor::{matmul, MatRef, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Stride-1 padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { dilation, padding: dilation * (kernel - 1) / 2 }
    }
}

fn conv_out_len(len: usize, k: usize, spec: ConvSpec) -> Result<usize> {
    let span = spec.dilation * (k - 1);
    (len + 2 * spec.padding)
        .checked_sub(span)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::ShapeMismatch(format!("input length {len} too short for kernel span {span}")))
}

pub(crate) fn conv_check<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<[usize; 4]> {
    let [b, cin, h, wd] = x.dims();
    let [cout, wcin, kh, kw] = w.dims();
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!("conv expects {wcin} input channels, got {cin}")));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::ShapeMismatch(format!("conv kernel must be square and odd, got {kh}x{kw}")));
    }
    if let Some(bias) = bias {
        if bias.numel() != cout {
            return Err(Error::ShapeMismatch(format!("bias of {} for {cout} outputs", bias.numel())));
        }
    }
    Ok([b, cout, conv_out_len(h, kh, spec)?, conv_out_len(wd, kw, spec)?])
}

/// Unfolds one sample into a `(cin·k·k) × (oh·ow)` column matrix.
fn im2col<T: Real>(
    src: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (d, p) = (spec.dilation as isize, spec.padding as isize);
    let n = oh * ow;
    for ci in 0..cin {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let off_y = ky as isize * d - p;
                let off_x = kx as isize * d - p;
                // valid ox range: 0 <= ox + off_x < w
                let x0 = (-off_x).clamp(0, ow as isize) as usize;
                let x1 = (w as isize - off_x).clamp(0, ow as isize) as usize;
                for oy in 0..oh {
                    let iy = oy as isize + off_y;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || x0 >= x1 {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    line[..x0].iter_mut().for_each(|v| *v = T::zero());
                    line[x1..].iter_mut().for_each(|v| *v = T::zero());
                    let s = iy as usize * w + (x0 as isize + off_x) as usize;
                    line[x0..x1].copy_from_slice(&plane[s..s + (x1 - x0)]);
                }
            }
        }
    }
}

/// Folds column gradients back onto the input sample (accumulating).
fn col2im<T: Real>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let (d, p) = (spec.dilation as isize, spec.padding as isize);
    let n = oh * ow;
    for ci in 0..cin {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let off_y = ky as isize * d - p;
                let off_x = kx as isize * d - p;
                let x0 = (-off_x).clamp(0, ow as isize) as usize;
                let x1 = (w as isize - off_x).clamp(0, ow as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy as isize + off_y;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let s = iy as usize * w + (x0 as isize + off_x) as usize;
                    for (acc, &g) in plane[s..s + (x1 - x0)].iter_mut().zip(&src[oy * ow + x0..oy * ow + x1]) {
                        *acc += g;
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, spec: ConvSpec) -> bool {
    k == 1 && spec.padding == 0
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let out_dims = conv_check(x, w, bias, spec)?;
    let [b, cin, h, wd] = x.dims();
    let [_, cout, oh, ow] = out_dims;
    let k = w.dims()[2];
    let kk = cin * k * k;
    let n = oh * ow;
    let mut out = Tensor::zeros(out_dims);
    let mut cols = if is_pointwise(k, spec) { Vec::new() } else { vec![T::zero(); kk * n] };
    for ib in 0..b {
        let sample = x.sample(ib);
        let colm = if is_pointwise(k, spec) {
            sample
        } else {
            im2col(sample, cin, h, wd, k, spec, oh, ow, &mut cols);
            &cols[..]
        };
        let dst = &mut out.data_mut()[ib * cout * n..(ib + 1) * cout * n];
        matmul(MatRef::new(w.data(), cout, kk), MatRef::new(colm, kk, n), dst, false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                dst[co * n..(co + 1) * n].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution given the upstream gradient `dy`.
/// Returns (dx if requested, dw, dbias if the layer has a bias).
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    spec: ConvSpec,
    dy: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let [b, cin, h, wd] = x.dims();
    let [_, cout, oh, ow] = dy.dims();
    let k = w.dims()[2];
    let kk = cin * k * k;
    let n = oh * ow;
    let mut dw = Tensor::zeros(w.dims());
    let mut dbias = has_bias.then(|| Tensor::zeros([1, cout, 1, 1]));
    let mut dx = want_dx.then(|| Tensor::zeros(x.dims()));
    let pointwise = is_pointwise(k, spec);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * n] };
    let mut dcols = if want_dx && !pointwise { vec![T::zero(); kk * n] } else { Vec::new() };
    for ib in 0..b {
        let g = dy.sample(ib);
        let sample = x.sample(ib);
        let colm = if pointwise {
            sample
        } else {
            im2col(sample, cin, h, wd, k, spec, oh, ow, &mut cols);
            &cols[..]
        };
        matmul(MatRef::new(g, cout, n), MatRef::new(colm, kk, n).t(), dw.data_mut(), true);
        if let Some(db) = dbias.as_mut() {
            for (co, acc) in db.data_mut().iter_mut().enumerate() {
                *acc += g[co * n..(co + 1) * n].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[ib * cin * h * wd..(ib + 1) * cin * h * wd];
            if pointwise {
                matmul(MatRef::new(w.data(), cout, kk).t(), MatRef::new(g, cout, n), dst, true);
            } else {
                matmul(MatRef::new(w.data(), cout, kk).t(), MatRef::new(g, cout, n), &mut dcols, false);
                col2im(&dcols, cin, h, wd, k, spec, oh, ow, dst);
            }
        }
    }
    (dx, dw, dbias)
}

/// Layer normalization across channels at every spatial site.
pub struct ChannelNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn channel_norm_forward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, ChannelNormCache<T>)> {
    let [b, c, _, _] = x.dims();
    if gain.numel() != c || bias.numel() != c {
        return Err(Error::ShapeMismatch(format!(
            "norm affine of {}/{} for {c} channels",
            gain.numel(),
            bias.numel()
        )));
    }
    let n = x.plane_len();
    let inv_c = T::one() / T::of(c as f64);
    let eps = T::of(eps);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); b * n];
    let mut out = Tensor::zeros(x.dims());
    let mut mean = vec![T::zero(); n];
    let mut var = vec![T::zero(); n];
    for ib in 0..b {
        mean.iter_mut().for_each(|v| *v = T::zero());
        var.iter_mut().for_each(|v| *v = T::zero());
        for ic in 0..c {
            for (m, &v) in mean.iter_mut().zip(x.plane(ib, ic)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for ic in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(x.plane(ib, ic)).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let istd = &mut inv_std[ib * n..(ib + 1) * n];
        for (is, &s) in istd.iter_mut().zip(&var) {
            *is = T::one() / (s * inv_c + eps).sqrt();
        }
        for ic in 0..c {
            let off = (ib * c + ic) * n;
            let (g, bb) = (gain.data()[ic], bias.data()[ic]);
            let src = x.plane(ib, ic);
            let xh = &mut xhat[off..off + n];
            let dst = &mut out.data_mut()[off..off + n];
            for p in 0..n {
                let v = (src[p] - mean[p]) * istd[p];
                xh[p] = v;
                dst[p] = g * v + bb;
            }
        }
    }
    Ok((out, ChannelNormCache { xhat, inv_std }))
}

/// Returns (dx, dgain, dbias).
pub fn channel_norm_backward<T: Real>(
    dims: [usize; 4],
    gain: &Tensor<T>,
    cache: &ChannelNormCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [b, c, h, w] = dims;
    let n = h * w;
    let mut dx = Tensor::zeros(dims);
    let mut dgain = Tensor::zeros(gain.dims());
    let mut dbias = Tensor::zeros(gain.dims());
    let inv_c = T::one() / T::of(c as f64);
    let mut sum_d = vec![T::zero(); n];
    let mut sum_dx = vec![T::zero(); n];
    for ib in 0..b {
        sum_d.iter_mut().for_each(|v| *v = T::zero());
        sum_dx.iter_mut().for_each(|v| *v = T::zero());
        for ic in 0..c {
            let off = (ib * c + ic) * n;
            let g = gain.data()[ic];
            let dyp = &dy.data()[off..off + n];
            let xh = &cache.xhat[off..off + n];
            let mut dg = T::zero();
            let mut db = T::zero();
            for p in 0..n {
                dg += dyp[p] * xh[p];
                db += dyp[p];
                let dxh = dyp[p] * g;
                sum_d[p] += dxh;
                sum_dx[p] += dxh * xh[p];
            }
            dgain.data_mut()[ic] += dg;
            dbias.data_mut()[ic] += db;
        }
        let istd = &cache.inv_std[ib * n..(ib + 1) * n];
        for ic in 0..c {
            let off = (ib * c + ic) * n;
            let g = gain.data()[ic];
            let dyp = &dy.data()[off..off + n];
            let xh = &cache.xhat[off..off + n];
            let dst = &mut dx.data_mut()[off..off + n];
            for p in 0..n {
                let dxh = dyp[p] * g;
                dst[p] = istd[p] * (dxh - inv_c * (sum_d[p] + xh[p] * sum_dx[p]));
            }
        }
    }
    (dx, dgain, dbias)
}

/// 2×2 stride-2 max pooling (floor mode). Also returns the in-plane index
/// of each selected element.
pub fn max_pool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [b, c, h, w] = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::ShapeMismatch(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut arg = vec![0u32; b * c * oh * ow];
    for ib in 0..b {
        for ic in 0..c {
            let src = x.plane(ib, ic);
            let base = (ib * c + ic) * oh * ow;
            let dst = out.plane_mut(ib, ic);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for cand in [best + 1, best + w, best + w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    dst[oy * ow + ox] = src[best];
                    arg[base + oy * ow + ox] = best as u32;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Real>(in_dims: [usize; 4], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let [b, c, _, _] = in_dims;
    let mut dx = Tensor::zeros(in_dims);
    for ib in 0..b {
        for ic in 0..c {
            let base = (ib * c + ic) * dy.plane_len();
            let g = dy.plane(ib, ic);
            let dst = dx.plane_mut(ib, ic);
            for (i, &gv) in g.iter().enumerate() {
                dst[arg[base + i] as usize] += gv;
            }
        }
    }
    dx
}

/// Linear interpolation taps for resizing `n_in` → `n_out` samples with
/// half-pixel centres (no corner alignment).
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear_forward<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [b, c, h, w] = x.dims();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut rows = vec![T::zero(); ow];
    for ib in 0..b {
        for ic in 0..c {
            let src = x.plane(ib, ic);
            let dst = out.plane_mut(ib, ic);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                    let top = hx * src[y0 * w + x0] + lx * src[y0 * w + x1];
                    let bot = hx * src[y1 * w + x0] + lx * src[y1 * w + x1];
                    rows[ox] = hy * top + ly * bot;
                }
                dst[oy * ow..(oy + 1) * ow].copy_from_slice(&rows);
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward<T: Real>(in_dims: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = in_dims;
    let [_, _, oh, ow] = dy.dims();
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = Tensor::zeros(in_dims);
    for ib in 0..b {
        for ic in 0..c {
            let g = dy.plane(ib, ic);
            let dst = dx.plane_mut(ib, ic);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (ly, hy) = (T::of(ly), T::of(1.0 - ly));
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let (lx, hx) = (T::of(lx), T::of(1.0 - lx));
                    let gv = g[oy * ow + ox];
                    dst[y0 * w + x0] += hy * hx * gv;
                    dst[y0 * w + x1] += hy * lx * gv;
                    dst[y1 * w + x0] += ly * hx * gv;
                    dst[y1 * w + x1] += ly * lx * gv;
                }
            }
        }
    }
    dx
}
