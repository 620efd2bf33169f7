//! Full-reference PSNR and SSIM, no-reference NIQE, and split reports.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::imaging::{blur_plane, gaussian_kernel, load_image, Image};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_capped(a, b, PSNR_CAP)
}

/// `10·log10(1/MSE)` over all elements, at most `cap`.
pub fn psnr_capped(a: &Image, b: &Image, cap: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Separable valid-region filtering of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, &kv) in k.iter().enumerate() {
            let src = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    (out, oh, ow)
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ 1.5) over the valid
/// region, averaged across channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w, c) = a.dims();
    if h.min(w) < SSIM_WIN {
        return Err(Error::TooSmall(format!("SSIM needs sides >= {SSIM_WIN}, got {h}x{w}")));
    }
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WIN / 2);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let (x, y) = (a.channel(ch), b.channel(ch));
        if x == y {
            total += 1.0;
            continue;
        }
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mx, _, _) = filter_valid(&x, h, w, &k);
        let (my, _, _) = filter_valid(&y, h, w, &k);
        let (sxx, _, _) = filter_valid(&prod(&x, &x), h, w, &k);
        let (syy, _, _) = filter_valid(&prod(&y, &y), h, w, &k);
        let (sxy, _, _) = filter_valid(&prod(&x, &y), h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Multivariate Gaussian of natural-scene statistics features.
#[derive(Debug, Clone, PartialEq)]
pub struct NiqeModel {
    pub patch: usize,
    pub mean: Vec<f64>,
    /// Row-major `features × features`.
    pub cov: Vec<f64>,
}

const BUILTIN_MODEL: &str = include_str!("../data/niqe_pristine.txt");
pub const NIQE_FEATURES: usize = 36;

impl NiqeModel {
    /// The pristine-corpus model shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_MODEL, "builtin NIQE model").expect("shipped model parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::ModelMissing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut features = None;
        let mut patch = None;
        let mut mean = None;
        let mut cov = Vec::new();
        let mut header = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or_default();
            let nums = || -> Result<Vec<f64>> {
                line.split_whitespace()
                    .skip(1)
                    .map(|t| t.parse::<f64>().map_err(|e| Error::parse(context, e)))
                    .collect()
            };
            match key {
                "niqe-model" => {
                    if nums()? != [1.0] {
                        return Err(Error::parse(context, "unsupported model version"));
                    }
                    header = true;
                }
                "features" => features = Some(nums()?.first().copied().unwrap_or(0.0) as usize),
                "patch" => patch = Some(nums()?.first().copied().unwrap_or(0.0) as usize),
                "mean" => mean = Some(nums()?),
                "cov" => cov.push(nums()?),
                other => return Err(Error::parse(context, format!("unknown record {other:?}"))),
            }
        }
        let missing = |what: &str| Error::parse(context, format!("missing {what}"));
        if !header {
            return Err(missing("niqe-model header"));
        }
        let f = features.ok_or_else(|| missing("features"))?;
        let patch = patch.ok_or_else(|| missing("patch"))?;
        let mean = mean.ok_or_else(|| missing("mean"))?;
        if f != NIQE_FEATURES || mean.len() != f || cov.len() != f || cov.iter().any(|r| r.len() != f) {
            return Err(Error::parse(context, format!("expected {NIQE_FEATURES} features with a square covariance")));
        }
        if patch < 8 || patch % 2 != 0 {
            return Err(Error::parse(context, format!("patch size {patch} must be even and >= 8")));
        }
        Ok(Self { patch, mean, cov: cov.concat() })
    }
}

/// BT.601 luma on the 16–235 scale, rounded.
fn luma_255(img: &Image) -> Vec<f64> {
    img.data()
        .chunks(img.channels())
        .map(|p| {
            if p.len() >= 3 {
                (16.0 + 65.481 * p[0] + 128.553 * p[1] + 24.966 * p[2]).round()
            } else {
                (p[0] * 255.0).round()
            }
        })
        .collect()
}

struct GammaGrid {
    gam: Vec<f64>,
    r_gam: Vec<f64>,
}

fn gamma_grid() -> &'static GammaGrid {
    static GRID: OnceLock<GammaGrid> = OnceLock::new();
    GRID.get_or_init(|| {
        let gam: Vec<f64> = (0..=9800).map(|i| 0.2 + 0.001 * i as f64).collect();
        let r_gam = gam
            .iter()
            .map(|&g| {
                let r = 1.0 / g;
                gamma(2.0 * r).powi(2) / (gamma(r) * gamma(3.0 * r))
            })
            .collect();
        GammaGrid { gam, r_gam }
    })
}

/// Asymmetric generalized Gaussian fit by moment matching over a shape grid.
fn aggd(values: &[f64]) -> (f64, f64, f64) {
    let (mut ls, mut ln, mut rs, mut rn, mut abs, mut sq) = (0.0, 0usize, 0.0, 0usize, 0.0, 0.0);
    for &v in values {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
        abs += v.abs();
        sq += v * v;
    }
    let n = values.len() as f64;
    let left_std = (ls / ln as f64).sqrt();
    let right_std = (rs / rn as f64).sqrt();
    let gh = left_std / right_std;
    let rhat = (abs / n).powi(2) / (sq / n);
    let rnorm = rhat * (gh.powi(3) + 1.0) * (gh + 1.0) / (gh * gh + 1.0).powi(2);
    let grid = gamma_grid();
    let mut best = 0;
    let mut best_err = f64::INFINITY;
    for (i, &r) in grid.r_gam.iter().enumerate() {
        let e = (r - rnorm).powi(2);
        if e < best_err {
            best_err = e;
            best = i;
        }
    }
    let alpha = grid.gam[best];
    let k = (gamma(1.0 / alpha) / gamma(3.0 / alpha)).sqrt();
    (alpha, left_std * k, right_std * k)
}

fn block_features(block: &[f64], h: usize, w: usize, out: &mut Vec<f64>) {
    let (alpha, bl, br) = aggd(block);
    out.push(alpha);
    out.push((bl + br) / 2.0);
    for (dy, dx) in [(0isize, 1isize), (1, 0), (1, 1), (1, -1)] {
        let mut prod = Vec::with_capacity(block.len());
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                prod.push(block[y * w + x] * block[sy * w + sx]);
            }
        }
        let (alpha, bl, br) = aggd(&prod);
        let mean = (br - bl) * gamma(2.0 / alpha) / gamma(1.0 / alpha);
        out.extend([alpha, mean, bl, br]);
    }
}

fn cubic(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        1.5 * a.powi(3) - 2.5 * a * a + 1.0
    } else if a <= 2.0 {
        -0.5 * a.powi(3) + 2.5 * a * a - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Bicubic antialiased resampling weights with symmetric borders.
fn resize_taps(n_in: usize, n_out: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let width = 4.0 / scale;
    let p = width.ceil() as isize + 2;
    (1..=n_out)
        .map(|x| {
            let u = x as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let mut taps: Vec<(isize, f64)> =
                (0..p).map(|k| (left + k, scale * cubic((u - (left + k) as f64) * scale))).collect();
            let s: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= s);
            taps.into_iter()
                .map(|(j, wgt)| {
                    let j0 = j - 1;
                    let n = n_in as isize;
                    let idx = if j0 < 0 {
                        -j0 - 1
                    } else if j0 >= n {
                        2 * n - j0 - 1
                    } else {
                        j0
                    };
                    (idx.clamp(0, n - 1) as usize, wgt)
                })
                .collect()
        })
        .collect()
}

/// Half-size bicubic resampling with antialiasing.
fn downscale_half(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let th = resize_taps(h, oh, 0.5);
    let tw = resize_taps(w, ow, 0.5);
    let mut mid = vec![0.0; oh * w];
    for (oy, taps) in th.iter().enumerate() {
        for &(iy, wgt) in taps {
            for x in 0..w {
                mid[oy * w + x] += wgt * plane[iy * w + x];
            }
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (ox, taps) in tw.iter().enumerate() {
            out[y * ow + ox] = taps.iter().map(|&(ix, wgt)| wgt * mid[y * w + ix]).sum();
        }
    }
    (out, oh, ow)
}

/// Local mean-subtracted contrast-normalized coefficients.
fn mscn(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel(7.0 / 6.0, 3);
    let mu = blur_plane(plane, h, w, &k);
    let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
    let s2 = blur_plane(&sq, h, w, &k);
    plane
        .iter()
        .zip(&mu)
        .zip(&s2)
        .map(|((&v, &m), &q)| (v - m) / ((q - m * m).abs().sqrt() + 1.0))
        .collect()
}

/// NIQE score of `img` against `model`; lower is better.
pub fn niqe(img: &Image, model: &NiqeModel) -> Result<f64> {
    let (h, w, _) = img.dims();
    let p = model.patch;
    let (nbh, nbw) = (h / p, w / p);
    if nbh * nbw < 2 {
        return Err(Error::TooSmall(format!("NIQE needs at least two {p}x{p} blocks, got {h}x{w}")));
    }
    let (ch, cw) = (nbh * p, nbw * p);
    let y = luma_255(img);
    let mut plane: Vec<f64> = (0..ch).flat_map(|r| y[r * w..r * w + cw].to_vec()).collect();
    let (mut ph, mut pw) = (ch, cw);
    let mut feats = vec![Vec::with_capacity(NIQE_FEATURES); nbh * nbw];
    for scale in [1usize, 2] {
        let norm = mscn(&plane, ph, pw);
        let bs = p / scale;
        let mut i = 0;
        for bx in 0..nbw {
            for by in 0..nbh {
                let mut block = Vec::with_capacity(bs * bs);
                for r in by * bs..(by + 1) * bs {
                    block.extend_from_slice(&norm[r * pw + bx * bs..r * pw + (bx + 1) * bs]);
                }
                block_features(&block, bs, bs, &mut feats[i]);
                i += 1;
            }
        }
        if scale == 1 {
            let scaled: Vec<f64> = plane.iter().map(|v| v / 255.0).collect();
            let (d, dh, dw) = downscale_half(&scaled, ph, pw);
            plane = d.into_iter().map(|v| v * 255.0).collect();
            ph = dh;
            pw = dw;
        }
    }
    let f = NIQE_FEATURES;
    let mut mu = vec![0.0; f];
    for (j, m) in mu.iter_mut().enumerate() {
        let vals: Vec<f64> = feats.iter().map(|r| r[j]).filter(|v| !v.is_nan()).collect();
        *m = vals.iter().sum::<f64>() / vals.len() as f64;
    }
    let clean: Vec<&Vec<f64>> = feats.iter().filter(|r| r.iter().all(|v| !v.is_nan())).collect();
    if clean.len() < 2 {
        return Err(Error::TooSmall("fewer than two usable NIQE blocks".into()));
    }
    let n = clean.len() as f64;
    let cmean: Vec<f64> = (0..f).map(|j| clean.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(f, f);
    for r in &clean {
        for a in 0..f {
            for b in 0..f {
                cov[(a, b)] += (r[a] - cmean[a]) * (r[b] - cmean[b]);
            }
        }
    }
    cov /= n - 1.0;
    let pris = DMatrix::from_row_slice(f, f, &model.cov);
    let avg = (pris + cov) / 2.0;
    let svd = avg.svd(true, true);
    let smax = svd.singular_values.max();
    let inv = svd.pseudo_inverse(1e-15 * smax).map_err(|e| Error::Domain(e.to_string()))?;
    let d = DVector::from_vec(model.mean.iter().zip(&mu).map(|(a, b)| a - b).collect());
    let q = (d.transpose() * inv * &d)[(0, 0)];
    Ok(q.sqrt())
}

/// Loads the model at `path` and scores `img`.
pub fn niqe_with_file(img: &Image, path: impl AsRef<Path>) -> Result<f64> {
    niqe(img, &NiqeModel::load(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    /// Divides by `n − 1`.
    Sample,
    /// Divides by `n`.
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64], kind: StdKind) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        let denom = match kind {
            StdKind::Sample => n - 1.0,
            StdKind::Population => n,
        };
        let std = if denom > 0.0 { (ss / denom).sqrt() } else { 0.0 };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub niqe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub psnr: Option<MeanStd>,
    pub ssim: Option<MeanStd>,
    pub niqe: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub psnr_cap: f64,
    pub std_kind: StdKind,
    pub per_image: Vec<MetricRow>,
    pub aggregates: Aggregates,
}

impl MetricReport {
    pub fn new(dataset: &str, per_image: Vec<MetricRow>, std_kind: StdKind) -> Self {
        let col = |f: &dyn Fn(&MetricRow) -> Option<f64>| -> Vec<f64> { per_image.iter().filter_map(f).collect() };
        let aggregates = Aggregates {
            psnr: MeanStd::of(&col(&|r| Some(r.psnr)), std_kind),
            ssim: MeanStd::of(&col(&|r| Some(r.ssim)), std_kind),
            niqe: MeanStd::of(&col(&|r| r.niqe), std_kind),
        };
        Self { dataset: dataset.into(), psnr_cap: PSNR_CAP, std_kind, per_image, aggregates }
    }

    /// One row per image, then `mean` and `std` footer rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::parse("metric report csv", e);
        w.write_record(["id", "psnr", "ssim", "niqe"]).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.per_image {
            w.write_record([r.id.clone(), r.psnr.to_string(), r.ssim.to_string(), opt(r.niqe)])
                .map_err(csv_err)?;
        }
        let a = &self.aggregates;
        let std_label = match self.std_kind {
            StdKind::Sample => "std(sample)",
            StdKind::Population => "std(population)",
        };
        w.write_record([
            "mean".to_string(),
            opt(a.psnr.map(|m| m.mean)),
            opt(a.ssim.map(|m| m.mean)),
            opt(a.niqe.map(|m| m.mean)),
        ])
        .map_err(csv_err)?;
        w.write_record([
            std_label.to_string(),
            opt(a.psnr.map(|m| m.std)),
            opt(a.ssim.map(|m| m.std)),
            opt(a.niqe.map(|m| m.std)),
        ])
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::parse("metric report csv", e))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse("metric report json", e))
    }

    /// `mean±std` with three decimals, as in result tables.
    pub fn summary(&self) -> String {
        let f = |m: Option<MeanStd>| m.map(|m| format!("{:.3}±{:.3}", m.mean, m.std)).unwrap_or_else(|| "-".into());
        format!(
            "{}: PSNR {} SSIM {} NIQE {}",
            self.dataset,
            f(self.aggregates.psnr),
            f(self.aggregates.ssim),
            f(self.aggregates.niqe)
        )
    }
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Scores every same-named pair of PNGs. NIQE is computed on the restored
/// image when a model is given and the image is large enough.
pub fn evaluate_split(
    restored_dir: &Path,
    truth_dir: &Path,
    dataset: &str,
    niqe_model: Option<&NiqeModel>,
) -> Result<MetricReport> {
    let names = |d: &Path| -> Result<BTreeSet<String>> {
        Ok(list_images(d)?
            .into_iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect())
    };
    let restored = names(restored_dir)?;
    let truth = names(truth_dir)?;
    if let Some(n) = truth.difference(&restored).next() {
        return Err(Error::PairMismatch(format!("{n} has no counterpart in {}", restored_dir.display())));
    }
    if let Some(n) = restored.difference(&truth).next() {
        return Err(Error::PairMismatch(format!("{n} has no counterpart in {}", truth_dir.display())));
    }
    let mut rows = Vec::with_capacity(truth.len());
    for name in &truth {
        let r = load_image(restored_dir.join(name))?;
        let t = load_image(truth_dir.join(name))?;
        if !r.same_shape(&t) {
            return Err(Error::PairMismatch(format!("{name}: sizes {:?} and {:?} differ", r.dims(), t.dims())));
        }
        let niqe = match niqe_model {
            Some(m) => match niqe(&r, m) {
                Ok(v) => Some(v),
                Err(Error::TooSmall(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        rows.push(MetricRow { id: name.clone(), psnr: psnr(&r, &t)?, ssim: ssim(&r, &t)?, niqe });
    }
    Ok(MetricReport::new(dataset, rows, StdKind::Sample))
}
