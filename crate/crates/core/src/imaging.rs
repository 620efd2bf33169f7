//! Image representation, PNG IO and order statistics.
//!
//! Images are stored interleaved (height × width × channels) as `f64` so the
//! classical operators can be checked at double precision. Feature maps used
//! by the network live in [`crate::tensor::Tensor`] instead.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dims must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image dims must be >= 1");
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image dims must be >= 1");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Copies one channel out as a contiguous row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        assert!(c < self.channels);
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn set_channel(&mut self, c: usize, plane: &[f64]) {
        assert!(c < self.channels && plane.len() == self.pixels());
        for (dst, &v) in self.data.iter_mut().skip(c).step_by(self.channels).zip(plane) {
            *dst = v;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.dims(), other.dims())))
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        self.channel(c).iter().sum::<f64>() / self.pixels() as f64
    }

    /// Crops the window starting at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Self { height, width, channels: c, data })
    }

    /// ITU-R BT.601 luma weights, returned as a single-channel image.
    pub fn luminance(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }
}

pub fn clamp01(img: &Image) -> Image {
    img.map(|v| v.clamp(0.0, 1.0))
}

/// Loads an 8- or 16-bit RGB PNG as an image scaled to [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
            Image::new(h as usize, w as usize, 3, data)
        }
        DynamicImage::ImageRgb16(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
            Image::new(h as usize, w as usize, 3, data)
        }
        other => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected RGB raster, found {:?}", other.color()),
        }),
    }
}

/// Loads a single-channel depth map, 16-bit preferred, scaled to [0, 1].
pub fn load_depth(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    match open(path)? {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
            Image::new(h as usize, w as usize, 1, data)
        }
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect();
            Image::new(h as usize, w as usize, 1, data)
        }
        other => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected single-channel depth map, found {:?}", other.color()),
        }),
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| {
        Error::Format { path: path.to_path_buf(), reason: e.to_string() }
    })
}

/// Quantizes a [0, 1] value to 8 bits: clamp, then round half up.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes a 3-channel image as an 8-bit RGB PNG.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 3 {
        return Err(Error::ShapeMismatch(format!("save_image expects 3 channels, got {}", img.channels())));
    }
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize_u8(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw).expect("buffer size");
    write_png(path, |p| buf.save_with_format(p, image::ImageFormat::Png))
}

/// Writes a single-channel [0, 1] image as a 16-bit grayscale PNG.
pub fn save_depth(depth: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if depth.channels() != 1 {
        return Err(Error::ShapeMismatch("depth maps are single-channel".into()));
    }
    let raw: Vec<u16> =
        depth.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw).expect("buffer size");
    write_png(path, |p| buf.save_with_format(p, image::ImageFormat::Png))
}

fn write_png(
    path: &Path,
    save: impl FnOnce(&Path) -> image::ImageResult<()>,
) -> Result<()> {
    save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

/// Nearest-rank percentile: the element at 1-based rank `ceil(p·N)` of the
/// sorted values, with `p = 0` selecting the minimum.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("percentile fraction {p} outside [0, 1]")));
    }
    let mut scratch = values.to_vec();
    let k = nearest_rank(values.len(), p) - 1;
    let (_, v, _) = scratch.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*v)
}

/// 1-based nearest rank for `n` samples. A small slack keeps `p·n` values
/// that are integers up to rounding (0.3 · 10) on the integer.
pub fn nearest_rank(n: usize, p: f64) -> usize {
    let raw = (p * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// Normalized 1-D Gaussian taps spanning `radius` pixels either side.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable filtering of one plane with edge-replicated borders.
pub fn blur_plane(plane: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (i, &k) in kernel.iter().enumerate() {
                let xx = (x + i).saturating_sub(r).min(width - 1);
                acc += k * row[xx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for (i, &k) in kernel.iter().enumerate() {
            let yy = (y + i).saturating_sub(r).min(height - 1);
            let src = &tmp[yy * width..(yy + 1) * width];
            let dst = &mut out[y * width..(y + 1) * width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    out
}
