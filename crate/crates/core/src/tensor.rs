//! Dense batch × channel × height × width tensors.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Floating-point element type of network tensors. Training runs in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
    + 'static
{
    const DTYPE: &'static str;

    /// `c = alpha·a·b + beta·c` with explicit row/column strides.
    ///
    /// # Safety
    /// The strided views of `a` (m×k), `b` (k×n) and `c` (m×n) must lie
    /// inside their allocations and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (m×n) = a·b + (accumulate ? out : 0)`.
pub(crate) fn matmul<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.shape();
    let (kb, n) = b.shape();
    assert_eq!(k, kb, "inner dimensions");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: shapes and lengths were checked above; `out` is a distinct
    // mutable borrow so it cannot alias the inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![T::zero(); dims.iter().product()] }
    }

    pub fn filled(dims: [usize; 4], v: T) -> Self {
        Self { dims, data: vec![v; dims.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Self { dims: [1, 1, 1, 1], data: vec![v] }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!("{} values for dims {dims:?}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [b, c, h, w] = dims;
        let mut data = Vec::with_capacity(b * c * h * w);
        for ib in 0..b {
            for ic in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([ib, ic, y, x]));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn offset(&self, [b, c, y, x]: [usize; 4]) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    /// Contiguous `h·w` plane for (batch, channel).
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.plane_len();
        let start = (b * self.dims[1] + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.plane_len();
        let start = (b * self.dims[1] + c) * n;
        &mut self.data[start..start + n]
    }

    /// Contiguous `c·h·w` block for one batch item.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.dims[1] * self.plane_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { dims: self.dims, data: self.data.iter().map(|&v| U::of(v.f64())).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.dims, other.dims);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Same data under new dims of equal element count.
    pub fn reshaped(self, dims: [usize; 4]) -> Self {
        assert_eq!(dims.iter().product::<usize>(), self.data.len());
        Self { dims, data: self.data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Tensor<T>, what: &str) -> Result<()> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", self.dims, other.dims)))
        }
    }

    /// Stacks equally-sized HWC images into one BCHW batch.
    pub fn from_images(images: &[&Image]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyInput)?;
        let (h, w, c) = first.dims();
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.dims() != (h, w, c) {
                return Err(Error::ShapeMismatch(format!(
                    "batch of {:?} and {:?} images",
                    (h, w, c),
                    img.dims()
                )));
            }
            for ch in 0..c {
                data.extend(img.data().iter().skip(ch).step_by(c).map(|&v| T::of(v)));
            }
        }
        Ok(Self { dims: [images.len(), c, h, w], data })
    }

    pub fn from_image(img: &Image) -> Self {
        Self::from_images(&[img]).expect("single image")
    }

    /// Extracts batch item `b` as an HWC image.
    pub fn to_image(&self, b: usize) -> Image {
        let [_, c, h, w] = self.dims;
        Image::from_fn(h, w, c, |y, x, ch| self.at([b, ch, y, x]).f64())
    }

    pub fn to_images(&self) -> Vec<Image> {
        (0..self.batch()).map(|b| self.to_image(b)).collect()
    }

    /// Reflect-pads the bottom and right edges; falls back to edge
    /// replication where a dimension is too short to reflect.
    pub fn pad_bottom_right(&self, pad_h: usize, pad_w: usize) -> Self {
        let [b, c, h, w] = self.dims;
        let src = |i: usize, n: usize| -> usize {
            if i < n {
                i
            } else {
                let over = i - n + 1;
                if over < n {
                    n - 1 - over
                } else {
                    n - 1
                }
            }
        };
        let (nh, nw) = (h + pad_h, w + pad_w);
        Self::from_fn([b, c, nh, nw], |[ib, ic, y, x]| self.at([ib, ic, src(y, h), src(x, w)]))
    }

    pub fn crop_top_left(&self, h: usize, w: usize) -> Self {
        let [b, c, _, _] = self.dims;
        Self::from_fn([b, c, h, w], |[ib, ic, y, x]| self.at([ib, ic, y, x]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_with_transposes() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut out = [0.0f64; 4];
        matmul(MatRef::new(&a, 2, 3), MatRef::new(&b, 3, 2), &mut out, false);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
        // a^T (3x2) · a (2x3)... use b^T (2x3) · a^T (3x2)
        let mut out2 = [1.0f64; 4];
        matmul(MatRef::new(&b, 3, 2).t(), MatRef::new(&a, 2, 3).t(), &mut out2, true);
        assert_eq!(out2, [59.0, 140.0, 65.0, 155.0]);
    }

    #[test]
    fn image_batch_round_trip() {
        let img = Image::from_fn(3, 2, 3, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let t = Tensor::<f64>::from_image(&img);
        assert_eq!(t.dims(), [1, 3, 3, 2]);
        assert_eq!(t.at([0, 2, 1, 1]), 112.0);
        assert_eq!(t.to_image(0), img);
    }

    #[test]
    fn reflect_padding() {
        let t = Tensor::<f64>::from_vec([1, 1, 1, 5], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.pad_bottom_right(0, 3);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0]);
        let one = Tensor::<f64>::from_vec([1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(one.pad_bottom_right(3, 0).data(), &[5.0; 4]);
        assert_eq!(p.crop_top_left(1, 5), t);
    }
}
