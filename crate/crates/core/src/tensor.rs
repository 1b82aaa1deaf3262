//! Minimal dense tensor plumbing for the convolutional engine.
//!
//! Activations are stored channel-major (`C × N × H × W`). With that layout a
//! convolution is a single GEMM between the weight matrix and the im2col
//! buffer, and every normalization channel is one contiguous run per image.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type supported by the engine (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a · b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(span(m, k, rsa, csa) <= a.len());
                debug_assert!(span(k, n, rsb, csb) <= b.len());
                debug_assert!(span(m, n, rsc, csc) <= c.len());
                // SAFETY: the debug assertions above describe the contract every
                // caller in this crate upholds: each strided view lies inside its slice.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs + 1) as usize
}

/// Row-major `a[m×k] · b[k×n]`, accumulated into `c` scaled by `beta`.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Activation batch in channel-major layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Entries of channel `ch` across the whole batch.
    pub fn channel(&self, ch: usize) -> &[T] {
        let len = self.n * self.hw();
        &self.data[ch * len..(ch + 1) * len]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [T] {
        let len = self.n * self.hw();
        &mut self.data[ch * len..(ch + 1) * len]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.n, self.h, self.w]
    }

    /// Builds a batch from channel-last images (`H × W × C` each).
    pub fn from_hwc_images(images: &[&[T]], h: usize, w: usize, c: usize) -> Self {
        let n = images.len();
        let mut out = Self::zeros(c, n, h, w);
        let hw = h * w;
        for (img_idx, img) in images.iter().enumerate() {
            debug_assert_eq!(img.len(), hw * c);
            for p in 0..hw {
                for ch in 0..c {
                    out.data[(ch * n + img_idx) * hw + p] = img[p * c + ch];
                }
            }
        }
        out
    }

    /// Concatenates two batches with matching `C, H, W` along the image axis.
    pub fn concat_batch(a: &Self, b: &Self) -> Self {
        assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w));
        let hw = a.hw();
        let n = a.n + b.n;
        let mut data = Vec::with_capacity(a.c * n * hw);
        for ch in 0..a.c {
            data.extend_from_slice(a.channel(ch));
            data.extend_from_slice(b.channel(ch));
        }
        Self {
            c: a.c,
            n,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Images `start..end` of the batch.
    pub fn slice_batch(&self, start: usize, end: usize) -> Self {
        let hw = self.hw();
        let n = end - start;
        let mut data = Vec::with_capacity(self.c * n * hw);
        for ch in 0..self.c {
            let base = ch * self.n * hw;
            data.extend_from_slice(&self.data[base + start * hw..base + end * hw]);
        }
        Self {
            c: self.c,
            n,
            h: self.h,
            w: self.w,
            data,
        }
    }
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_dim(&self, input: usize) -> usize {
        (input + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Unfolds `x` into a `[C·k·k, N·Ho·Wo]` row-major matrix.
pub fn im2col<T: Real>(x: &Act<T>, win: Window, cols: &mut Vec<T>) -> (usize, usize) {
    let (ho, wo) = (win.out_dim(x.h), win.out_dim(x.w));
    let k = win.kernel;
    let rows = x.c * k * k;
    let ncols = x.n * ho * wo;
    cols.clear();
    cols.resize(rows * ncols, T::zero());
    let hw = x.hw();
    for ch in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for img in 0..x.n {
                    let src = &x.data[(ch * x.n + img) * hw..(ch * x.n + img + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        let drow = &mut dst[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (ho, wo)
}

/// Adjoint of [`im2col`]: scatters column gradients back into an input-shaped buffer.
pub fn col2im<T: Real>(cols: &[T], c: usize, n: usize, h: usize, w: usize, win: Window) -> Act<T> {
    let (ho, wo) = (win.out_dim(h), win.out_dim(w));
    let k = win.kernel;
    let ncols = n * ho * wo;
    let mut out = Act::zeros(c, n, h, w);
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for img in 0..n {
                    let dst = &mut out.data[(ch * n + img) * hw..(ch * n + img + 1) * hw];
                    for oy in 0..ho {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &src[(img * ho + oy) * wo..(img * ho + oy + 1) * wo];
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        matmul(2, 3, 4, &a, &b, 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for any x, y.
        let win = Window {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut x = Act::<f64>::zeros(2, 3, 5, 5);
        for (i, v) in x.data.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 - 5.0;
        }
        let mut cols = Vec::new();
        im2col(&x, win, &mut cols);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, 2, 3, 5, 5, win);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut a = Act::<f32>::zeros(2, 2, 2, 2);
        let mut b = Act::<f32>::zeros(2, 3, 2, 2);
        a.data.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32);
        b.data.iter_mut().enumerate().for_each(|(i, v)| *v = -(i as f32));
        let ab = Act::concat_batch(&a, &b);
        assert_eq!(ab.slice_batch(0, 2), a);
        assert_eq!(ab.slice_batch(2, 5), b);
    }
}
