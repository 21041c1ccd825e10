//! Dense row-major tensors and the numeric kernels the layers are built from.
//!
//! Every kernel is a pure function of its inputs. The fast paths (GEMM via
//! `matrixmultiply`, convolution via im2col + GEMM) are checked in the test
//! suites against direct loop implementations.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{HffError, Result};

/// Floating point element type. `f64` is used wherever finite differences are
/// taken; `f32` is allowed for training.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + Sum + 'static {
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Raw GEMM: `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m x k`, `k x n` and
    /// `m x n` matrices, and `c` must not alias `a` or `b`.
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
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided read-only view of a matrix stored in a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Scalar> MatRef<'a, T> {
    /// Row-major `rows x cols` view over the first `rows * cols` elements.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix view out of bounds");
        MatRef { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn in_bounds(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < self.data.len()
    }
}

/// `c = alpha * a * b + beta * c` where `c` is a contiguous row-major
/// `a.rows() x b.cols()` buffer. With `beta == 0` the prior contents of `c`
/// are ignored.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner extents differ");
    assert!(c.len() >= m * n, "gemm output buffer too small");
    assert!(a.in_bounds() && b.in_bounds(), "gemm view out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is a unique
    // borrow, so it cannot alias the shared inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(HffError::dim(format!("shape {shape:?} needs {expected} elements, got {}", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(HffError::dim("ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(HffError::dim(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of the tensor viewed as `dim(0) x rest`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.row_len().max(1))
    }

    pub fn as_mat(&self) -> Result<MatRef<'_, T>> {
        if self.rank() != 2 {
            return Err(HffError::dim(format!("expected a matrix, got {:?}", self.shape)));
        }
        Ok(MatRef::new(&self.data, self.shape[0], self.shape[1]))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(self, what: &str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(HffError::NonFinite(format!("{what} produced NaN or Inf")))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }
}

fn require_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(HffError::dim(format!("{what} must have rank {rank}, got shape {:?}", t.shape())));
    }
    Ok(())
}

/// `a[M x K] * b[K x N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank(a, 2, "matmul lhs")?;
    require_rank(b, 2, "matmul rhs")?;
    if a.dim(1) != b.dim(0) {
        return Err(HffError::dim(format!("matmul inner extents differ: {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = Tensor::zeros(&[a.dim(0), b.dim(1)]);
    gemm(T::one(), a.as_mat()?, b.as_mat()?, T::zero(), out.data_mut());
    out.check_finite("matmul")
}

/// `a[M x K] * b[N x K]^T`, the affine map with weights stored output-major.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank(a, 2, "matmul lhs")?;
    require_rank(b, 2, "matmul rhs")?;
    if a.dim(1) != b.dim(1) {
        return Err(HffError::dim(format!("matmul inner extents differ: {:?} x {:?}^T", a.shape(), b.shape())));
    }
    let mut out = Tensor::zeros(&[a.dim(0), b.dim(0)]);
    gemm(T::one(), a.as_mat()?, b.as_mat()?.t(), T::zero(), out.data_mut());
    out.check_finite("matmul")
}

/// Output extent of a strided, zero-padded window sweep.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(HffError::config("convolution stride must be positive"));
    }
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(HffError::dim(format!("kernel extent {kernel} does not fit padded input extent {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unfolds `input[C x H x W]` into `[C*kh*kw x H'*W']` columns, zero padded.
pub fn im2col<T: Scalar>(
    input: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    cols: &mut Vec<T>,
) -> Result<(usize, usize)> {
    let oh = conv_out_extent(h, kh, stride, pad)?;
    let ow = conv_out_extent(w, kw, stride, pad)?;
    let plane = oh * ow;
    cols.clear();
    cols.resize(c * kh * kw * plane, T::zero());
    for ci in 0..c {
        let src = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..oh {
                    let y = (oi * stride + ki) as isize - pad as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let src_row = &src[y as usize * w..(y as usize + 1) * w];
                    let dst_row = &mut dst[oi * ow..(oi + 1) * ow];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let x = (oj * stride + kj) as isize - pad as isize;
                        if x >= 0 && x < w as isize {
                            *d = src_row[x as usize];
                        }
                    }
                }
            }
        }
    }
    Ok((oh, ow))
}

/// 2-D cross-correlation of `input[Cin x H x W]` with `kernel[Cout x Cin x kh x kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    require_rank(input, 3, "conv2d input")?;
    require_rank(kernel, 4, "conv2d kernel")?;
    let (cin, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (cout, kcin, kh, kw) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    if kcin != cin {
        return Err(HffError::dim(format!(
            "kernel {:?} expects {kcin} input channels, input {:?} has {cin}",
            kernel.shape(),
            input.shape()
        )));
    }
    if bias.shape() != [cout] {
        return Err(HffError::dim(format!("bias {:?} does not match {cout} output channels", bias.shape())));
    }
    let mut cols = Vec::new();
    let (oh, ow) = im2col(input.data(), (cin, h, w), (kh, kw), stride, pad, &mut cols)?;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    conv2d_cols(kernel, bias, &cols, oh * ow, out.data_mut());
    out.check_finite("conv2d")
}

/// Applies a kernel to pre-unfolded columns: `out[Cout x plane] = K * cols + b`.
pub(crate) fn conv2d_cols<T: Scalar>(kernel: &Tensor<T>, bias: &Tensor<T>, cols: &[T], plane: usize, out: &mut [T]) {
    let cout = kernel.dim(0);
    let patch = kernel.len() / cout.max(1);
    for (o, &b) in out.chunks_mut(plane).zip(bias.data()) {
        o.fill(b);
    }
    gemm(T::one(), MatRef::new(kernel.data(), cout, patch), MatRef::new(cols, patch, plane), T::one(), out);
}

/// Spatial mean per channel: `[C x H x W] -> [C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank(input, 3, "global_avg_pool input")?;
    let plane = input.dim(1) * input.dim(2);
    if plane == 0 {
        return Err(HffError::dim("global_avg_pool needs a non-empty plane"));
    }
    let inv = T::one() / T::from_f64(plane as f64);
    let data = input.data().chunks(plane).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[input.dim(0)], data)
}

/// Non-overlapping 2x2 max pooling; an odd trailing row or column is dropped.
pub fn max_pool2x2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    require_rank(input, 3, "max_pool2x2 input")?;
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if h < 2 || w < 2 {
        return Err(HffError::dim(format!("max_pool2x2 needs H, W >= 2, got {:?}", input.shape())));
    }
    let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
    max_pool2x2_into(input.data(), (c, h, w), out.data_mut());
    Ok(out)
}

pub(crate) fn max_pool2x2_into<T: Scalar>(src: &[T], (c, h, w): (usize, usize, usize), out: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for i in 0..oh {
            let r0 = &plane[2 * i * w..(2 * i + 1) * w];
            let r1 = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..ow {
                out[(ci * oh + i) * ow + j] = r0[2 * j].max(r0[2 * j + 1]).max(r1[2 * j]).max(r1[2 * j + 1]);
            }
        }
    }
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Scales `v` to unit length in place and returns the original length. A zero
/// vector is left untouched.
pub fn normalize_in_place<T: Scalar>(v: &mut [T]) -> T {
    let len = l2_norm(v);
    if len > T::zero() {
        v.iter_mut().for_each(|x| *x = *x / len);
    }
    len
}

/// Largest singular value of `w[M x N]` by power iteration on `W^T W`.
///
/// The estimate `||W v_k||` is non-decreasing in `iters` (up to round-off)
/// and depends only on `seed` for its start vector.
pub fn spectral_norm<T: Scalar>(w: &Tensor<T>, iters: usize, seed: u64) -> Result<f64> {
    require_rank(w, 2, "spectral_norm input")?;
    if iters == 0 {
        return Err(HffError::config("spectral_norm needs iters >= 1"));
    }
    let (m, n) = (w.dim(0), w.dim(1));
    if m == 0 || n == 0 || w.data().iter().all(|v| v.is_zero()) {
        return Ok(0.0);
    }
    let a: Vec<f64> = w.data().iter().map(|v| v.as_f64()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize_in_place(&mut v);
    let mut wv = vec![0.0f64; m];
    let mut sigma = 0.0;
    for _ in 0..iters {
        gemm(1.0, MatRef::new(&a, m, n), MatRef::new(&v, n, 1), 0.0, &mut wv);
        sigma = l2_norm(&wv);
        if sigma == 0.0 {
            // Start vector in the null space; restart along a coordinate axis.
            v.fill(0.0);
            v[0] = 1.0;
            continue;
        }
        gemm(1.0, MatRef::new(&a, m, n).t(), MatRef::new(&wv, m, 1), 0.0, &mut v);
        if normalize_in_place(&mut v) == 0.0 {
            break;
        }
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_sum() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = Tensor::from_fn(&[1, 4, 5], |i| (i as f64).sin());
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let out = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn conv_kernel_larger_than_input() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 0), Err(HffError::Dimension(_))));
    }

    #[test]
    fn strided_output_extent() {
        assert_eq!(conv_out_extent(7, 3, 2, 1).unwrap(), 4);
        assert_eq!(conv_out_extent(224, 11, 4, 2).unwrap(), 55);
    }

    #[test]
    fn gap_cases() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[3, 2, 5], 0.75);
        assert_eq!(global_avg_pool(&c).unwrap().data(), &[0.75; 3]);
    }

    #[test]
    fn max_pool_cases() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(max_pool2x2(&x).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(&[2, 5, 4], -1.5);
        let p = max_pool2x2(&c).unwrap();
        assert_eq!(p.shape(), &[2, 2, 2]);
        assert!(p.data().iter().all(|&v| v == -1.5));
        assert!(max_pool2x2(&Tensor::<f64>::zeros(&[1, 1, 4])).is_err());
    }

    #[test]
    fn spectral_norm_simple_cases() {
        let d = t(&[2, 2], &[3.0, 0.0, 0.0, 1.0]);
        assert!((spectral_norm(&d, 50, 7).unwrap() - 3.0).abs() < 1e-6);
        let i4 = Tensor::<f64>::identity(4);
        assert!((spectral_norm(&i4, 1, 7).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Tensor::<f64>::zeros(&[3, 2]), 5, 1).unwrap(), 0.0);
        assert!(spectral_norm(&d, 0, 1).is_err());
    }

    #[test]
    fn l2_norm_cases() {
        assert_eq!(l2_norm(&[3.0f64, 4.0]), 5.0);
        assert_eq!(l2_norm(&[0.0f64; 4]), 0.0);
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(&[2, 3], vec![0.0f64; 5]).is_err());
        let x = Tensor::<f32>::zeros(&[2, 3]).reshape(&[3, 2]).unwrap();
        assert_eq!(x.shape(), &[3, 2]);
        assert!(x.reshape(&[4]).is_err());
    }
}
