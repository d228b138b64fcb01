//! Dense row-major tensors and the numeric kernels every layer builds on.
//!
//! All operations are pure functions over immutable inputs with a fixed
//! left-to-right summation order, so results are bitwise reproducible for a
//! given dtype and platform. Any non-finite value produced by an operation is
//! surfaced as [`Error::Numeric`] instead of propagating silently.

use crate::error::{Error, Result};
use num_traits::Float;

/// Element type of a [`Tensor`]: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float + Default + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array with contiguous row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Convenience constructor used heavily in tests.
    pub fn from_f64s(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
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

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} ({} values) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Error if any element is NaN or infinite.
    pub fn ensure_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {ctx}")))
        }
    }

    fn zip_map(&self, other: &Self, ctx: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "{ctx}: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Self {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite(ctx)?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        let out = Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * c).collect(),
        };
        out.ensure_finite("scale")?;
        Ok(out)
    }

    pub fn exp_map(&self) -> Result<Self> {
        let out = Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.exp()).collect(),
        };
        out.ensure_finite("exp")?;
        Ok(out)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "add_assign: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, c: T) {
        for v in &mut self.data {
            *v = *v * c;
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    /// Sum over all elements (left-to-right).
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    /// Sum along one axis; the axis disappears from the output shape.
    /// An empty axis extent yields zeros.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::Dim(format!(
                "axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let mid = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out_shape = self.shape.clone();
        out_shape.remove(axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] = out[obase + i] + self.data[base + i];
                }
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Mean along one axis. Errors on an empty axis.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::Dim(format!(
                "axis {} out of range for shape {:?}",
                axis, self.shape
            )));
        }
        let n = self.shape[axis];
        if n == 0 {
            return Err(Error::Dim("mean over empty axis".into()));
        }
        let summed = self.sum_axis(axis)?;
        summed.scale(T::from_f64(1.0 / n as f64))
    }

    /// `sqrt(sum of squares)` over all elements.
    pub fn l2_norm(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v * v;
        }
        acc.sqrt()
    }

    /// Index of the largest element; ties go to the first occurrence.
    pub fn argmax(&self) -> Result<usize> {
        if self.data.is_empty() {
            return Err(Error::Dim("argmax of empty tensor".into()));
        }
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate().skip(1) {
            if v > self.data[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// `C[m×n] = A[m×k] · B[k×n]` with summation over `k` in ascending order.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::Dim(format!(
            "matmul expects 2-d operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Dim(format!(
            "matmul inner extents disagree: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(&a.data, &b.data, &mut out.data, m, k, n);
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// `C += A·B` for row-major slices. The `p` (inner) loop ascends, so each
/// output element accumulates in a fixed order.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `C += A·Bᵀ` where A is m×k and B is n×k.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `C += Aᵀ·B` where A is k×m and B is k×n.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Unfold valid k×k patches of `input[C×H×W]` into a `[C·k·k × H'·W']`
/// matrix, one column per output position.
pub(crate) fn im2col<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (c_in, h, w) = dims3(input)?;
    if h < k || w < k {
        return Err(Error::Dim(format!(
            "input {}x{} smaller than {}x{} kernel",
            h, w, k, k
        )));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut cols = Tensor::zeros(&[c_in * k * k, oh * ow]);
    let src = input.data();
    let dst = cols.data_mut();
    let mut row = 0;
    for c in 0..c_in {
        for dy in 0..k {
            for dx in 0..k {
                let rbase = row * oh * ow;
                for oy in 0..oh {
                    let sbase = c * h * w + (oy + dy) * w + dx;
                    let dbase = rbase + oy * ow;
                    dst[dbase..dbase + ow].copy_from_slice(&src[sbase..sbase + ow]);
                }
                row += 1;
            }
        }
    }
    Ok(cols)
}

/// Scatter-add the column matrix produced by [`im2col`] back onto an input
/// gradient of shape `[C×H×W]`.
pub(crate) fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Result<Tensor<T>> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    if cols.shape() != [c_in * k * k, oh * ow] {
        return Err(Error::Dim(format!(
            "col2im: got {:?}, expected [{}, {}]",
            cols.shape(),
            c_in * k * k,
            oh * ow
        )));
    }
    let mut out = Tensor::zeros(&[c_in, h, w]);
    let src = cols.data();
    let dst = out.data_mut();
    let mut row = 0;
    for c in 0..c_in {
        for dy in 0..k {
            for dx in 0..k {
                let rbase = row * oh * ow;
                for oy in 0..oh {
                    let dbase = c * h * w + (oy + dy) * w + dx;
                    let sbase = rbase + oy * ow;
                    for ox in 0..ow {
                        dst[dbase + ox] = dst[dbase + ox] + src[sbase + ox];
                    }
                }
                row += 1;
            }
        }
    }
    Ok(out)
}

/// Valid-mode 2-d cross-correlation (no kernel flip) with per-channel bias.
///
/// `input` is `[C_in×H×W]`, `kernels` is `[C_out×C_in×k×k]`, `bias` is
/// `[C_out]`; output is `[C_out×(H−k+1)×(W−k+1)]`.
pub fn conv2d_valid<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c_in, h, w) = dims3(input)?;
    if kernels.ndim() != 4 {
        return Err(Error::Dim(format!(
            "kernels must be 4-d, got {:?}",
            kernels.shape()
        )));
    }
    let ks = kernels.shape();
    let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if kc != c_in || kh != kw {
        return Err(Error::Dim(format!(
            "kernels {:?} do not match input {:?}",
            kernels.shape(),
            input.shape()
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::Dim(format!(
            "bias {:?} does not match {} output channels",
            bias.shape(),
            c_out
        )));
    }
    let k = kh;
    if h < k || w < k {
        return Err(Error::Dim(format!(
            "input {}x{} smaller than {}x{} kernel",
            h, w, k, k
        )));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let cols = im2col(input, k)?;
    let mut out = Tensor::zeros(&[c_out, oh, ow]);
    {
        let dst = out.data_mut();
        for o in 0..c_out {
            dst[o * oh * ow..(o + 1) * oh * ow].fill(bias.data()[o]);
        }
        gemm_nn(kernels.data(), cols.data(), dst, c_out, c_in * k * k, oh * ow);
    }
    out.ensure_finite("conv2d_valid")?;
    Ok(out)
}

/// 2×2 max pooling with stride 2. Trailing odd rows/columns are dropped.
///
/// Returns the pooled tensor plus, for every output cell, the flat index of
/// its maximum in the input buffer (first occurrence wins on ties), which the
/// backward pass uses to route gradients.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c_in, h, w) = dims3(input)?;
    if h < 2 || w < 2 {
        return Err(Error::Dim(format!("cannot 2x2-pool a {}x{} map", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c_in, oh, ow]);
    let mut argmax = vec![0usize; c_in * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for c in 0..c_in {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = c * h * w + 2 * oy * w + 2 * ox;
                // row-major window scan keeps the first-occurrence tie rule
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &ix in &cand[1..] {
                    if src[ix] > src[best] {
                        best = ix;
                    }
                }
                let o = c * oh * ow + oy * ow + ox;
                dst[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

/// Scatter upstream gradients back through a [`maxpool2d`] call.
pub fn maxpool2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::Dim(format!(
            "upstream {:?} does not match {} pooled cells",
            upstream.shape(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (i, &src) in argmax.iter().enumerate() {
        g[src] = g[src] + upstream.data()[i];
    }
    Ok(grad)
}

pub(crate) fn dims3<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if t.ndim() != 3 {
        return Err(Error::Dim(format!("expected 3-d tensor, got {:?}", t.shape())));
    }
    Ok((t.shape[0], t.shape[1], t.shape[2]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    fn naive_conv(input: &Tensor<f64>, kernels: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, k) = (kernels.shape()[0], kernels.shape()[2]);
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.at(&[o]);
                    for c in 0..c_in {
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += input.at(&[c, oy + dy, ox + dx])
                                    * kernels.at(&[o, c, dy, dx]);
                            }
                        }
                    }
                    out.set(&[o, oy, ox], acc);
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                ((x - y) / denom).abs() <= tol,
                "{x} vs {y} beyond tolerance {tol}"
            );
        }
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::<f64>::from_f64s(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::<f64>::from_f64s(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::<f64>::from_f64s(&[1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_f64s(&[2, 1], &[3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data()[0], 11.0);
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rand_tensor(&[5, 7], &mut rng);
        let b = rand_tensor(&[7, 3], &mut rng);
        assert_close(&matmul(&a, &b).unwrap(), &naive_matmul(&a, &b), 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dim(_))));
    }

    #[test]
    fn conv_all_ones() {
        let input = Tensor::<f64>::from_f64s(&[1, 3, 3], &[1.0; 9]).unwrap();
        let kernels = Tensor::<f64>::from_f64s(&[1, 1, 3, 3], &[1.0; 9]).unwrap();
        let bias = Tensor::<f64>::from_f64s(&[1], &[0.0]).unwrap();
        let out = conv2d_valid(&input, &kernels, &bias).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 9.0);
    }

    #[test]
    fn conv_zero_kernels_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = rand_tensor(&[2, 5, 5], &mut rng);
        let kernels = Tensor::zeros(&[3, 2, 3, 3]);
        let bias = Tensor::<f64>::from_f64s(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let out = conv2d_valid(&input, &kernels, &bias).unwrap();
        for o in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    assert_eq!(out.at(&[o, y, x]), bias.at(&[o]));
                }
            }
        }
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = rand_tensor(&[2, 8, 8], &mut rng);
        let kernels = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let bias = rand_tensor(&[4], &mut rng);
        assert_close(
            &conv2d_valid(&input, &kernels, &bias).unwrap(),
            &naive_conv(&input, &kernels, &bias),
            1e-12,
        );
    }

    #[test]
    fn conv_rejects_small_input() {
        let input = Tensor::<f64>::zeros(&[1, 2, 2]);
        let kernels = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let bias = Tensor::<f64>::zeros(&[1]);
        assert!(matches!(
            conv2d_valid(&input, &kernels, &bias),
            Err(Error::Dim(_))
        ));
    }

    #[test]
    fn maxpool_hand_case() {
        let input = Tensor::<f64>::from_f64s(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, argmax) = maxpool2d(&input).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(argmax, vec![3]); // position (1,1)
    }

    #[test]
    fn maxpool_constant_input() {
        let input = Tensor::<f64>::full(&[2, 4, 4], 2.5);
        let (out, _) = maxpool2d(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn maxpool_matches_window_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = rand_tensor(&[3, 10, 10], &mut rng);
        let (out, _) = maxpool2d(&input).unwrap();
        for c in 0..3 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(input.at(&[c, 2 * oy + dy, 2 * ox + dx]));
                        }
                    }
                    assert_eq!(out.at(&[c, oy, ox]), best);
                }
            }
        }
    }

    #[test]
    fn maxpool_drops_trailing_odd_edge() {
        let input = Tensor::<f64>::zeros(&[1, 5, 7]);
        let (out, _) = maxpool2d(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2, 3]);
    }

    #[test]
    fn maxpool_backward_routes_and_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = rand_tensor(&[2, 6, 6], &mut rng);
        let (pooled, argmax) = maxpool2d(&input).unwrap();
        let upstream = rand_tensor(pooled.shape(), &mut rng);
        let grad = maxpool2d_backward(&upstream, &argmax, input.shape()).unwrap();
        // total gradient mass is conserved
        assert!((grad.sum() - upstream.sum()).abs() < 1e-12);
        // every nonzero lands on an argmax position
        let mut nonzero = 0;
        for (i, &g) in grad.data().iter().enumerate() {
            if g != 0.0 {
                assert!(argmax.contains(&i));
                nonzero += 1;
            }
        }
        assert_eq!(nonzero, argmax.len());
    }

    #[test]
    fn l2_norm_triangle() {
        let v = Tensor::<f64>::from_f64s(&[2], &[3.0, 4.0]).unwrap();
        assert_eq!(v.l2_norm(), 5.0);
    }

    #[test]
    fn sum_of_empty_axis_is_zero() {
        let t = Tensor::<f64>::zeros(&[3, 0]);
        let s = t.sum_axis(1).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_matches_sum_over_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = rand_tensor(&[4, 6], &mut rng);
        let mean = t.mean_axis(1).unwrap();
        let summed = t.sum_axis(1).unwrap();
        for i in 0..4 {
            assert!((mean.at(&[i]) - summed.at(&[i]) / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn axis_out_of_range() {
        let t = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(t.sum_axis(2), Err(Error::Dim(_))));
    }

    #[test]
    fn argmax_first_occurrence_wins() {
        let t = Tensor::<f64>::from_f64s(&[4], &[1.0, 7.0, 7.0, 2.0]).unwrap();
        assert_eq!(t.argmax().unwrap(), 1);
    }

    #[test]
    fn non_finite_surfaces_as_error() {
        let a = Tensor::<f64>::from_f64s(&[1], &[f64::MAX]).unwrap();
        let b = Tensor::<f64>::from_f64s(&[1], &[f64::MAX]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::Numeric(_))));
        let c = Tensor::<f64>::from_f64s(&[1], &[1e308]).unwrap();
        assert!(matches!(c.exp_map(), Err(Error::Numeric(_))));
    }

    #[test]
    fn im2col_col2im_round_trip_counts_patch_membership() {
        // col2im(im2col(x)) multiplies each pixel by the number of patches
        // covering it; verify on a small case against direct counting.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = rand_tensor(&[1, 4, 4], &mut rng);
        let cols = im2col(&input, 3).unwrap();
        let back = col2im(&cols, 1, 4, 4, 3).unwrap();
        for y in 0..4usize {
            for x in 0..4usize {
                let cy = (y.min(1) + 1).min(4 - y.max(1));
                let cx = (x.min(1) + 1).min(4 - x.max(1));
                let count = (cy * cx) as f64;
                assert!((back.at(&[0, y, x]) - count * input.at(&[0, y, x])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_given_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = rand_tensor(&[6, 6], &mut rng);
        let b = rand_tensor(&[6, 6], &mut rng);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1.data(), c2.data());
    }
}
