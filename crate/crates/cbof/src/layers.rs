//! Differentiable layers: convolution, max pooling, dense, ELU, softmax,
//! dropout — plus the two-conv feature-extraction block and the conversion of
//! feature maps into per-position feature vectors.
//!
//! Every layer caches what its backward pass needs during forward; calling
//! backward without a matching forward is a state error. Backward consumes
//! the cache and accumulates parameter gradients into each [`Param`]'s grad
//! buffer (the optimizer owns zeroing them).

use crate::error::{Error, Result};
use crate::optim::{glorot_uniform, Param, ParamGroup};
use crate::tensor::{
    col2im, dims3, gemm_nn, gemm_nt, gemm_tn, im2col, maxpool2d, maxpool2d_backward, Scalar,
    Tensor,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// ELU with α = 1.
pub fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

fn elu_prime<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

/// Numerically stable softmax (max-subtraction). Output is strictly positive
/// and sums to 1.
pub fn softmax<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    if z.is_empty() {
        return Err(Error::Dim("softmax of empty vector".into()));
    }
    let max = z.data().iter().cloned().fold(T::neg_infinity(), T::max);
    let mut out = z.clone();
    let mut sum = T::zero();
    for v in out.data_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in out.data_mut() {
        *v = *v * inv;
    }
    out.ensure_finite("softmax")?;
    Ok(out)
}

/// Output nonlinearity of a [`Dense`] layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Elu,
    /// Softmax outputs pair with the fused cross-entropy backward: drive the
    /// layer with [`Dense::backward_from_preact_grad`] and `y − t`.
    Softmax,
}

struct DenseCache<T> {
    input: Tensor<T>,
    preact: Tensor<T>,
}

/// Fully connected layer `y = act(W·s + b)`.
pub struct Dense<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub activation: Activation,
    cache: Option<DenseCache<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(weight: Param<T>, bias: Param<T>, activation: Activation) -> Result<Self> {
        if weight.value.ndim() != 2 || bias.value.shape() != [weight.value.shape()[0]] {
            return Err(Error::Dim(format!(
                "dense: weight {:?} incompatible with bias {:?}",
                weight.value.shape(),
                bias.value.shape()
            )));
        }
        Ok(Self {
            weight,
            bias,
            activation,
            cache: None,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = (self.output_dim(), self.input_dim());
        if s.shape() != [n] {
            return Err(Error::Dim(format!(
                "dense expects input [{}], got {:?}",
                n,
                s.shape()
            )));
        }
        let mut z = self.bias.value.clone();
        gemm_nn(self.weight.value.data(), s.data(), z.data_mut(), m, n, 1);
        z.ensure_finite("dense pre-activation")?;
        let y = match self.activation {
            Activation::Linear => z.clone(),
            Activation::Elu => {
                let mut y = z.clone();
                for v in y.data_mut() {
                    *v = elu(*v);
                }
                y
            }
            Activation::Softmax => softmax(&z)?,
        };
        self.cache = Some(DenseCache {
            input: s.clone(),
            preact: z,
        });
        Ok(y)
    }

    /// Backward from `dL/dy` for linear and ELU activations.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        if self.activation == Activation::Softmax {
            return Err(Error::State(
                "softmax dense must be driven through backward_from_preact_grad (fused with the loss)"
                    .into(),
            ));
        }
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("dense backward before forward".into()))?;
        let dz = match self.activation {
            Activation::Linear => upstream.clone(),
            Activation::Elu => {
                let mut dz = upstream.clone();
                for (g, &z) in dz.data_mut().iter_mut().zip(cache.preact.data()) {
                    *g = *g * elu_prime(z);
                }
                dz
            }
            Activation::Softmax => unreachable!(),
        };
        self.linear_backward(&cache, &dz)
    }

    /// Backward from `dL/dz` (pre-activation gradient), e.g. the fused
    /// softmax + cross-entropy gradient `y − t`.
    pub fn backward_from_preact_grad(&mut self, dz: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("dense backward before forward".into()))?;
        self.linear_backward(&cache, dz)
    }

    fn linear_backward(&mut self, cache: &DenseCache<T>, dz: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = (self.output_dim(), self.input_dim());
        if dz.shape() != [m] {
            return Err(Error::Dim(format!(
                "dense backward expects [{}], got {:?}",
                m,
                dz.shape()
            )));
        }
        // grad_W += dz ⊗ input, grad_b += dz, grad_s = Wᵀ·dz
        gemm_nt(
            dz.data(),
            cache.input.data(),
            self.weight.grad.data_mut(),
            m,
            1,
            n,
        );
        self.bias.grad.add_assign(dz)?;
        let mut ds = Tensor::zeros(&[n]);
        gemm_tn(
            self.weight.value.data(),
            dz.data(),
            ds.data_mut(),
            n,
            m,
            1,
        );
        Ok(ds)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

struct ConvCache<T> {
    input_shape: Vec<usize>,
    cols: Tensor<T>,
}

/// Valid-mode convolution layer over `[C×H×W]` maps.
pub struct Conv2d<T> {
    pub kernels: Param<T>,
    pub bias: Param<T>,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Glorot-uniform kernels, zero bias.
    pub fn init(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * k * k;
        let fan_out = out_channels * k * k;
        let kernels = glorot_uniform(&[out_channels, in_channels, k, k], fan_in, fan_out, rng);
        Self {
            kernels: Param::new(format!("{name}.kernels"), ParamGroup::Conv, kernels),
            bias: Param::new(
                format!("{name}.bias"),
                ParamGroup::Conv,
                Tensor::zeros(&[out_channels]),
            ),
            cache: None,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.value.shape()[0]
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (c_in, h, w) = dims3(input)?;
        let ks = self.kernels.value.shape();
        if ks[1] != c_in {
            return Err(Error::Dim(format!(
                "conv expects {} input channels, got {}",
                ks[1], c_in
            )));
        }
        let k = self.kernel_size();
        if h < k || w < k {
            return Err(Error::Dim(format!(
                "input {}x{} smaller than {}x{} kernel",
                h, w, k, k
            )));
        }
        let (c_out, oh, ow) = (ks[0], h - k + 1, w - k + 1);
        let cols = im2col(input, k)?;
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        {
            let dst = out.data_mut();
            for o in 0..c_out {
                dst[o * oh * ow..(o + 1) * oh * ow].fill(self.bias.value.data()[o]);
            }
            gemm_nn(
                self.kernels.value.data(),
                cols.data(),
                dst,
                c_out,
                c_in * k * k,
                oh * ow,
            );
        }
        out.ensure_finite("conv forward")?;
        self.cache = Some(ConvCache {
            input_shape: vec![c_in, h, w],
            cols,
        });
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv backward before forward".into()))?;
        let (c_in, h, w) = (
            cache.input_shape[0],
            cache.input_shape[1],
            cache.input_shape[2],
        );
        let k = self.kernel_size();
        let c_out = self.out_channels();
        let (oh, ow) = (h - k + 1, w - k + 1);
        if upstream.shape() != [c_out, oh, ow] {
            return Err(Error::Dim(format!(
                "conv backward expects {:?}, got {:?}",
                [c_out, oh, ow],
                upstream.shape()
            )));
        }
        let positions = oh * ow;
        let patch = c_in * k * k;
        // grad_bias[o] += Σ upstream[o,:,:]
        for o in 0..c_out {
            let mut acc = T::zero();
            for &v in &upstream.data()[o * positions..(o + 1) * positions] {
                acc = acc + v;
            }
            self.bias.grad.data_mut()[o] = self.bias.grad.data()[o] + acc;
        }
        // grad_kernels += upstream · colsᵀ
        gemm_nt(
            upstream.data(),
            cache.cols.data(),
            self.kernels.grad.data_mut(),
            c_out,
            positions,
            patch,
        );
        // grad_input = col2im(kernelsᵀ · upstream)
        let mut dcols = Tensor::zeros(&[patch, positions]);
        gemm_tn(
            self.kernels.value.data(),
            upstream.data(),
            dcols.data_mut(),
            patch,
            c_out,
            positions,
        );
        col2im(&dcols, c_in, h, w, k)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.kernels, &mut self.bias]
    }
}

struct PoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// 2×2/stride-2 max pooling layer.
#[derive(Default)]
pub struct MaxPool2 {
    cache: Option<PoolCache>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (out, argmax) = maxpool2d(input)?;
        self.cache = Some(PoolCache {
            input_shape: input.shape().to_vec(),
            argmax,
        });
        Ok(out)
    }

    pub fn backward<T: Scalar>(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("pool backward before forward".into()))?;
        maxpool2d_backward(upstream, &cache.argmax, &cache.input_shape)
    }
}

/// Inverted dropout: train mode zeroes elements with probability `p` and
/// scales survivors by `1/(1−p)`; eval mode is the identity.
pub struct Dropout<T> {
    p: f64,
    rng: ChaCha8Rng,
    // Some(mask) after a train forward, Some(None)… flattened to an enum-free
    // encoding: outer Option = "forward happened", inner = scaled mask if any.
    cache: Option<Option<Tensor<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout rate must satisfy 0 <= p < 1, got {p}"
            )));
        }
        Ok(Self {
            p,
            rng,
            cache: None,
        })
    }

    pub fn rate(&self) -> f64 {
        self.p
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if !train || self.p == 0.0 {
            self.cache = Some(None);
            return Ok(x.clone());
        }
        let keep = T::from_f64(1.0 / (1.0 - self.p));
        let mut mask = Tensor::zeros(x.shape());
        for v in mask.data_mut() {
            if self.rng.random::<f64>() >= self.p {
                *v = keep;
            }
        }
        let out = x.mul(&mask)?;
        self.cache = Some(Some(mask));
        Ok(out)
    }

    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("dropout backward before forward".into()))?;
        match cache {
            None => Ok(upstream.clone()),
            Some(mask) => upstream.mul(&mask),
        }
    }
}

/// Feature vectors lifted from a `[D×h×w]` stack of feature maps: one
/// D-dimensional vector per spatial position, laid out as an `[h·w × D]`
/// matrix in row-major grid order.
pub struct FeatureGrid<T> {
    pub vectors: Tensor<T>,
    pub rows: usize,
    pub cols: usize,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Grid position of the i-th vector.
    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.cols, i % self.cols)
    }

    pub fn vector(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.vectors.data()[i * d..(i + 1) * d]
    }
}

/// Transpose feature maps into per-position feature vectors.
pub fn extract_feature_vectors<T: Scalar>(maps: &Tensor<T>) -> Result<FeatureGrid<T>> {
    let (d, h, w) = dims3(maps)?;
    let mut vectors = Tensor::zeros(&[h * w, d]);
    let src = maps.data();
    let dst = vectors.data_mut();
    for c in 0..d {
        for r in 0..h {
            for col in 0..w {
                dst[(r * w + col) * d + c] = src[c * h * w + r * w + col];
            }
        }
    }
    Ok(FeatureGrid {
        vectors,
        rows: h,
        cols: w,
    })
}

/// Scatter per-vector gradients back onto `[D×h×w]` feature maps.
pub fn feature_grid_backward<T: Scalar>(
    grad_vectors: &Tensor<T>,
    rows: usize,
    cols: usize,
) -> Result<Tensor<T>> {
    if grad_vectors.ndim() != 2 || grad_vectors.shape()[0] != rows * cols {
        return Err(Error::Dim(format!(
            "expected [{}, D] gradient, got {:?}",
            rows * cols,
            grad_vectors.shape()
        )));
    }
    let d = grad_vectors.shape()[1];
    let mut maps = Tensor::zeros(&[d, rows, cols]);
    let src = grad_vectors.data();
    let dst = maps.data_mut();
    for c in 0..d {
        for r in 0..rows {
            for col in 0..cols {
                dst[c * rows * cols + r * cols + col] = src[(r * cols + col) * d + c];
            }
        }
    }
    Ok(maps)
}

/// Feature-extraction block: conv → 2×2 max pool → conv, all valid-mode.
///
/// With the default 5×5 kernels a 28×28 input yields 64 maps of 8×8
/// (28 → 24 → 12 → 8).
pub struct FeatureBlock<T> {
    pub conv1: Conv2d<T>,
    pub pool: MaxPool2,
    pub conv2: Conv2d<T>,
}

impl<T: Scalar> FeatureBlock<T> {
    pub const DEFAULT_C1: usize = 32;
    pub const DEFAULT_C2: usize = 64;
    pub const DEFAULT_K: usize = 5;

    pub fn new(in_channels: usize, rng: &mut impl Rng) -> Self {
        Self::with_dims(
            in_channels,
            Self::DEFAULT_C1,
            Self::DEFAULT_C2,
            Self::DEFAULT_K,
            rng,
        )
    }

    /// Reduced-size variant used by gradient checks and unit tests.
    pub fn with_dims(
        in_channels: usize,
        c1: usize,
        c2: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv1: Conv2d::init("feature.conv1", in_channels, c1, k, rng),
            pool: MaxPool2::new(),
            conv2: Conv2d::init("feature.conv2", c1, c2, k, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    /// Spatial extent of the output maps for a square input of side `h`,
    /// or None when the input is too small: (h−k+1)/2 − k + 1 per side.
    pub fn output_side(&self, h: usize) -> Option<usize> {
        let after1 = h.checked_sub(self.conv1.kernel_size() - 1)?;
        let pooled = after1 / 2;
        let out = pooled.checked_sub(self.conv2.kernel_size() - 1)?;
        (out > 0).then_some(out)
    }

    pub fn forward(&mut self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let a = self.conv1.forward(image)?;
        let p = self.pool.forward(&a)?;
        self.conv2.forward(&p)
    }

    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let dp = self.conv2.backward(upstream)?;
        let da = self.pool.backward(&dp)?;
        self.conv1.backward(&da)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.conv1.params_mut();
        out.extend(self.conv2.params_mut());
        out
    }
}
