//! Parameter updates (Adam, SGD) with per-group learning rates, the training
//! losses, and weight initializers.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Width floor for RBF scaling factors; enforced after every optimizer step.
pub const SIGMA_MIN: f64 = 1e-4;

/// Learning-rate group a trainable parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Fully connected classifier weights and biases.
    Mlp,
    /// RBF codebook centers.
    Centers,
    /// RBF width scaling factors (clamped to [`SIGMA_MIN`] after each step).
    Sigma,
    /// Convolutional kernels and biases.
    Conv,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Mlp,
        ParamGroup::Centers,
        ParamGroup::Sigma,
        ParamGroup::Conv,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Mlp => "MLP",
            ParamGroup::Centers => "V",
            ParamGroup::Sigma => "sigma",
            ParamGroup::Conv => "conv",
        }
    }
}

/// One trainable tensor: its value, gradient buffer, and Adam moments.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    moment1: Tensor<T>,
    moment2: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let moment1 = grad.clone();
        let moment2 = grad.clone();
        Self {
            name: name.into(),
            group,
            value,
            grad,
            moment1,
            moment2,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Per-group learning rates (η_MLP, η_V, η_σ, η_conv).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupRates {
    pub mlp: f64,
    pub centers: f64,
    pub sigma: f64,
    pub conv: f64,
}

impl GroupRates {
    /// Single rate for every group — the from-scratch training default.
    pub fn uniform(eta: f64) -> Self {
        Self {
            mlp: eta,
            centers: eta,
            sigma: eta,
            conv: eta,
        }
    }

    /// Preset for finetuning a pretrained feature extractor.
    pub fn finetune() -> Self {
        Self {
            mlp: 1e-4,
            centers: 1e-2,
            sigma: 1e-4,
            conv: 1e-5,
        }
    }

    pub fn rate(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Mlp => self.mlp,
            ParamGroup::Centers => self.centers,
            ParamGroup::Sigma => self.sigma,
            ParamGroup::Conv => self.conv,
        }
    }
}

impl Default for GroupRates {
    fn default() -> Self {
        Self::uniform(1e-4)
    }
}

/// Adam with bias correction and per-group learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub rates: GroupRates,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    t: u64,
}

impl Adam {
    pub fn new(rates: GroupRates) -> Self {
        Self {
            rates,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. The timestep increments exactly once
    /// per call. A NaN gradient aborts the whole step before any parameter
    /// has been touched.
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        for p in params.iter() {
            p.grad
                .ensure_finite(&format!("gradient of {}", p.name))
                .map_err(|_| Error::Numeric(format!("NaN gradient in {}; step aborted", p.name)))?;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params.iter_mut() {
            let eta = T::from_f64(self.rates.rate(p.group));
            let b1 = T::from_f64(self.beta1);
            let b2 = T::from_f64(self.beta2);
            let one = T::one();
            let eps = T::from_f64(self.epsilon);
            let c1 = T::from_f64(1.0 / bc1);
            let c2 = T::from_f64(1.0 / bc2);
            let n = p.value.len();
            for i in 0..n {
                let g = p.grad.data()[i];
                let m = b1 * p.moment1.data()[i] + (one - b1) * g;
                let v = b2 * p.moment2.data()[i] + (one - b2) * g * g;
                p.moment1.data_mut()[i] = m;
                p.moment2.data_mut()[i] = v;
                let m_hat = m * c1;
                let v_hat = v * c2;
                let x = p.value.data()[i];
                p.value.data_mut()[i] = x - eta * m_hat / (v_hat.sqrt() + eps);
            }
            if p.group == ParamGroup::Sigma {
                clamp_sigma(&mut p.value);
            }
        }
        Ok(())
    }
}

/// Clamp every entry up to [`SIGMA_MIN`].
pub fn clamp_sigma<T: Scalar>(sigma: &mut Tensor<T>) {
    let floor = T::from_f64(SIGMA_MIN);
    for v in sigma.data_mut() {
        if *v < floor {
            *v = floor;
        }
    }
}

/// Categorical cross entropy of a probability vector against a class label.
///
/// Returns the per-sample loss and the fused softmax gradient `y − t` with
/// respect to the output-layer pre-activations.
pub fn cross_entropy_loss<T: Scalar>(y: &Tensor<T>, label: usize) -> Result<(f64, Tensor<T>)> {
    if y.ndim() != 1 || label >= y.len() {
        return Err(Error::Dim(format!(
            "cross entropy: output {:?} vs label {}",
            y.shape(),
            label
        )));
    }
    let clamp = T::from_f64(1e-12);
    let p = y.data()[label].max(clamp);
    let loss = -p.to_f64().ln();
    let mut dz = y.clone();
    dz.data_mut()[label] = dz.data()[label] - T::one();
    Ok((loss, dz))
}

/// Squared error of one scalar prediction; gradient is `2(y − target)`.
///
/// Batch averaging is the caller's concern: sum the losses and divide the
/// accumulated gradients by the batch size.
pub fn mse_loss<T: Scalar>(y: T, target: T) -> (f64, T) {
    let d = y - target;
    ((d * d).to_f64(), d + d)
}

/// Random orthogonal matrix scaled by `gain`.
///
/// For `m ≤ n` the rows are orthonormal (`W·Wᵀ = gain²·I`); for `m > n` the
/// columns are. Sampling and factorization run in f64 regardless of `T`.
pub fn orthogonal_init<T: Scalar>(m: usize, n: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let (rows, cols) = (m.max(n), m.min(n));
    // Gaussian matrix, then thin QR via twice-run modified Gram-Schmidt.
    let mut a = vec![0.0f64; rows * cols];
    for v in a.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    for j in 0..cols {
        for _pass in 0..2 {
            for p in 0..j {
                let mut dot = 0.0;
                for r in 0..rows {
                    dot += a[r * cols + p] * a[r * cols + j];
                }
                for r in 0..rows {
                    a[r * cols + j] -= dot * a[r * cols + p];
                }
            }
        }
        let mut norm = 0.0;
        for r in 0..rows {
            norm += a[r * cols + j] * a[r * cols + j];
        }
        let norm = norm.sqrt();
        // norm > 0 holds a.s. for Gaussian input; the guard keeps this total
        let inv = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        for r in 0..rows {
            a[r * cols + j] *= inv;
        }
    }
    let mut out = Tensor::zeros(&[m, n]);
    let dst = out.data_mut();
    if m <= n {
        // q is n×m with orthonormal columns; emit its transpose
        for i in 0..m {
            for j in 0..n {
                dst[i * n + j] = T::from_f64(gain * a[j * cols + i]);
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                dst[i * n + j] = T::from_f64(gain * a[i * cols + j]);
            }
        }
    }
    out
}

/// Uniform init in ±sqrt(6/(fan_in+fan_out)), the from-scratch default for
/// convolution kernels.
pub fn glorot_uniform<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}
