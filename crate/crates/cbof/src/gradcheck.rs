//! Central finite-difference verification of every backward pass, run at f64
//! on tiny randomized instances. Used by the unit suite and the CLI's
//! gradient-check command.
//!
//! All suites express their trainable state as one flat f64 vector and a
//! pure loss function over it, so the differencing loop never fights the
//! borrow checker and each component reads as: flatten, differentiate
//! analytically once, difference numerically, compare.

use crate::bof::{BofLayer, Codebook, SpatialLevel};
use crate::error::Result;
use crate::layers::{
    extract_feature_vectors, feature_grid_backward, Activation, Dense, Dropout, FeatureBlock,
};
use crate::optim::{cross_entropy_loss, mse_loss, Param, ParamGroup};
use crate::rng::{SeedStreams, Stream};
use crate::tensor::{maxpool2d, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Every component must stay below this maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub component: String,
    pub max_rel_err: f64,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

/// Central differences of `loss` at `params`, one entry per parameter.
pub fn fd_grad(params: &[f64], loss: impl Fn(&[f64]) -> f64, step: f64) -> Vec<f64> {
    let mut v = params.to_vec();
    (0..v.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + step;
            let plus = loss(&v);
            v[i] = orig - step;
            let minus = loss(&v);
            v[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Worst relative discrepancy, with an absolute floor so near-zero gradient
/// pairs compare by absolute difference instead of noise ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn report(component: &str, analytic: &[f64], params: &[f64], loss: impl Fn(&[f64]) -> f64) -> ComponentReport {
    let numeric = fd_grad(params, loss, STEP);
    ComponentReport {
        component: component.to_string(),
        max_rel_err: max_rel_err(analytic, &numeric),
    }
}

fn dense_from(w: &[f64], b: &[f64], m: usize, n: usize, act: Activation) -> Dense<f64> {
    Dense::new(
        Param::new("w", ParamGroup::Mlp, Tensor::new(&[m, n], w.to_vec()).expect("shape")),
        Param::new("b", ParamGroup::Mlp, Tensor::new(&[m], b.to_vec()).expect("shape")),
        act,
    )
    .expect("compatible shapes")
}

/// Convolution: kernels, bias, and input against a linear probe loss.
fn conv_suite(rng: &mut ChaCha8Rng) -> ComponentReport {
    let (c_in, c_out, k, h) = (2usize, 3usize, 3usize, 6usize);
    let o = h - k + 1;
    let up = Tensor::new(&[c_out, o, o], rand_vec(c_out * o * o, rng)).expect("shape");
    let nk = c_out * c_in * k * k;
    let nx = c_in * h * h;
    let mut params = rand_vec(nk + c_out + nx, rng);
    // scale the input segment into a typical activation range
    for v in &mut params[nk + c_out..] {
        *v *= 2.0;
    }
    let split = |v: &[f64]| -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            Tensor::new(&[c_out, c_in, k, k], v[..nk].to_vec()).expect("shape"),
            Tensor::new(&[c_out], v[nk..nk + c_out].to_vec()).expect("shape"),
            Tensor::new(&[c_in, h, h], v[nk + c_out..].to_vec()).expect("shape"),
        )
    };
    let loss = |v: &[f64]| -> f64 {
        let (kern, bias, x) = split(v);
        let out = crate::tensor::conv2d_valid(&x, &kern, &bias).expect("valid conv");
        out.data().iter().zip(up.data()).map(|(a, u)| a * u).sum()
    };
    let (kern, bias, x) = split(&params);
    let mut conv = crate::layers::Conv2d::init("c", c_in, c_out, k, rng);
    conv.kernels.value = kern;
    conv.bias.value = bias;
    conv.forward(&x).expect("forward");
    let dx = conv.backward(&up).expect("backward");
    let mut analytic = conv.kernels.grad.data().to_vec();
    analytic.extend_from_slice(conv.bias.grad.data());
    analytic.extend_from_slice(dx.data());
    report("conv", &analytic, &params, loss)
}

/// Dense layer (weights, bias, input) under a linear probe loss.
fn dense_suite(rng: &mut ChaCha8Rng, act: Activation, name: &str) -> ComponentReport {
    let (m, n) = (4usize, 5usize);
    let up = Tensor::new(&[m], rand_vec(m, rng)).expect("shape");
    let params = rand_vec(m * n + m + n, rng);
    let loss = |v: &[f64]| -> f64 {
        let mut dense = dense_from(&v[..m * n], &v[m * n..m * n + m], m, n, act);
        let x = Tensor::new(&[n], v[m * n + m..].to_vec()).expect("shape");
        let y = dense.forward(&x).expect("forward");
        y.data().iter().zip(up.data()).map(|(a, u)| a * u).sum()
    };
    let mut dense = dense_from(&params[..m * n], &params[m * n..m * n + m], m, n, act);
    let x = Tensor::new(&[n], params[m * n + m..].to_vec()).expect("shape");
    dense.forward(&x).expect("forward");
    let dx = dense.backward(&up).expect("backward");
    let mut analytic = dense.weight.grad.data().to_vec();
    analytic.extend_from_slice(dense.bias.grad.data());
    analytic.extend_from_slice(dx.data());
    report(name, &analytic, &params, loss)
}

/// Softmax output layer with the fused cross-entropy gradient.
fn softmax_xent_suite(rng: &mut ChaCha8Rng) -> ComponentReport {
    let (m, n, label) = (5usize, 4usize, 2usize);
    let params = rand_vec(m * n + m + n, rng);
    let loss = |v: &[f64]| -> f64 {
        let mut dense = dense_from(&v[..m * n], &v[m * n..m * n + m], m, n, Activation::Softmax);
        let x = Tensor::new(&[n], v[m * n + m..].to_vec()).expect("shape");
        let y = dense.forward(&x).expect("forward");
        cross_entropy_loss(&y, label).expect("loss").0
    };
    let mut dense = dense_from(
        &params[..m * n],
        &params[m * n..m * n + m],
        m,
        n,
        Activation::Softmax,
    );
    let x = Tensor::new(&[n], params[m * n + m..].to_vec()).expect("shape");
    let y = dense.forward(&x).expect("forward");
    let (_, dz) = cross_entropy_loss(&y, label).expect("loss");
    let dx = dense.backward_from_preact_grad(&dz).expect("backward");
    let mut analytic = dense.weight.grad.data().to_vec();
    analytic.extend_from_slice(dense.bias.grad.data());
    analytic.extend_from_slice(dx.data());
    report("softmax_xent", &analytic, &params, loss)
}

/// Summed squared error through a linear output layer.
fn mse_suite(rng: &mut ChaCha8Rng) -> ComponentReport {
    let (m, n) = (3usize, 4usize);
    let target = rand_vec(m, rng);
    let params = rand_vec(m * n + m + n, rng);
    let loss = |v: &[f64]| -> f64 {
        let mut dense = dense_from(&v[..m * n], &v[m * n..m * n + m], m, n, Activation::Linear);
        let x = Tensor::new(&[n], v[m * n + m..].to_vec()).expect("shape");
        let y = dense.forward(&x).expect("forward");
        y.data()
            .iter()
            .zip(&target)
            .map(|(&yi, &ti)| mse_loss(yi, ti).0)
            .sum()
    };
    let mut dense = dense_from(
        &params[..m * n],
        &params[m * n..m * n + m],
        m,
        n,
        Activation::Linear,
    );
    let x = Tensor::new(&[n], params[m * n + m..].to_vec()).expect("shape");
    let y = dense.forward(&x).expect("forward");
    let dy_data: Vec<f64> = y
        .data()
        .iter()
        .zip(&target)
        .map(|(&yi, &ti)| mse_loss(yi, ti).1)
        .collect();
    let dy = Tensor::new(&[m], dy_data).expect("shape");
    let dx = dense.backward(&dy).expect("backward");
    let mut analytic = dense.weight.grad.data().to_vec();
    analytic.extend_from_slice(dense.bias.grad.data());
    analytic.extend_from_slice(dx.data());
    report("mse", &analytic, &params, loss)
}

/// Gradient flows unchanged through dropout when it is inactive (eval mode
/// and rate 0); checked through a small ELU layer.
fn dropout_off_suite(rng: &mut ChaCha8Rng) -> ComponentReport {
    let (m, n) = (3usize, 4usize);
    let up = Tensor::new(&[m], rand_vec(m, rng)).expect("shape");
    let w = rand_vec(m * n, rng);
    let b = rand_vec(m, rng);
    let params = rand_vec(n, rng);
    let mut worst: f64 = 0.0;
    for train in [false, true] {
        // train=true exercises the rate-0 path, train=false the eval path
        let rate = if train { 0.0 } else { 0.35 };
        let loss = |v: &[f64]| -> f64 {
            let mut drop =
                Dropout::new(rate, SeedStreams::new(1).stream(Stream::Dropout)).expect("rate");
            let mut dense = dense_from(&w, &b, m, n, Activation::Elu);
            let x = Tensor::new(&[n], v.to_vec()).expect("shape");
            let gated = drop.forward(&x, train).expect("forward");
            let y = dense.forward(&gated).expect("forward");
            y.data().iter().zip(up.data()).map(|(a, u)| a * u).sum()
        };
        let mut drop =
            Dropout::new(rate, SeedStreams::new(1).stream(Stream::Dropout)).expect("rate");
        let mut dense = dense_from(&w, &b, m, n, Activation::Elu);
        let x = Tensor::new(&[n], params.clone()).expect("shape");
        let gated = drop.forward(&x, train).expect("forward");
        dense.forward(&gated).expect("forward");
        let dgated = dense.backward(&up).expect("backward");
        let dx = drop.backward(&dgated).expect("backward");
        let numeric = fd_grad(&params, loss, STEP);
        worst = worst.max(max_rel_err(dx.data(), &numeric));
    }
    ComponentReport {
        component: "dropout_off_path".to_string(),
        max_rel_err: worst,
    }
}

/// Max pooling input gradient.
fn maxpool_suite(rng: &mut ChaCha8Rng) -> ComponentReport {
    let (c, h) = (2usize, 4usize);
    let up_len = c * (h / 2) * (h / 2);
    let up = Tensor::new(&[c, h / 2, h / 2], rand_vec(up_len, rng)).expect("shape");
    let params = rand_vec(c * h * h, rng);
    let loss = |v: &[f64]| -> f64 {
        let x = Tensor::new(&[c, h, h], v.to_vec()).expect("shape");
        let (out, _) = maxpool2d(&x).expect("pool");
        out.data().iter().zip(up.data()).map(|(a, u)| a * u).sum()
    };
    let x = Tensor::new(&[c, h, h], params.clone()).expect("shape");
    let mut pool = crate::layers::MaxPool2::new();
    pool.forward(&x).expect("forward");
    let dx = pool.backward(&up).expect("backward");
    report("maxpool", dx.data(), &params, loss)
}

/// Quantization layer at spatial level 1: inputs, centers, and widths each
/// get their own report.
fn bof_suites(rng: &mut ChaCha8Rng) -> Vec<ComponentReport> {
    let (n_k, d, rows, cols) = (3usize, 2usize, 2usize, 3usize);
    let n_s = SpatialLevel::One.regions();
    let n = rows * cols;
    let nc = n_s * n_k * d;
    let ns_sig = n_s * n_k;
    let mut params = rand_vec(nc + ns_sig + n * d, rng);
    for s in &mut params[nc..nc + ns_sig] {
        *s = 0.2 + s.abs(); // widths safely above the minimum
    }
    let build = |v: &[f64]| -> BofLayer<f64> {
        let books = (0..n_s)
            .map(|r| {
                Codebook::new(
                    "cb",
                    Tensor::new(&[n_k, d], v[r * n_k * d..(r + 1) * n_k * d].to_vec())
                        .expect("shape"),
                    Tensor::new(&[n_k], v[nc + r * n_k..nc + (r + 1) * n_k].to_vec())
                        .expect("shape"),
                )
                .expect("valid codebook")
            })
            .collect();
        BofLayer::new(SpatialLevel::One, books).expect("layer")
    };
    let up = Tensor::new(&[n_s * n_k], rand_vec(n_s * n_k, rng)).expect("shape");
    let loss = |v: &[f64]| -> f64 {
        let mut layer = build(v);
        let grid = crate::layers::FeatureGrid {
            vectors: Tensor::new(&[n, d], v[nc + ns_sig..].to_vec()).expect("shape"),
            rows,
            cols,
        };
        let hist = layer.forward(&grid).expect("forward");
        hist.data().iter().zip(up.data()).map(|(a, u)| a * u).sum()
    };
    let mut layer = build(&params);
    let grid = crate::layers::FeatureGrid {
        vectors: Tensor::new(&[n, d], params[nc + ns_sig..].to_vec()).expect("shape"),
        rows,
        cols,
    };
    layer.forward(&grid).expect("forward");
    let dvec = layer.backward(&up).expect("backward");
    let mut analytic = Vec::with_capacity(params.len());
    for book in &layer.codebooks {
        analytic.extend_from_slice(book.centers.grad.data());
    }
    for book in &layer.codebooks {
        analytic.extend_from_slice(book.sigmas.grad.data());
    }
    analytic.extend_from_slice(dvec.data());
    let numeric = fd_grad(&params, loss, STEP);
    let seg = |name: &str, range: std::ops::Range<usize>| ComponentReport {
        component: name.to_string(),
        max_rel_err: max_rel_err(&analytic[range.clone()], &numeric[range]),
    };
    vec![
        seg("bof_centers", 0..nc),
        seg("bof_sigma", nc..nc + ns_sig),
        seg("bof_input", nc + ns_sig..params.len()),
    ]
}

/// Reduced end-to-end network: conv block → quantization → MLP →
/// cross-entropy, reported per parameter group.
struct TinyNet {
    feature: FeatureBlock<f64>,
    bof: BofLayer<f64>,
    hidden: Dense<f64>,
    output: Dense<f64>,
}

impl TinyNet {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let feature = FeatureBlock::with_dims(1, 2, 3, 3, rng);
        let (n_k, d, classes, n_h) = (2usize, 3usize, 3usize, 5usize);
        let books = (0..4)
            .map(|r| {
                let centers = Tensor::new(&[n_k, d], rand_vec(n_k * d, rng)).expect("shape");
                let sigmas =
                    Tensor::new(&[n_k], (0..n_k).map(|_| rng.random_range(0.3..1.0)).collect())
                        .expect("shape");
                Codebook::new(&format!("bof.region{r}"), centers, sigmas).expect("codebook")
            })
            .collect();
        let bof = BofLayer::new(SpatialLevel::One, books).expect("layer");
        let head_len = 4 * n_k;
        let hidden = dense_from(
            &rand_vec(n_h * head_len, rng),
            &rand_vec(n_h, rng),
            n_h,
            head_len,
            Activation::Elu,
        );
        let output = dense_from(
            &rand_vec(classes * n_h, rng),
            &rand_vec(classes, rng),
            classes,
            n_h,
            Activation::Softmax,
        );
        Self {
            feature,
            bof,
            hidden,
            output,
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        let mut out = self.feature.params_mut();
        out.extend(self.bof.params_mut());
        out.extend(self.hidden.params_mut());
        out.extend(self.output.params_mut());
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&flat[pos..pos + n]) {
                *dst = src;
            }
            pos += n;
        }
        assert_eq!(pos, flat.len());
    }

    fn flat_values(&mut self) -> Vec<f64> {
        self.params_mut()
            .iter()
            .flat_map(|p| p.value.data().to_vec())
            .collect()
    }

    fn group_segments(&mut self) -> Vec<(ParamGroup, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut pos = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            out.push((p.group, pos..pos + n));
            pos += n;
        }
        out
    }

    fn loss(&mut self, image: &Tensor<f64>, label: usize) -> f64 {
        let maps = self.feature.forward(image).expect("feature");
        let grid = extract_feature_vectors(&maps).expect("grid");
        let hist = self.bof.forward(&grid).expect("bof");
        let h = self.hidden.forward(&hist).expect("hidden");
        let y = self.output.forward(&h).expect("output");
        cross_entropy_loss(&y, label).expect("loss").0
    }

    fn loss_and_backward(&mut self, image: &Tensor<f64>, label: usize) -> f64 {
        let maps = self.feature.forward(image).expect("feature");
        let grid = extract_feature_vectors(&maps).expect("grid");
        let (rows, cols) = (grid.rows, grid.cols);
        let hist = self.bof.forward(&grid).expect("bof");
        let h = self.hidden.forward(&hist).expect("hidden");
        let y = self.output.forward(&h).expect("output");
        let (loss, dz) = cross_entropy_loss(&y, label).expect("loss");
        let dh = self.output.backward_from_preact_grad(&dz).expect("output back");
        let dhist = self.hidden.backward(&dh).expect("hidden back");
        let dvec = self.bof.backward(&dhist).expect("bof back");
        let dmaps = feature_grid_backward(&dvec, rows, cols).expect("scatter");
        self.feature.backward(&dmaps).expect("feature back");
        loss
    }
}

fn network_suites(rng: &mut ChaCha8Rng) -> Vec<ComponentReport> {
    let image = Tensor::new(&[1, 12, 12], rand_vec(144, rng)).expect("shape");
    let label = 1usize;
    let mut net = TinyNet::new(rng);
    let params = net.flat_values();
    let segments = net.group_segments();
    net.loss_and_backward(&image, label);
    let analytic: Vec<f64> = net
        .params_mut()
        .iter()
        .flat_map(|p| p.grad.data().to_vec())
        .collect();
    let loss = |v: &[f64]| -> f64 {
        // the loss must be a pure function of the flat vector, so each probe
        // rebuilds the network (the probe seed only shapes the structure;
        // set_flat overwrites every value)
        let mut probe = TinyNet::new(&mut SeedStreams::new(0).stream(Stream::Init));
        probe.set_flat(v);
        probe.loss(&image, label)
    };
    let numeric = fd_grad(&params, loss, STEP);
    let mut per_group: std::collections::BTreeMap<&'static str, f64> = Default::default();
    for (group, range) in segments {
        let err = max_rel_err(&analytic[range.clone()], &numeric[range]);
        let entry = per_group.entry(group.label()).or_insert(0.0);
        *entry = entry.max(err);
    }
    per_group
        .into_iter()
        .map(|(label, err)| ComponentReport {
            component: format!("network_{label}"),
            max_rel_err: err,
        })
        .collect()
}

/// All finite-difference suites; the CLI prints one line per entry.
pub fn run_all(seed: u64) -> Result<Vec<ComponentReport>> {
    let seeds = SeedStreams::new(seed);
    let mut rng = seeds.stream(Stream::Init);
    let mut reports = vec![
        conv_suite(&mut rng),
        dense_suite(&mut rng, Activation::Elu, "dense_elu"),
        dense_suite(&mut rng, Activation::Linear, "dense_linear"),
        softmax_xent_suite(&mut rng),
        mse_suite(&mut rng),
        dropout_off_suite(&mut rng),
        maxpool_suite(&mut rng),
    ];
    reports.extend(bof_suites(&mut rng));
    reports.extend(network_suites(&mut rng));
    Ok(reports)
}
