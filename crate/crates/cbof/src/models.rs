//! Assembly of the four comparison networks over a shared two-conv feature
//! block: flatten (size-locked), global max pooling, two-level spatial max
//! pooling, and the trainable quantization head. Also exact head parameter
//! counting and dataset evaluation.

use crate::bof::{half_ranges, BofLayer, Codebook, SpatialLevel, SIGMA_INIT};
use crate::data::{resize, Dataset, CLASSES};
use crate::error::{Error, Result};
use crate::layers::{
    extract_feature_vectors, feature_grid_backward, Activation, Dense, Dropout, FeatureBlock,
    MaxPool2,
};
use crate::optim::{cross_entropy_loss, mse_loss, orthogonal_init, Param, ParamGroup};
use crate::rng::{SeedStreams, Stream};
use crate::tensor::{dims3, Scalar, Tensor};
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    CnnFlatten,
    Gmp,
    Spp,
    Cbof,
}

impl HeadKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cnn_flatten" => Ok(Self::CnnFlatten),
            "gmp" => Ok(Self::Gmp),
            "spp" => Ok(Self::Spp),
            "cbof" => Ok(Self::Cbof),
            other => Err(Error::Config(format!(
                "unknown head '{other}' (expected cnn_flatten|gmp|spp|cbof)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::CnnFlatten => "cnn_flatten",
            Self::Gmp => "gmp",
            Self::Spp => "spp",
            Self::Cbof => "cbof",
        }
    }
}

/// Everything needed to assemble a network and count its parameters.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub head: HeadKind,
    /// Codewords per region (quantization head only).
    pub codewords: usize,
    /// Spatial segmentation depth (quantization head only).
    pub level: SpatialLevel,
    pub hidden: usize,
    /// Single linear output trained with MSE instead of 10-class softmax.
    pub regression: bool,
    /// Dropout on the head output (the MLP's input layer).
    pub dropout_head: bool,
    /// Dropout on the hidden layer.
    pub dropout_hidden: bool,
    pub dropout_rate: f64,
    /// Image side the network is built for. Only the flatten head is locked
    /// to it; the other heads accept any size their scheme admits.
    pub build_size: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            head: HeadKind::Cbof,
            codewords: 32,
            level: SpatialLevel::Zero,
            hidden: 1000,
            regression: false,
            dropout_head: true,
            dropout_hidden: true,
            dropout_rate: 0.5,
            build_size: 28,
        }
    }
}

impl ModelSpec {
    pub fn outputs(&self) -> usize {
        if self.regression {
            1
        } else {
            CLASSES
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.head == HeadKind::Cbof && self.codewords == 0 {
            return Err(Error::Config("codeword count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must satisfy 0 <= p < 1, got {}",
                self.dropout_rate
            )));
        }
        if self.build_size < 14 {
            return Err(Error::Config(format!(
                "build size {} leaves no feature map after the conv block",
                self.build_size
            )));
        }
        Ok(())
    }
}

/// Per-channel spatial maximum of `[D×h×w]` maps.
pub fn gmp_forward<T: Scalar>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(gmp_with_argmax(maps)?.0)
}

fn gmp_with_argmax<T: Scalar>(maps: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (d, h, w) = dims3(maps)?;
    let mut out = Tensor::zeros(&[d]);
    let mut argmax = vec![0usize; d];
    let src = maps.data();
    for c in 0..d {
        let base = c * h * w;
        let mut best = src[base];
        let mut best_at = base;
        for i in base + 1..base + h * w {
            if src[i] > best {
                best = src[i];
                best_at = i;
            }
        }
        out.data_mut()[c] = best;
        argmax[c] = best_at;
    }
    Ok((out, argmax))
}

/// Regions of the {1×1, 2×2} pyramid over an h×w grid: the whole map first,
/// then the four cells row-major. Odd extents give the bottom/right cells
/// the larger share, matching the quantization head's quadrant rule.
fn pyramid_regions(h: usize, w: usize) -> [(std::ops::Range<usize>, std::ops::Range<usize>); 5] {
    let [top, bottom] = half_ranges(h);
    let [left, right] = half_ranges(w);
    [
        (0..h, 0..w),
        (top.clone(), left.clone()),
        (top, right.clone()),
        (bottom.clone(), left),
        (bottom, right),
    ]
}

/// Two-level spatial max pooling of `[D×h×w]` maps into `[5D]`: the global
/// max per channel, then the four 2×2-grid cell maxes, concatenated
/// region-major.
pub fn spp_forward<T: Scalar>(maps: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(spp_with_argmax(maps)?.0)
}

fn spp_with_argmax<T: Scalar>(maps: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (d, h, w) = dims3(maps)?;
    if h < 2 || w < 2 {
        return Err(Error::Dim(format!(
            "pyramid pooling needs maps of at least 2x2, got {h}x{w}"
        )));
    }
    let regions = pyramid_regions(h, w);
    let src = maps.data();
    let mut out = Tensor::zeros(&[5 * d]);
    let mut argmax = vec![0usize; 5 * d];
    for (ri, (rows, cols)) in regions.iter().enumerate() {
        for c in 0..d {
            let mut best = T::neg_infinity();
            let mut best_at = 0usize;
            for r in rows.clone() {
                for col in cols.clone() {
                    let i = c * h * w + r * w + col;
                    if src[i] > best {
                        best = src[i];
                        best_at = i;
                    }
                }
            }
            out.data_mut()[ri * d + c] = best;
            argmax[ri * d + c] = best_at;
        }
    }
    Ok((out, argmax))
}

enum HeadState {
    Idle,
    Pooling {
        argmax: Vec<usize>,
        maps_shape: Vec<usize>,
    },
    Quantizing {
        rows: usize,
        cols: usize,
    },
    Flatten {
        pooled_shape: Vec<usize>,
    },
}

/// The layer between the feature block and the MLP.
pub struct Head<T> {
    kind: HeadKind,
    /// Flatten head: required feature-map side, fixed at build time.
    locked_side: usize,
    pool: MaxPool2,
    bof: Option<BofLayer<T>>,
    state: HeadState,
}

impl<T: Scalar> Head<T> {
    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn bof(&self) -> Option<&BofLayer<T>> {
        self.bof.as_ref()
    }

    pub fn forward(&mut self, maps: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, h, w) = dims3(maps)?;
        match self.kind {
            HeadKind::Gmp => {
                let (out, argmax) = gmp_with_argmax(maps)?;
                self.state = HeadState::Pooling {
                    argmax,
                    maps_shape: maps.shape().to_vec(),
                };
                Ok(out)
            }
            HeadKind::Spp => {
                let (out, argmax) = spp_with_argmax(maps)?;
                self.state = HeadState::Pooling {
                    argmax,
                    maps_shape: maps.shape().to_vec(),
                };
                Ok(out)
            }
            HeadKind::Cbof => {
                let grid = extract_feature_vectors(maps)?;
                let layer = self.bof.as_mut().expect("quantization head holds a layer");
                let hist = layer.forward(&grid)?;
                self.state = HeadState::Quantizing {
                    rows: grid.rows,
                    cols: grid.cols,
                };
                Ok(hist)
            }
            HeadKind::CnnFlatten => {
                if h != self.locked_side || w != self.locked_side {
                    return Err(Error::Dim(format!(
                        "flatten head is fixed to {0}x{0} feature maps, got {h}x{w}; \
                         this head cannot change input size",
                        self.locked_side
                    )));
                }
                let pooled = self.pool.forward(maps)?;
                let shape = pooled.shape().to_vec();
                let flat_len = pooled.len();
                self.state = HeadState::Flatten {
                    pooled_shape: shape,
                };
                pooled.reshape(&[flat_len])
            }
        }
    }

    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let state = std::mem::replace(&mut self.state, HeadState::Idle);
        match state {
            HeadState::Idle => Err(Error::State("head backward before forward".into())),
            HeadState::Pooling { argmax, maps_shape } => {
                if upstream.len() != argmax.len() {
                    return Err(Error::Dim(format!(
                        "head backward expects {} values, got {}",
                        argmax.len(),
                        upstream.len()
                    )));
                }
                let mut dmaps = Tensor::zeros(&maps_shape);
                for (i, &flat) in argmax.iter().enumerate() {
                    let slot = &mut dmaps.data_mut()[flat];
                    *slot = *slot + upstream.data()[i];
                }
                Ok(dmaps)
            }
            HeadState::Quantizing { rows, cols } => {
                let layer = self.bof.as_mut().expect("quantization head holds a layer");
                let grad_vectors = layer.backward(upstream)?;
                feature_grid_backward(&grad_vectors, rows, cols)
            }
            HeadState::Flatten { pooled_shape } => {
                let dpooled = upstream.reshape(&pooled_shape)?;
                self.pool.backward(&dpooled)
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.bof {
            Some(layer) => layer.params_mut(),
            None => vec![],
        }
    }
}

/// Feature block → head → MLP, with dropout on the MLP's input and hidden
/// layers when enabled.
pub struct Network<T> {
    pub spec: ModelSpec,
    pub feature: FeatureBlock<T>,
    pub head: Head<T>,
    pub drop_head: Dropout<T>,
    pub hidden: Dense<T>,
    pub drop_hidden: Dropout<T>,
    pub output: Dense<T>,
}

/// Feature-map side produced by the default conv block for a square input,
/// as used by the parameter-count table.
pub fn feature_side(input: usize) -> Result<usize> {
    let after1 = input
        .checked_sub(4)
        .filter(|&v| v >= 2)
        .ok_or_else(|| Error::Dim(format!("input side {input} too small for the conv block")))?;
    let side = (after1 / 2)
        .checked_sub(4)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Dim(format!("input side {input} too small for the conv block")))?;
    Ok(side)
}

/// MLP input length for a head over D-channel feature maps at the given
/// input size (only the flatten head depends on the size).
pub fn head_input_len(spec: &ModelSpec, d: usize, input_size: usize) -> Result<usize> {
    Ok(match spec.head {
        HeadKind::Cbof => spec.level.regions() * spec.codewords,
        HeadKind::Gmp => d,
        HeadKind::Spp => 5 * d,
        HeadKind::CnnFlatten => {
            let side = feature_side(input_size)?;
            d * (side / 2) * (side / 2)
        }
    })
}

/// Exact number of weights and biases in every layer after the feature
/// block, including codebook centers and widths.
pub fn count_head_params(spec: &ModelSpec, d: usize, input_size: usize) -> Result<usize> {
    spec.validate()?;
    let head_len = head_input_len(spec, d, input_size)?;
    let codebook = match spec.head {
        HeadKind::Cbof => spec.level.regions() * (spec.codewords * d + spec.codewords),
        _ => 0,
    };
    let n_c = spec.outputs();
    Ok(codebook + head_len * spec.hidden + spec.hidden + spec.hidden * n_c + n_c)
}

impl<T: Scalar> Network<T> {
    /// Assemble a network with fresh weights: glorot-uniform convs,
    /// orthogonal MLP weights, zero biases. Quantization codebooks start as
    /// small Gaussian placeholders; training replaces them via
    /// [`Network::init_codebooks`].
    pub fn build(spec: ModelSpec, seeds: &SeedStreams) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeds.stream(Stream::Init);
        let feature = FeatureBlock::new(1, &mut rng);
        let d = feature.conv2.out_channels();
        let maps_side = feature_side(spec.build_size)?;
        if spec.head == HeadKind::CnnFlatten && maps_side < 2 {
            return Err(Error::Config(format!(
                "build size {} leaves nothing to pool before flattening",
                spec.build_size
            )));
        }
        let bof = match spec.head {
            HeadKind::Cbof => {
                let mut books = Vec::with_capacity(spec.level.regions());
                for region in 0..spec.level.regions() {
                    let mut centers = Tensor::zeros(&[spec.codewords, d]);
                    for v in centers.data_mut() {
                        let g: f64 = rand::Rng::sample(&mut rng, StandardNormal);
                        *v = T::from_f64(0.1 * g);
                    }
                    let sigmas = Tensor::full(&[spec.codewords], T::from_f64(SIGMA_INIT));
                    books.push(Codebook::new(
                        &format!("bof.region{region}"),
                        centers,
                        sigmas,
                    )?);
                }
                Some(BofLayer::new(spec.level, books)?)
            }
            _ => None,
        };
        let head = Head {
            kind: spec.head,
            locked_side: maps_side,
            pool: MaxPool2::new(),
            bof,
            state: HeadState::Idle,
        };
        let head_len = head_input_len(&spec, d, spec.build_size)?;
        let hidden = Dense::new(
            Param::new(
                "mlp.hidden.weight",
                ParamGroup::Mlp,
                orthogonal_init(spec.hidden, head_len, 1.0, &mut rng),
            ),
            Param::new(
                "mlp.hidden.bias",
                ParamGroup::Mlp,
                Tensor::zeros(&[spec.hidden]),
            ),
            Activation::Elu,
        )?;
        let n_c = spec.outputs();
        let output = Dense::new(
            Param::new(
                "mlp.output.weight",
                ParamGroup::Mlp,
                orthogonal_init(n_c, spec.hidden, 1.0, &mut rng),
            ),
            Param::new("mlp.output.bias", ParamGroup::Mlp, Tensor::zeros(&[n_c])),
            if spec.regression {
                Activation::Linear
            } else {
                Activation::Softmax
            },
        )?;
        let head_rate = if spec.dropout_head {
            spec.dropout_rate
        } else {
            0.0
        };
        let hidden_rate = if spec.dropout_hidden {
            spec.dropout_rate
        } else {
            0.0
        };
        Ok(Self {
            spec,
            feature,
            head,
            drop_head: Dropout::new(head_rate, seeds.stream_offset(Stream::Dropout, 0))?,
            drop_hidden: Dropout::new(hidden_rate, seeds.stream_offset(Stream::Dropout, 1))?,
            hidden,
            output,
        })
    }

    pub fn forward(&mut self, image: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let maps = self.feature.forward(image)?;
        let pooled = self.head.forward(&maps)?;
        let x0 = self.drop_head.forward(&pooled, train)?;
        let h = self.hidden.forward(&x0)?;
        let h = self.drop_hidden.forward(&h, train)?;
        self.output.forward(&h)
    }

    /// Backward from the gradient at the output pre-activation (`y − t` for
    /// the fused softmax + cross-entropy pair; the plain loss gradient for
    /// the linear regression output).
    pub fn backward_from_output_grad(&mut self, dz: &Tensor<T>) -> Result<()> {
        let dh = self.output.backward_from_preact_grad(dz)?;
        let dh = self.drop_hidden.backward(&dh)?;
        let dx0 = self.hidden.backward(&dh)?;
        let dpooled = self.drop_head.backward(&dx0)?;
        let dmaps = self.head.backward(&dpooled)?;
        self.feature.backward(&dmaps)?;
        Ok(())
    }

    /// One training sample: forward in train mode, loss, backward. Gradients
    /// accumulate; the caller owns zeroing and stepping.
    pub fn accumulate_sample(&mut self, image: &Tensor<T>, label: u8) -> Result<f64> {
        let y = self.forward(image, true)?;
        let (loss, dz) = if self.spec.regression {
            let (loss, dy) = mse_loss(y.data()[0], T::from_f64(label as f64));
            (loss, Tensor::new(&[1], vec![dy])?)
        } else {
            cross_entropy_loss(&y, label as usize)?
        };
        self.backward_from_output_grad(&dz)?;
        Ok(loss)
    }

    /// Class prediction (classification) — index of the max output.
    pub fn predict(&mut self, image: &Tensor<T>) -> Result<usize> {
        self.forward(image, false)?.argmax()
    }

    /// Scalar prediction (regression head).
    pub fn predict_value(&mut self, image: &Tensor<T>) -> Result<f64> {
        Ok(self.forward(image, false)?.data()[0].to_f64())
    }

    /// Head output (histogram or pooled vector) in eval mode.
    pub fn head_output(&mut self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let maps = self.feature.forward(image)?;
        self.head.forward(&maps)
    }

    /// All trainable parameters in fixed declaration order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut params = self.feature.params_mut();
        params.extend(self.head.params_mut());
        params.extend(self.hidden.params_mut());
        params.extend(self.output.params_mut());
        params
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Replace quantization codebooks with per-region k-means over feature
    /// vectors extracted from the given images. Vector pools are uniformly
    /// subsampled to at most `cap` in total. No-op for other heads.
    pub fn init_codebooks(
        &mut self,
        images: &[Tensor<T>],
        cap: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<()> {
        let Some(layer) = self.head.bof.as_ref() else {
            return Ok(());
        };
        let (level, n_k, d) = (layer.level, layer.codewords(), layer.dim());
        let n_s = level.regions();
        let mut pools: Vec<Vec<T>> = vec![Vec::new(); n_s];
        for image in images {
            let maps = self.feature.forward(image)?;
            let grid = extract_feature_vectors(&maps)?;
            for i in 0..grid.count() {
                let region =
                    crate::bof::assign_region(grid.position(i), (grid.rows, grid.cols), level);
                pools[region].extend_from_slice(grid.vector(i));
            }
        }
        let per_region_cap = (cap / n_s).max(n_k);
        let mut books = Vec::with_capacity(n_s);
        for (region, pool) in pools.iter().enumerate() {
            let count = pool.len() / d;
            if count < n_k {
                return Err(Error::Parameter(format!(
                    "region {region} produced {count} feature vectors, need at least {n_k}"
                )));
            }
            let kept: Tensor<T> = if count > per_region_cap {
                let picks = rand::seq::index::sample(rng, count, per_region_cap).into_vec();
                let mut data = Vec::with_capacity(per_region_cap * d);
                for &i in &picks {
                    data.extend_from_slice(&pool[i * d..(i + 1) * d]);
                }
                Tensor::new(&[per_region_cap, d], data)?
            } else {
                Tensor::new(&[count, d], pool.clone())?
            };
            books.push(Codebook::from_kmeans(
                &format!("bof.region{region}"),
                &kept,
                n_k,
                rng,
            )?);
        }
        self.head.bof = Some(BofLayer::new(level, books)?);
        Ok(())
    }
}

/// Mean metric of a network over a dataset at one evaluation size:
/// classification error percentage, or mean absolute error in regression
/// mode.
pub fn evaluate<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Parameter("evaluating on an empty dataset".into()));
    }
    let mut wrong = 0usize;
    let mut abs_sum = 0.0f64;
    for item in &data.items {
        let image = resize(&item.pixels, size)?;
        if net.spec.regression {
            let y = net.predict_value(&image)?;
            abs_sum += (y - item.label as f64).abs();
        } else if net.predict(&image)? != item.label as usize {
            wrong += 1;
        }
    }
    Ok(if net.spec.regression {
        abs_sum / data.len() as f64
    } else {
        100.0 * wrong as f64 / data.len() as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabeledImage;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cbof_spec(level: SpatialLevel, codewords: usize) -> ModelSpec {
        ModelSpec {
            head: HeadKind::Cbof,
            codewords,
            level,
            ..ModelSpec::default()
        }
    }

    fn head_spec(head: HeadKind) -> ModelSpec {
        ModelSpec {
            head,
            ..ModelSpec::default()
        }
    }

    #[test]
    fn head_parameter_counts_match_published_table() {
        let d = 64;
        let cases = [
            (cbof_spec(SpatialLevel::Zero, 32), 45_090usize),
            (cbof_spec(SpatialLevel::One, 32), 147_330),
            (cbof_spec(SpatialLevel::One, 64), 283_650),
            (head_spec(HeadKind::Gmp), 75_010),
            (head_spec(HeadKind::Spp), 331_010),
            (head_spec(HeadKind::CnnFlatten), 1_035_010),
        ];
        for (spec, expect) in cases {
            let got = count_head_params(&spec, d, 28).unwrap();
            assert_eq!(got, expect, "{:?} level {:?}", spec.head, spec.level);
        }
    }

    #[test]
    fn count_matches_actual_built_parameters() {
        for spec in [
            cbof_spec(SpatialLevel::One, 32),
            head_spec(HeadKind::Gmp),
            head_spec(HeadKind::Spp),
            head_spec(HeadKind::CnnFlatten),
        ] {
            let counted = count_head_params(&spec, 64, 28).unwrap();
            let mut net = Network::<f32>::build(spec, &SeedStreams::new(1)).unwrap();
            let feature_names = ["feature.conv1", "feature.conv2"];
            let actual: usize = net
                .params_mut()
                .iter()
                .filter(|p| !feature_names.iter().any(|f| p.name.starts_with(f)))
                .map(|p| p.value.len())
                .sum();
            assert_eq!(counted, actual);
        }
    }

    #[test]
    fn mlp_input_lengths() {
        assert_eq!(
            head_input_len(&cbof_spec(SpatialLevel::Zero, 32), 64, 28).unwrap(),
            32
        );
        assert_eq!(
            head_input_len(&cbof_spec(SpatialLevel::One, 32), 64, 28).unwrap(),
            128
        );
        assert_eq!(head_input_len(&head_spec(HeadKind::Spp), 64, 28).unwrap(), 320);
        assert_eq!(
            head_input_len(&head_spec(HeadKind::CnnFlatten), 64, 28).unwrap(),
            1024
        );
    }

    #[test]
    fn gmp_single_cell_is_identity() {
        let maps = Tensor::<f64>::from_f64s(&[3, 1, 1], &[0.1, -0.5, 2.0]).unwrap();
        let out = gmp_forward(&maps).unwrap();
        assert_eq!(out.data(), &[0.1, -0.5, 2.0]);
    }

    #[test]
    fn gmp_constant_maps_give_constant_vector() {
        let maps = Tensor::<f64>::full(&[4, 5, 6], 0.7);
        let out = gmp_forward(&maps).unwrap();
        assert_eq!(out.data(), &[0.7; 4]);
    }

    #[test]
    fn gmp_matches_scan_oracle() {
        let mut rng = SeedStreams::new(13).stream(Stream::Init);
        for _ in 0..100 {
            let (d, h, w) = (
                rng.random_range(1..5),
                rng.random_range(1..7),
                rng.random_range(1..7),
            );
            let maps = rand_t(&[d, h, w], &mut rng);
            let out = gmp_forward(&maps).unwrap();
            for c in 0..d {
                let mut best = f64::NEG_INFINITY;
                for r in 0..h {
                    for col in 0..w {
                        best = best.max(maps.at(&[c, r, col]));
                    }
                }
                assert_eq!(out.data()[c], best);
            }
        }
    }

    #[test]
    fn spp_on_2x2_map_lists_all_pixels() {
        let maps = Tensor::<f64>::from_f64s(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = spp_forward(&maps).unwrap();
        assert_eq!(out.data(), &[4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn spp_constant_map_is_constant_everywhere() {
        let maps = Tensor::<f64>::full(&[3, 4, 4], -0.25);
        let out = spp_forward(&maps).unwrap();
        assert_eq!(out.len(), 15);
        assert!(out.data().iter().all(|&v| v == -0.25));
    }

    #[test]
    fn spp_matches_region_scan_oracle() {
        let mut rng = SeedStreams::new(29).stream(Stream::Init);
        let maps = rand_t(&[64, 8, 8], &mut rng);
        let out = spp_forward(&maps).unwrap();
        let scan = |rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, c: usize| {
            let mut best = f64::NEG_INFINITY;
            for r in rows.clone() {
                for col in cols.clone() {
                    best = best.max(maps.at(&[c, r, col]));
                }
            }
            best
        };
        for c in 0..64 {
            assert_eq!(out.data()[c], scan(0..8, 0..8, c));
            assert_eq!(out.data()[64 + c], scan(0..4, 0..4, c));
            assert_eq!(out.data()[2 * 64 + c], scan(0..4, 4..8, c));
            assert_eq!(out.data()[3 * 64 + c], scan(4..8, 0..4, c));
            assert_eq!(out.data()[4 * 64 + c], scan(4..8, 4..8, c));
        }
    }

    #[test]
    fn spp_rejects_single_row_maps() {
        let maps = Tensor::<f64>::zeros(&[2, 1, 4]);
        assert!(matches!(spp_forward(&maps), Err(Error::Dim(_))));
    }

    #[test]
    fn spp_odd_extent_cells_cover_the_map() {
        // 5-wide: cells are 2+3 per axis; a lone hot pixel at the center
        // lands in the bottom-right cell
        let mut maps = Tensor::<f64>::zeros(&[1, 5, 5]);
        maps.set(&[0, 2, 2], 9.0);
        let out = spp_forward(&maps).unwrap();
        assert_eq!(out.data()[0], 9.0); // global
        assert_eq!(out.data()[4], 9.0); // bottom-right cell
        assert_eq!(out.data()[1], 0.0);
    }

    /// Finite-difference check of the pooling heads through Head::backward.
    fn head_finite_diff(kind: HeadKind) {
        let mut rng = SeedStreams::new(43).stream(Stream::Init);
        let maps0 = rand_t(&[3, 4, 4], &mut rng);
        let mut head = Head::<f64> {
            kind,
            locked_side: 4,
            pool: MaxPool2::new(),
            bof: None,
            state: HeadState::Idle,
        };
        let out0 = head.forward(&maps0).unwrap();
        let up = rand_t(&[out0.len()], &mut rng);
        let dmaps = head.backward(&up).unwrap();
        let loss = |maps: &Tensor<f64>| -> f64 {
            let mut h = Head::<f64> {
                kind,
                locked_side: 4,
                pool: MaxPool2::new(),
                bof: None,
                state: HeadState::Idle,
            };
            let out = h.forward(maps).unwrap();
            out.data().iter().zip(up.data()).map(|(&a, &u)| a * u).sum()
        };
        let h = 1e-6;
        for i in 0..maps0.len() {
            let mut p = maps0.clone();
            p.data_mut()[i] += h;
            let mut m = maps0.clone();
            m.data_mut()[i] -= h;
            let num = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(
                (dmaps.data()[i] - num).abs() < 1e-6,
                "{kind:?} grad[{i}]: {} vs {num}",
                dmaps.data()[i]
            );
        }
    }

    #[test]
    fn gmp_head_matches_finite_differences() {
        head_finite_diff(HeadKind::Gmp);
    }

    #[test]
    fn spp_head_matches_finite_differences() {
        head_finite_diff(HeadKind::Spp);
    }

    #[test]
    fn flatten_head_matches_finite_differences() {
        head_finite_diff(HeadKind::CnnFlatten);
    }

    #[test]
    fn resizable_heads_share_output_dim_across_sizes() {
        for kind in [HeadKind::Gmp, HeadKind::Spp, HeadKind::Cbof] {
            let spec = if kind == HeadKind::Cbof {
                cbof_spec(SpatialLevel::One, 8)
            } else {
                head_spec(kind)
            };
            let mut net = Network::<f64>::build(spec, &SeedStreams::new(3)).unwrap();
            let mut dims = std::collections::HashSet::new();
            for size in [20usize, 24, 28, 32, 36] {
                let mut rng = SeedStreams::new(size as u64).stream(Stream::Init);
                let img = {
                    let mut t = Tensor::<f64>::zeros(&[1, size, size]);
                    for v in t.data_mut() {
                        *v = rng.random_range(0.0..1.0);
                    }
                    t
                };
                let y = net.forward(&img, false).unwrap();
                dims.insert(y.len());
            }
            assert_eq!(dims.len(), 1, "{kind:?} output dim varied across sizes");
        }
    }

    #[test]
    fn flatten_network_rejects_off_size_inputs() {
        let mut net =
            Network::<f64>::build(head_spec(HeadKind::CnnFlatten), &SeedStreams::new(3)).unwrap();
        let ok = Tensor::<f64>::full(&[1, 28, 28], 0.5);
        assert!(net.forward(&ok, false).is_ok());
        let off = Tensor::<f64>::full(&[1, 32, 32], 0.5);
        assert!(matches!(net.forward(&off, false), Err(Error::Dim(_))));
    }

    fn balanced_fixture(n: usize) -> Dataset<f64> {
        // one fixed image, labels cycling 0..9: any constant predictor is
        // wrong on exactly 9 of 10
        let img = Tensor::<f64>::full(&[1, 28, 28], 0.5);
        Dataset {
            items: (0..n)
                .map(|i| LabeledImage {
                    pixels: img.clone(),
                    label: (i % 10) as u8,
                })
                .collect(),
        }
    }

    #[test]
    fn evaluate_constant_predictor_on_balanced_data_is_ninety_percent() {
        let mut net =
            Network::<f64>::build(cbof_spec(SpatialLevel::Zero, 8), &SeedStreams::new(5)).unwrap();
        let data = balanced_fixture(20);
        let err = evaluate(&mut net, &data, 28).unwrap();
        assert_eq!(err, 90.0);
    }

    #[test]
    fn evaluate_perfect_predictions_give_zero_error() {
        let mut net =
            Network::<f64>::build(cbof_spec(SpatialLevel::Zero, 8), &SeedStreams::new(7)).unwrap();
        let mut rng = SeedStreams::new(8).stream(Stream::Init);
        let mut items = Vec::new();
        for _ in 0..20 {
            let mut img = Tensor::<f64>::zeros(&[1, 28, 28]);
            for v in img.data_mut() {
                *v = rng.random_range(0.0..1.0);
            }
            let label = net.predict(&img).unwrap() as u8;
            items.push(LabeledImage {
                pixels: img,
                label,
            });
        }
        let data = Dataset { items };
        assert_eq!(evaluate(&mut net, &data, 28).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_agrees_with_hand_scoring() {
        let mut net =
            Network::<f64>::build(cbof_spec(SpatialLevel::Zero, 8), &SeedStreams::new(11)).unwrap();
        let mut rng = SeedStreams::new(12).stream(Stream::Init);
        let mut items = Vec::new();
        for i in 0..20 {
            let mut img = Tensor::<f64>::zeros(&[1, 28, 28]);
            for v in img.data_mut() {
                *v = rng.random_range(0.0..1.0);
            }
            items.push(LabeledImage {
                pixels: img,
                label: (i % 10) as u8,
            });
        }
        let data = Dataset { items };
        let mut wrong = 0;
        for item in &data.items {
            if net.predict(&item.pixels).unwrap() != item.label as usize {
                wrong += 1;
            }
        }
        let expect = 100.0 * wrong as f64 / 20.0;
        assert_eq!(evaluate(&mut net, &data, 28).unwrap(), expect);
    }

    #[test]
    fn regression_evaluate_reports_mean_absolute_error() {
        let spec = ModelSpec {
            regression: true,
            dropout_head: false,
            dropout_hidden: false,
            ..cbof_spec(SpatialLevel::Zero, 8)
        };
        let mut net = Network::<f64>::build(spec, &SeedStreams::new(13)).unwrap();
        let data = balanced_fixture(10);
        let y = net.predict_value(&data.items[0].pixels).unwrap();
        let expect: f64 = (0..10).map(|l| (y - l as f64).abs()).sum::<f64>() / 10.0;
        let got = evaluate(&mut net, &data, 28).unwrap();
        assert!((got - expect).abs() < 1e-9);
    }

    #[test]
    fn kmeans_codebook_init_replaces_placeholders() {
        let mut net =
            Network::<f64>::build(cbof_spec(SpatialLevel::One, 4), &SeedStreams::new(17)).unwrap();
        let mut rng = SeedStreams::new(18).stream(Stream::Init);
        let images: Vec<Tensor<f64>> = (0..6)
            .map(|_| {
                let mut t = Tensor::<f64>::zeros(&[1, 28, 28]);
                for v in t.data_mut() {
                    *v = rng.random_range(0.0..1.0);
                }
                t
            })
            .collect();
        let before = net.head.bof().unwrap().codebooks[0].centers.value.clone();
        let mut krng = SeedStreams::new(17).stream(Stream::KMeans);
        net.init_codebooks(&images, 100_000, &mut krng).unwrap();
        let layer = net.head.bof().unwrap();
        assert_ne!(layer.codebooks[0].centers.value, before);
        for book in &layer.codebooks {
            assert_eq!(book.codewords(), 4);
            assert_eq!(book.dim(), 64);
            assert!(book.sigmas.value.data().iter().all(|&s| s == SIGMA_INIT));
        }
        // forward still works and keeps the histogram invariants
        let hist = net.head_output(&images[0]).unwrap();
        assert_eq!(hist.len(), 16);
        for r in 0..4 {
            let s: f64 = hist.data()[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn subsampling_cap_is_respected() {
        let mut net =
            Network::<f64>::build(cbof_spec(SpatialLevel::Zero, 3), &SeedStreams::new(19)).unwrap();
        let images: Vec<Tensor<f64>> = (0..4)
            .map(|i| Tensor::<f64>::full(&[1, 28, 28], 0.1 + 0.2 * i as f64))
            .collect();
        // 4 images × 64 vectors = 256 vectors, capped to 16
        let mut krng = SeedStreams::new(19).stream(Stream::KMeans);
        net.init_codebooks(&images, 16, &mut krng).unwrap();
        assert_eq!(net.head.bof().unwrap().codebooks[0].codewords(), 3);
    }

    #[test]
    fn invalid_specs_are_configuration_errors() {
        let bad_hidden = ModelSpec {
            hidden: 0,
            ..ModelSpec::default()
        };
        assert!(matches!(bad_hidden.validate(), Err(Error::Config(_))));
        let bad_codewords = ModelSpec {
            codewords: 0,
            ..ModelSpec::default()
        };
        assert!(matches!(bad_codewords.validate(), Err(Error::Config(_))));
        let bad_rate = ModelSpec {
            dropout_rate: 1.0,
            ..ModelSpec::default()
        };
        assert!(matches!(bad_rate.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn training_step_reduces_loss_on_one_sample() {
        // overfit a single image for a few steps: loss must drop
        let spec = ModelSpec {
            dropout_head: false,
            dropout_hidden: false,
            hidden: 32,
            ..cbof_spec(SpatialLevel::Zero, 8)
        };
        let mut net = Network::<f64>::build(spec, &SeedStreams::new(23)).unwrap();
        let mut rng = SeedStreams::new(24).stream(Stream::Init);
        let mut img = Tensor::<f64>::zeros(&[1, 28, 28]);
        for v in img.data_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        let mut adam = crate::optim::Adam::new(crate::optim::GroupRates::uniform(1e-3));
        let first = net.accumulate_sample(&img, 3).unwrap();
        let mut last = first;
        for _ in 0..60 {
            adam.step(&mut net.params_mut()).unwrap();
            net.zero_grads();
            last = net.accumulate_sample(&img, 3).unwrap();
        }
        assert!(
            last < first * 0.5,
            "loss did not drop: {first} -> {last}"
        );
    }
}
