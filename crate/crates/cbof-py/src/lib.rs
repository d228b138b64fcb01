//! Python extension module over the training library. Exposes the network
//! as a `Model` class plus the standalone membership and parameter-count
//! helpers, enough to drive inference and sanity checks from Python.

use cbof::checkpoint::{load_network, save_network};
use cbof::bof::rbf_memberships as memberships;
use cbof::{
    count_head_params as head_params, evaluate, load_idx, Codebook, Error, HeadKind, ModelSpec,
    Network, SeedStreams, SpatialLevel, Tensor,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Dim(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[allow(clippy::too_many_arguments)]
fn build_spec(
    head: &str,
    codewords: usize,
    level: usize,
    hidden: usize,
    build_size: usize,
    regression: bool,
    dropout: bool,
    dropout_rate: f64,
) -> PyResult<ModelSpec> {
    let spec = ModelSpec {
        head: HeadKind::parse(head).map_err(py_err)?,
        codewords,
        level: SpatialLevel::from_index(level).map_err(py_err)?,
        hidden,
        regression,
        dropout_head: dropout,
        dropout_hidden: dropout,
        dropout_rate,
        build_size,
    };
    spec.validate().map_err(py_err)?;
    Ok(spec)
}

/// Rows-of-pixels input from Python, validated rectangular, to a `[1×H×W]`
/// tensor.
fn image_tensor(rows: Vec<Vec<f32>>) -> PyResult<Tensor<f32>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 {
        return Err(PyValueError::new_err("image must be non-empty"));
    }
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image rows must all share one width"));
    }
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    Tensor::new(&[1, h, w], data).map_err(py_err)
}

/// A trained or freshly initialized classifier: conv feature block, one of
/// four pooling heads, and an MLP. f32 weights throughout, matching the
/// checkpoint format.
#[pyclass]
struct Model {
    net: Network<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (
        head = "cbof",
        codewords = 32,
        level = 0,
        hidden = 1000,
        build_size = 28,
        regression = false,
        dropout = true,
        dropout_rate = 0.5,
        seed = 42,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        head: &str,
        codewords: usize,
        level: usize,
        hidden: usize,
        build_size: usize,
        regression: bool,
        dropout: bool,
        dropout_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = build_spec(
            head, codewords, level, hidden, build_size, regression, dropout, dropout_rate,
        )?;
        let net = Network::build(spec, &SeedStreams::new(seed)).map_err(py_err)?;
        Ok(Self { net })
    }

    /// Predicted class index for one image given as a list of pixel rows in
    /// `[0, 1]`.
    fn predict(&mut self, image: Vec<Vec<f32>>) -> PyResult<usize> {
        self.net.predict(&image_tensor(image)?).map_err(py_err)
    }

    /// Regression output for one image (regression models only).
    fn predict_value(&mut self, image: Vec<Vec<f32>>) -> PyResult<f64> {
        self.net
            .predict_value(&image_tensor(image)?)
            .map_err(py_err)
    }

    /// Pooled head output for one image: the quantization histogram for the
    /// cbof head, the pooled vector for the others. Length is fixed per
    /// model regardless of image size (except the size-locked flatten head).
    fn histogram(&mut self, image: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
        let out = self
            .net
            .head_output(&image_tensor(image)?)
            .map_err(py_err)?;
        Ok(out.data().iter().map(|&v| v as f64).collect())
    }

    /// Number of trainable parameters in head plus MLP at the build size.
    fn head_params(&self) -> PyResult<usize> {
        head_params(&self.net.spec, 64, self.net.spec.build_size).map_err(py_err)
    }

    fn save(&mut self, path: &str) -> PyResult<()> {
        save_network(path, &mut self.net).map_err(py_err)
    }

    /// Load weights from a checkpoint written by `save` or the CLI trainer.
    /// The model architecture must match the checkpoint exactly.
    fn load(&mut self, path: &str) -> PyResult<()> {
        load_network(path, &mut self.net).map_err(py_err)
    }

    /// Classification error percentage (or regression MAE) over an IDX
    /// image/label pair, evaluated at `size` pixels per side. `limit` caps
    /// the number of images for quick checks.
    #[pyo3(signature = (images_path, labels_path, size, limit = None))]
    fn evaluate_idx(
        &mut self,
        images_path: &str,
        labels_path: &str,
        size: usize,
        limit: Option<usize>,
    ) -> PyResult<f64> {
        let mut data = load_idx::<f32>(images_path, labels_path).map_err(py_err)?;
        if let Some(n) = limit {
            data.items.truncate(n);
        }
        evaluate(&mut self.net, &data, size).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let spec = &self.net.spec;
        format!(
            "Model(head='{}', codewords={}, level={}, hidden={}, build_size={})",
            spec.head.name(),
            spec.codewords,
            spec.level.index(),
            spec.hidden,
            spec.build_size,
        )
    }
}

/// Trainable parameters in head plus MLP for a given configuration, with
/// 64-channel feature input (the default feature block width).
#[pyfunction]
#[pyo3(signature = (head, codewords = 32, level = 0, hidden = 1000, input_size = 28))]
fn count_head_params(
    head: &str,
    codewords: usize,
    level: usize,
    hidden: usize,
    input_size: usize,
) -> PyResult<usize> {
    let spec = build_spec(head, codewords, level, hidden, input_size, false, true, 0.5)?;
    head_params(&spec, 64, input_size).map_err(py_err)
}

/// Normalized RBF membership vector of `x` against an explicit codebook:
/// `centers` is one row per codeword, `sigmas` one positive width per
/// codeword. Sums to 1.
#[pyfunction]
fn rbf_memberships(x: Vec<f64>, centers: Vec<Vec<f64>>, sigmas: Vec<f64>) -> PyResult<Vec<f64>> {
    let n_k = centers.len();
    let d = x.len();
    if centers.iter().any(|c| c.len() != d) {
        return Err(PyValueError::new_err(
            "center rows must match the query dimension",
        ));
    }
    let centers = Tensor::new(&[n_k, d], centers.into_iter().flatten().collect())
        .map_err(py_err)?;
    let sigmas = Tensor::new(&[n_k], sigmas).map_err(py_err)?;
    let book = Codebook::new("py", centers, sigmas).map_err(py_err)?;
    let m = memberships(&x, &book).map_err(py_err)?;
    Ok(m.data().to_vec())
}

#[pymodule]
fn cbof_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(count_head_params, m)?)?;
    m.add_function(wrap_pyfunction!(rbf_memberships, m)?)?;
    Ok(())
}
