//! Python bindings.

use condensenext_core::analysis::{count_costs_with, FlopConvention};
use condensenext_core::arch::{build, LayerGraph, ModelSpec, Variant};
use condensenext_core::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta};
use condensenext_core::compression::{prune_schedule, prune_target_total, LgcState, PrunePolicy};
use condensenext_core::data::{parse_records, synthetic_records, ImageRecord, Normalization};
use condensenext_core::ops::{self, ConvConfig};
use condensenext_core::train::{self, ClassCounts, TrainConfig, TrainData, TrainingReport};
use condensenext_core::{Error, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

create_exception!(condensenext, DataError, PyException, "Malformed data, checkpoint or report.");

fn to_py(e: Error) -> PyErr {
    if e.is_data_error() {
        DataError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for condensenext_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn parse_variant(s: &str) -> PyResult<Variant> {
    s.parse().py()
}

fn convention(mac2: bool) -> FlopConvention {
    if mac2 {
        FlopConvention::Mac2
    } else {
        FlopConvention::Mac1
    }
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err("logit rows must have equal length"));
    }
    Tensor::from_vec(&[rows.len(), c], rows.concat()).py()
}

/// A built network: parameters, masks and running statistics.
#[pyclass(name = "Model", module = "condensenext")]
struct PyModel {
    graph: LayerGraph,
}

#[pymethods]
impl PyModel {
    /// Builds a model from a variant name or a `key = value` config text.
    #[new]
    #[pyo3(signature = (variant = "condensenext", seed = 0, config = None))]
    fn new(variant: &str, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let variant = parse_variant(variant)?;
        let spec = match config {
            Some(text) => ModelSpec::from_config(text).py()?.with_variant(variant),
            None => ModelSpec::cifar(variant),
        };
        Ok(PyModel {
            graph: build(&spec, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            graph: read_checkpoint(path).py()?.graph,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyModel {
            graph: load_checkpoint(data).py()?.graph,
        })
    }

    /// Writes a weights-only checkpoint; returns its size in bytes.
    #[pyo3(signature = (path, epoch = 0))]
    fn save(&self, path: &str, epoch: usize) -> PyResult<u64> {
        let meta = CheckpointMeta {
            epoch,
            ..Default::default()
        };
        write_checkpoint(path, &self.graph, &meta, None).py()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &save_checkpoint(&self.graph, &CheckpointMeta::default(), None))
    }

    #[getter]
    fn variant(&self) -> String {
        self.graph.spec.variant.to_string()
    }

    #[getter]
    fn config(&self) -> String {
        self.graph.spec.to_config()
    }

    /// Parameters still trainable after pruning.
    #[getter]
    fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    #[getter]
    fn dense_param_count(&self) -> usize {
        self.graph.dense_param_count()
    }

    fn condense(&mut self, stage: usize) -> PyResult<()> {
        self.graph.condense(stage).py()
    }

    fn condense_all(&mut self) -> PyResult<()> {
        self.graph.condense_all().py()
    }

    /// Kept-input flags per learned group convolution, indexed `[layer][group][input]`.
    fn masks(&self) -> Vec<Vec<Vec<bool>>> {
        self.graph.lgc_states().iter().map(|s| s.mask.clone()).collect()
    }

    /// Cost report as a JSON string.
    #[pyo3(signature = (mac2 = false))]
    fn cost_report(&self, mac2: bool) -> String {
        count_costs_with(&self.graph, convention(mac2)).to_json()
    }

    /// Logits for a flat NCHW float batch of `n` images.
    fn predict(&self, images: Vec<f32>, n: usize) -> PyResult<Vec<Vec<f32>>> {
        let (c, h, w) = self.graph.spec.input_shape;
        let x = Tensor::from_vec(&[n, c, h, w], images).py()?;
        let logits = self.graph.predict(&x).py()?;
        let k = logits.dim(1);
        Ok(logits.data().chunks_exact(k).map(<[f32]>::to_vec).collect())
    }

    /// Trains on CIFAR-format record bytes and returns the report text.
    #[pyo3(signature = (train_records, val_records, epochs, seed = 0, batch_size = 64, lr = 0.1, augment = true))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        train_records: &[u8],
        val_records: &[u8],
        epochs: usize,
        seed: u64,
        batch_size: usize,
        lr: f64,
        augment: bool,
    ) -> PyResult<String> {
        let tr = parse_records(train_records).py()?;
        let va = parse_records(val_records).py()?;
        let cfg = TrainConfig {
            epochs,
            seed,
            batch_size,
            base_lr: lr,
            augment,
            ..TrainConfig::default()
        };
        let data = TrainData {
            train: &tr,
            val: &va,
            norm: Normalization::default(),
        };
        let out = train::train(&mut self.graph, &cfg, &data, |_, _| {}).py()?;
        Ok(out.report.to_text())
    }

    /// Top-1 accuracy on CIFAR-format record bytes.
    fn accuracy(&self, records: &[u8]) -> PyResult<f64> {
        let r = parse_records(records).py()?;
        Ok(train::evaluate(&self.graph, &r, &Normalization::default(), 100).py()?.accuracy)
    }
}

#[pyfunction]
fn relu6(xs: Vec<f64>) -> Vec<f64> {
    xs.into_iter().map(ops::relu6_scalar).collect()
}

#[pyfunction]
fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    train::cosine_lr(epoch, total_epochs, base_lr)
}

/// Condensing stage triggered at the start of `epoch`, if any.
#[pyfunction]
fn condense_stage(epoch: usize, total_epochs: usize, condensation_factor: usize) -> Option<usize> {
    prune_schedule(epoch, total_epochs, condensation_factor)
}

/// `(total, per_group, saturated)` connections removed by the final stage.
#[pyfunction]
#[pyo3(signature = (in_channels, out_channels, groups, p = 4, condensation_factor = 4))]
fn prune_target(
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    p: usize,
    condensation_factor: usize,
) -> PyResult<(usize, Vec<usize>, bool)> {
    let st = LgcState::new(0, groups, in_channels, out_channels, p, condensation_factor, PrunePolicy::Cardinality).py()?;
    let t = prune_target_total(&st).py()?;
    Ok((t.total, t.per_group, t.saturated))
}

#[pyfunction]
fn cross_entropy(logits: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    train::cross_entropy(&rows_to_tensor(&logits)?, &labels).py()
}

#[pyfunction]
#[pyo3(signature = (logits, labels, class_counts, gamma = 0.5, beta = 0.9999))]
fn cb_focal_loss(logits: Vec<Vec<f64>>, labels: Vec<usize>, class_counts: Vec<usize>, gamma: f64, beta: f64) -> PyResult<f64> {
    train::cb_focal_loss(&rows_to_tensor(&logits)?, &labels, &ClassCounts(class_counts), gamma, beta).py()
}

/// 2-D convolution on flat NCHW data; returns `(output, shape)`.
#[pyfunction]
#[pyo3(signature = (x, x_shape, w, mode, out_channels, kernel_size = 3, groups = 1, stride = 1, padding = 0))]
#[allow(clippy::too_many_arguments)]
fn conv2d(
    x: Vec<f64>,
    x_shape: Vec<usize>,
    w: Vec<f64>,
    mode: &str,
    out_channels: usize,
    kernel_size: usize,
    groups: usize,
    stride: usize,
    padding: usize,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let cin = *x_shape.get(1).ok_or_else(|| PyValueError::new_err("x_shape must be (N, C, H, W)"))?;
    let cfg = match mode {
        "standard" => ConvConfig::standard(cin, out_channels, kernel_size, padding),
        "grouped" => ConvConfig::grouped(cin, out_channels, kernel_size, groups, padding),
        "depthwise" => ConvConfig::depthwise(cin, kernel_size, padding),
        "pointwise" => ConvConfig::pointwise(cin, out_channels),
        other => return Err(PyValueError::new_err(format!("unknown convolution mode `{other}`"))),
    }
    .with_stride(stride);
    let xt = Tensor::from_vec(&x_shape, x).py()?;
    let wt = Tensor::from_vec(&cfg.weight_shape(), w).py()?;
    let y = ops::conv2d(&xt, &wt, &cfg).py()?;
    Ok((y.data().to_vec(), y.shape().to_vec()))
}

/// Cost report of the fully condensed default model, as JSON.
#[pyfunction]
#[pyo3(signature = (variant = "condensenext", mac2 = false))]
fn analyze(variant: &str, mac2: bool) -> PyResult<String> {
    let mut g = build(&ModelSpec::cifar(parse_variant(variant)?), 0).py()?;
    g.condense_all().py()?;
    Ok(count_costs_with(&g, convention(mac2)).to_json())
}

/// `n` labelled synthetic images in CIFAR-10 record format.
#[pyfunction]
fn synthetic_cifar<'py>(py: Python<'py>, n: usize, seed: u64) -> Bound<'py, PyBytes> {
    let bytes: Vec<u8> = synthetic_records(n, seed).iter().flat_map(ImageRecord::to_bytes).collect();
    PyBytes::new(py, &bytes)
}

/// Parses a training report and returns its JSON summary.
#[pyfunction]
fn summarize_report(text: &str) -> PyResult<String> {
    Ok(TrainingReport::parse(text).py()?.summary().py()?.to_json())
}

#[pymodule]
fn condensenext(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add_function(wrap_pyfunction!(relu6, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(condense_stage, m)?)?;
    m.add_function(wrap_pyfunction!(prune_target, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(cb_focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_cifar, m)?)?;
    m.add_function(wrap_pyfunction!(summarize_report, m)?)?;
    Ok(())
}
