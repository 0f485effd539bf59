//! Python bindings. Matrices cross the boundary as lists of rows and token
//! modalities as the strings `"text"` and `"vision"`.

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use splitq_core::eval::{self, Variant};
use splitq_core::{
    self as core, ActivationBatch, CalibConfig, ChannelPartition, Granularity, LayerConfig,
    Matrix, MocdConfig, ModalityTag, QuantSpec, SynthConfig, WeightConfig,
};

create_exception!(splitq, SplitqError, PyValueError);

fn py_err(e: core::SplitqError) -> PyErr {
    match e {
        core::SplitqError::Io(io) => PyIOError::new_err(io.to_string()),
        other => SplitqError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(SplitqError::new_err("matrix needs at least one row"));
    }
    Matrix::from_rows(&rows).map_err(py_err)
}

fn tag(s: &str) -> PyResult<ModalityTag> {
    match s {
        "text" => Ok(ModalityTag::Text),
        "vision" => Ok(ModalityTag::Vision),
        _ => Err(SplitqError::new_err(format!(
            "unknown modality {s:?}, expected \"text\" or \"vision\""
        ))),
    }
}

fn tag_name(t: ModalityTag) -> &'static str {
    match t {
        ModalityTag::Text => "text",
        ModalityTag::Vision => "vision",
    }
}

fn granularity(s: &str) -> PyResult<Granularity> {
    match s {
        "per_tensor" => Ok(Granularity::PerTensor),
        "per_channel" => Ok(Granularity::PerChannel),
        "per_token" => Ok(Granularity::PerToken),
        _ => Err(SplitqError::new_err(format!(
            "unknown granularity {s:?}, expected per_tensor, per_channel or per_token"
        ))),
    }
}

/// Activation rows with one modality tag per row.
#[pyclass(name = "ActivationBatch", module = "splitq", frozen)]
struct PyBatch(ActivationBatch);

#[pymethods]
impl PyBatch {
    #[new]
    fn new(rows: Vec<Vec<f64>>, tags: Vec<String>) -> PyResult<Self> {
        let tags = tags.iter().map(|t| tag(t)).collect::<PyResult<Vec<_>>>()?;
        ActivationBatch::new(matrix(rows)?, tags)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        core::io::load_batch(path).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        core::io::save_batch(path, &self.0).map_err(py_err)
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.0.tokens()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.data().to_rows()
    }

    fn tags(&self) -> Vec<&'static str> {
        self.0.tags().iter().map(|&t| tag_name(t)).collect()
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.0.tokens()) {
            return Err(SplitqError::new_err(format!(
                "token index {i} out of range for {} tokens",
                self.0.tokens()
            )));
        }
        self.0.select_tokens(&indices).map(Self).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ActivationBatch(tokens={}, channels={}, text={}, vision={})",
            self.0.tokens(),
            self.0.channels(),
            self.0.count(ModalityTag::Text),
            self.0.count(ModalityTag::Vision)
        )
    }
}

/// Disjoint main, text-outlier and vision-outlier channel sets.
#[pyclass(name = "ChannelPartition", module = "splitq", frozen)]
struct PyPartition(ChannelPartition);

#[pymethods]
impl PyPartition {
    #[new]
    fn new(dim: usize, main: Vec<usize>, text: Vec<usize>, vision: Vec<usize>) -> PyResult<Self> {
        ChannelPartition::new(dim, main, text, vision)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn trivial(dim: usize) -> Self {
        Self(ChannelPartition::trivial(dim))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn main(&self) -> Vec<usize> {
        self.0.main().to_vec()
    }

    #[getter]
    fn text(&self) -> Vec<usize> {
        self.0.text().to_vec()
    }

    #[getter]
    fn vision(&self) -> Vec<usize> {
        self.0.vision().to_vec()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!(
            "ChannelPartition(dim={}, text={:?}, vision={:?})",
            self.0.dim(),
            self.0.text(),
            self.0.vision()
        )
    }
}

/// Result of a calibration run.
#[pyclass(name = "LossTrace", module = "splitq", frozen, get_all)]
struct PyLossTrace {
    losses: Vec<f64>,
    best_loss: f64,
    best_step: usize,
}

/// Quantized linear layer with outlier paths and low-rank branches.
#[pyclass(name = "SplitQLayer", module = "splitq", frozen)]
struct PyLayer(core::SplitQLayer);

#[pymethods]
impl PyLayer {
    #[staticmethod]
    #[pyo3(signature = (weight, batch, partition, wbits=4, abits=4, cws=true, mac=true, rank_cws=0.02, rank_mac=0.03, identity_quant=false))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        weight: Vec<Vec<f64>>,
        batch: &PyBatch,
        partition: &PyPartition,
        wbits: u8,
        abits: u8,
        cws: bool,
        mac: bool,
        rank_cws: f64,
        rank_mac: f64,
        identity_quant: bool,
    ) -> PyResult<Self> {
        let mut cfg = LayerConfig::bits(wbits, abits).map_err(py_err)?;
        if identity_quant {
            cfg.act_spec = QuantSpec::identity(cfg.act_spec.granularity);
            cfg.weight_spec = QuantSpec::identity(cfg.weight_spec.granularity);
        }
        cfg.cws = cws;
        cfg.mac = mac;
        cfg.rank_cws = rank_cws;
        cfg.rank_mac = rank_mac;
        core::SplitQLayer::build(&matrix(weight)?, &batch.0, partition.0.clone(), &cfg)
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        core::SplitQLayer::load(path).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    #[getter]
    fn d_in(&self) -> usize {
        self.0.d_in()
    }

    #[getter]
    fn d_out(&self) -> usize {
        self.0.d_out()
    }

    #[getter]
    fn partition(&self) -> PyPartition {
        PyPartition(self.0.partition().clone())
    }

    fn forward(&self, py: Python<'_>, batch: &PyBatch) -> PyResult<Vec<Vec<f64>>> {
        let out = py.detach(|| self.0.forward(&batch.0)).map_err(py_err)?;
        Ok(out.to_rows())
    }

    /// Returns the calibrated layer and its loss trace; `self` is unchanged.
    #[pyo3(signature = (batch, steps=200, learning_rate=5e-3, seed=0))]
    fn calibrate(
        &self,
        py: Python<'_>,
        batch: &PyBatch,
        steps: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<(PyLayer, PyLossTrace)> {
        let cfg = CalibConfig {
            steps,
            learning_rate,
            seed,
            ..CalibConfig::default()
        };
        let (layer, trace) = py
            .detach(|| core::calibrate(&self.0, &batch.0, &cfg))
            .map_err(py_err)?;
        Ok((
            PyLayer(layer),
            PyLossTrace {
                losses: trace.losses,
                best_loss: trace.best_loss,
                best_step: trace.best_step,
            },
        ))
    }

    /// Reconstruction MSE against `batch @ weight`, overall and per modality.
    /// A modality absent from the batch reports NaN.
    fn evaluate(&self, batch: &PyBatch) -> PyResult<(f64, f64, f64)> {
        let r = eval::evaluate(&self.0, &batch.0).map_err(py_err)?;
        Ok((r.mse, r.mse_text, r.mse_vision))
    }

    fn weight_error_deciles(&self) -> PyResult<Vec<f64>> {
        eval::weight_error_deciles(&self.0).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "SplitQLayer(d_in={}, d_out={}, cws={}, mac={})",
            self.0.d_in(),
            self.0.d_out(),
            self.0.cws(),
            self.0.mac()
        )
    }
}

/// Synthetic batch with planted vision-peak and text-unstable channels.
#[pyfunction]
#[pyo3(signature = (tokens_text=64, tokens_vision=64, dim=64, vision_outliers=vec![3], text_outliers=vec![9], vision_scale=100.0, instability=0.8, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    tokens_text: usize,
    tokens_vision: usize,
    dim: usize,
    vision_outliers: Vec<usize>,
    text_outliers: Vec<usize>,
    vision_scale: f64,
    instability: f64,
    seed: u64,
) -> PyResult<PyBatch> {
    let cfg = SynthConfig {
        tokens_text,
        tokens_vision,
        dim,
        vision_outlier_channels: vision_outliers,
        text_outlier_channels: text_outliers,
        vision_outlier_scale: vision_scale,
        text_instability: instability,
        seed,
        ..SynthConfig::default()
    };
    core::generate(&cfg).map(PyBatch).map_err(py_err)
}

/// Synthetic `d_in x d_out` weight with a few dominant singular directions.
#[pyfunction]
#[pyo3(signature = (d_in=64, d_out=64, spike_rank=4, spike_strength=8.0, seed=0))]
fn generate_weight(
    d_in: usize,
    d_out: usize,
    spike_rank: usize,
    spike_strength: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = WeightConfig {
        d_in,
        d_out,
        spike_rank,
        spike_strength,
        seed,
    };
    core::generate_weight(&cfg)
        .map(|w| w.to_rows())
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (batch, ratio_vision=0.02, ratio_text=0.02, clusters=3))]
fn build_partition(
    batch: &PyBatch,
    ratio_vision: f64,
    ratio_text: f64,
    clusters: usize,
) -> PyResult<PyPartition> {
    let cfg = MocdConfig {
        ratio_vision,
        ratio_text,
        clusters_k: clusters,
        ..MocdConfig::default()
    };
    core::build_partition(&batch.0, &cfg)
        .map(PyPartition)
        .map_err(py_err)
}

/// Round-trip through the integer grid. `bits=None` is the identity quantizer.
#[pyfunction]
#[pyo3(signature = (values, bits, symmetric=true, granularity="per_tensor"))]
fn quantize(
    values: Vec<Vec<f64>>,
    bits: Option<u8>,
    symmetric: bool,
    granularity: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let g = self::granularity(granularity)?;
    let spec = match bits {
        Some(b) => QuantSpec::new(b, symmetric, g).map_err(py_err)?,
        None => QuantSpec::identity(g),
    };
    Ok(core::quantizer::quantize(&matrix(values)?, &spec).to_rows())
}

/// Unquantized reference output `batch @ weight`.
#[pyfunction]
fn forward_reference(weight: Vec<Vec<f64>>, batch: &PyBatch) -> PyResult<Vec<Vec<f64>>> {
    core::forward_reference(&matrix(weight)?, &batch.0)
        .map(|m| m.to_rows())
        .map_err(py_err)
}

#[pyfunction]
fn jaccard(a: Vec<usize>, b: Vec<usize>) -> f64 {
    core::jaccard(&a, &b)
}

/// `(subset_size, mean_jaccard, std)` per requested subset size.
#[pyfunction]
#[pyo3(signature = (batch, subset_sizes, reference_size=None, trials=20, seed=0, ratio_vision=0.02, ratio_text=0.02))]
#[allow(clippy::too_many_arguments)]
fn stability(
    batch: &PyBatch,
    subset_sizes: Vec<usize>,
    reference_size: Option<usize>,
    trials: usize,
    seed: u64,
    ratio_vision: f64,
    ratio_text: f64,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let cfg = MocdConfig {
        ratio_vision,
        ratio_text,
        ..MocdConfig::default()
    };
    let reference = reference_size.unwrap_or(batch.0.tokens());
    let rows = core::stability_report(&batch.0, &cfg, &subset_sizes, reference, trials, seed)
        .map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.subset_size, r.mean_jaccard, r.std))
        .collect())
}

/// Four-variant ablation: `(name, initial_mse, mse)` per variant.
#[pyfunction]
#[pyo3(signature = (weight, batch, wbits=4, abits=4, steps=200, seed=0))]
fn ablation(
    py: Python<'_>,
    weight: Vec<Vec<f64>>,
    batch: &PyBatch,
    wbits: u8,
    abits: u8,
    steps: usize,
    seed: u64,
) -> PyResult<Vec<(&'static str, f64, f64)>> {
    let w = matrix(weight)?;
    let layer_cfg = LayerConfig::bits(wbits, abits).map_err(py_err)?;
    let calib = CalibConfig {
        steps,
        seed,
        ..CalibConfig::default()
    };
    let rows = py
        .detach(|| eval::run_ablation(&w, &batch.0, &MocdConfig::default(), &layer_cfg, &calib))
        .map_err(py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.variant.name(), r.initial_mse, r.mse))
        .collect())
}

#[pymodule]
fn splitq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SplitqError", m.py().get_type::<SplitqError>())?;
    m.add(
        "VARIANTS",
        Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>(),
    )?;
    m.add_class::<PyBatch>()?;
    m.add_class::<PyPartition>()?;
    m.add_class::<PyLayer>()?;
    m.add_class::<PyLossTrace>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_weight, m)?)?;
    m.add_function(wrap_pyfunction!(build_partition, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(forward_reference, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(stability, m)?)?;
    m.add_function(wrap_pyfunction!(ablation, m)?)?;
    Ok(())
}
