//! Python bindings: datasets, training, evaluation, compression and size
//! accounting.

use std::collections::{BTreeSet, HashMap};

use gatedvlad::datagen::{self, SyntheticDatasetConfig};
use gatedvlad::error::Error;
use gatedvlad::metrics::{self, PredictionRecord, Truth};
use gatedvlad::model;
use gatedvlad::sizing::{self, Selection, SizeModelConfig, SparseScheme};
use gatedvlad::training::{self, TrainConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e if e.is_data_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for gatedvlad::error::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (k, h, vocab, d_video, d_audio, k_audio=None, use_dummy_expert=true))]
    fn new(k: usize, h: usize, vocab: usize, d_video: usize, d_audio: usize, k_audio: Option<usize>, use_dummy_expert: bool) -> PyResult<Self> {
        let mut inner = model::ModelConfig::new(k, h, vocab, d_video, d_audio);
        if let Some(ka) = k_audio {
            inner.k_audio = ka;
        }
        inner.use_dummy_expert = use_dummy_expert;
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn k_video(&self) -> usize {
        self.inner.k_video
    }

    #[getter]
    fn k_audio(&self) -> usize {
        self.inner.k_audio
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hidden
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.inner.vocab
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (num_videos=1000, num_classes=25, d_video=32, d_audio=8, max_frames=30, mean_labels_per_video=3.0, noise_sigma=0.5, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        num_videos: usize,
        num_classes: usize,
        d_video: usize,
        d_audio: usize,
        max_frames: usize,
        mean_labels_per_video: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = SyntheticDatasetConfig { num_videos, num_classes, d_video, d_audio, max_frames, mean_labels_per_video, noise_sigma, seed };
        Ok(Self { inner: datagen::generate(&cfg).py()? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: datagen::read_dataset_file(path).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        datagen::write_dataset_file(&self.inner, path).py()
    }

    /// Returns `(train, validate)`.
    fn split(&self, validate_fraction: f64, seed: u64) -> PyResult<(Self, Self)> {
        let (t, v) = datagen::split(&self.inner, validate_fraction, seed).py()?;
        Ok((Self { inner: t }, Self { inner: v }))
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn d_video(&self) -> usize {
        self.inner.d_video
    }

    #[getter]
    fn d_audio(&self) -> usize {
        self.inner.d_audio
    }

    fn video_ids(&self) -> Vec<String> {
        self.inner.videos.iter().map(|v| v.video_id.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Checkpoint", from_py_object)]
#[derive(Clone)]
struct PyCheckpoint {
    inner: training::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: training::Checkpoint::load(path).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.inner.config.clone() }
    }

    /// Stored size at the current precision of each tensor.
    #[getter]
    fn size_bytes(&self) -> u64 {
        gatedvlad::tensor::bundle_size_bytes(self.inner.weights.bundle())
    }

    #[pyo3(signature = (dataset, top_k=20))]
    fn evaluate(&self, dataset: &PyDataset, top_k: usize) -> PyResult<f64> {
        Ok(training::evaluate(&self.inner.config, &self.inner.weights, &dataset.inner, top_k).py()?.gap)
    }

    /// Top-k `(video_id, label, confidence)` triples for every video.
    #[pyo3(signature = (dataset, top_k=20))]
    fn predict(&self, dataset: &PyDataset, top_k: usize) -> PyResult<Vec<(String, u32, f32)>> {
        let c = &self.inner;
        let params = c.weights.params::<f32>(&c.config).py()?;
        let recs = training::predict_records(&c.config, &params, &dataset.inner, top_k).py()?;
        Ok(recs.into_iter().map(|r| (r.video_id, r.label_id, r.confidence)).collect())
    }

    /// Casts the four big tensors to half precision. Returns the new
    /// checkpoint and the compression rate.
    #[pyo3(signature = (strict=false))]
    fn compress(&self, strict: bool) -> PyResult<(Self, f64)> {
        let c = &self.inner;
        let (bundle, report) = sizing::float16_compress(c.weights.bundle(), &Selection::default(), strict).py()?;
        let weights = model::ModelWeights::from_bundle(&c.config, bundle).py()?;
        Ok((Self { inner: training::Checkpoint::new(c.step, c.config.clone(), weights) }, report.rate))
    }
}

/// Trains a model and returns its checkpoints in step order.
#[pyfunction]
#[pyo3(signature = (config, dataset, steps=1000, checkpoint_interval=100, batch_size=32, learning_rate=2e-4, seed=0))]
fn train(
    py: Python<'_>,
    config: &PyModelConfig,
    dataset: &PyDataset,
    steps: u64,
    checkpoint_interval: u64,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
) -> PyResult<Vec<PyCheckpoint>> {
    let tc = TrainConfig { learning_rate, batch_size, total_steps: steps, checkpoint_interval, seed, ..TrainConfig::default() };
    let run = py.detach(|| training::train(&config.inner, &tc, &dataset.inner)).py()?;
    Ok(run.checkpoints.into_iter().map(|inner| PyCheckpoint { inner }).collect())
}

#[pyfunction]
fn average_checkpoints(checkpoints: Vec<PyCheckpoint>) -> PyResult<PyCheckpoint> {
    let cks: Vec<_> = checkpoints.into_iter().map(|c| c.inner).collect();
    Ok(PyCheckpoint { inner: training::average_checkpoints(&cks).py()? })
}

/// GAP of pooled `(video_id, label, confidence)` predictions against a
/// `{video_id: [labels]}` ground truth.
#[pyfunction]
fn gap_at_k(records: Vec<(String, u32, f32)>, truth: HashMap<String, Vec<u32>>) -> PyResult<f64> {
    let records: Vec<PredictionRecord> =
        records.into_iter().map(|(video_id, label_id, confidence)| PredictionRecord { video_id, label_id, confidence }).collect();
    let truth: Truth = truth.into_iter().map(|(k, v)| (k, v.into_iter().collect::<BTreeSet<u32>>())).collect();
    Ok(metrics::gap_at_k(&records, &truth).py()?.gap)
}

#[pyfunction]
#[pyo3(signature = (param_count, sparsity, value_bits=32, index_bits=32, indices_per_nonzero=2))]
fn sparse_compression_rate(param_count: u64, sparsity: f64, value_bits: u32, index_bits: u32, indices_per_nonzero: u32) -> f64 {
    sizing::sparse_compression_rate(param_count, sparsity, value_bits, SparseScheme::Coordinate { index_bits, indices_per_nonzero })
}

#[pyfunction]
fn quantization_rate(from_bits: u32, to_bits: u32) -> PyResult<f64> {
    sizing::quantization_rate(from_bits, to_bits).py()
}

/// Size summary of a `K<k>-H<h>` model with full vocabulary and features,
/// under the calibrated accounting flags.
#[pyfunction]
fn paper_scale_size<'py>(py: Python<'py>, k: usize, h: usize) -> PyResult<Bound<'py, PyDict>> {
    let flags = sizing::calibrate_size_model(&sizing::table1()).py()?.flags;
    let r = sizing::enumerate_tensors(&SizeModelConfig::paper_scale(k, h, flags));
    let d = PyDict::new(py);
    d.set_item("total_bytes", r.total_bytes)?;
    d.set_item("total_mb", r.total_mb)?;
    d.set_item("half_mb", r.half_compressed_mb())?;
    d.set_item("compression_rate", r.half_compression_rate())?;
    d.set_item("big4_share", r.big4_share)?;
    Ok(d)
}

/// Calibration report over the published single-model sizes, as JSON.
#[pyfunction]
fn calibrate_sizes_json() -> PyResult<String> {
    let cal = sizing::calibrate_size_model(&sizing::table1()).py()?;
    serde_json::to_string_pretty(&cal).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Bytes of a trainable toy model in single precision.
#[pyfunction]
fn model_size_bytes(config: &PyModelConfig) -> u64 {
    sizing::enumerate_tensors(&SizeModelConfig::for_model(&config.inner)).total_bytes
}

#[pymodule]
fn gatedvlad_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(average_checkpoints, m)?)?;
    m.add_function(wrap_pyfunction!(gap_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_compression_rate, m)?)?;
    m.add_function(wrap_pyfunction!(quantization_rate, m)?)?;
    m.add_function(wrap_pyfunction!(paper_scale_size, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_sizes_json, m)?)?;
    m.add_function(wrap_pyfunction!(model_size_bytes, m)?)?;
    Ok(())
}
