//! Python bindings: signal synthesis, time-frequency maps, run configuration,
//! the ViT feature extractor, the DINO statistics, tempered KNN and the
//! file-based pipeline stages.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use wavedino::config::RunConfig;
use wavedino::dino::{self, CollapseThresholds, TrainState};
use wavedino::knn::{self, KnnConfig};
use wavedino::model::ModelNetwork;
use wavedino::pipeline;
use wavedino::signal::{self, FaultClass, VibrationSignal};
use wavedino::tensor::ParamStore;
use wavedino::tfm::{self, TfmConfig};
use wavedino::Error;

create_exception!(wavedino, WavedinoError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Domain(_) | Error::Shape { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => WavedinoError::new_err(other.to_string()),
    }
}

trait OrPyErr<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for wavedino::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Names of the fault classes, in id order.
#[pyfunction]
fn fault_classes() -> PyResult<Vec<&'static str>> {
    Ok(FaultClass::first(10).py_err()?.iter().map(|c| c.name()).collect())
}

/// One synthetic vibration record of the named fault class.
#[pyfunction]
#[pyo3(signature = (fault, length, sample_rate=12_000.0, noise_std=0.5, seed=0))]
fn synth_fault_signal(fault: &str, length: usize, sample_rate: f64, noise_std: f64, seed: u64) -> PyResult<Vec<f64>> {
    let class: FaultClass = fault.parse().py_err()?;
    let x = signal::synth_fault_signal(class, length, sample_rate, noise_std, seed).py_err()?;
    Ok(x.samples().to_vec())
}

/// Morlet CWT magnitudes, one row per scale from the finest.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, n_scales, min_freq=None, max_freq=None))]
fn cwt_magnitude(
    samples: Vec<f64>,
    sample_rate: f64,
    n_scales: usize,
    min_freq: Option<f64>,
    max_freq: Option<f64>,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = TfmConfig {
        n_scales,
        min_freq,
        max_freq,
        ..TfmConfig::default()
    };
    let x = VibrationSignal::new(samples, sample_rate, None).py_err()?;
    let scales = cfg.scales(x.len(), sample_rate).py_err()?;
    let tfr = tfm::cwt(&x, &scales).py_err()?;
    Ok(tfr.magnitudes.chunks(tfr.cols()).map(<[f64]>::to_vec).collect())
}

/// Softmax of `logits / temperature`.
#[pyfunction]
fn tempered_softmax(logits: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    dino::tempered_softmax(&logits, temperature).py_err()
}

#[pyfunction]
fn entropy(p: Vec<f64>) -> f64 {
    dino::entropy(&p)
}

/// `−Σ target · ln prediction`.
#[pyfunction]
fn cross_entropy(target: Vec<f64>, prediction: Vec<f64>) -> f64 {
    dino::cross_entropy(&target, &prediction)
}

/// `KL(target ‖ prediction)`.
#[pyfunction]
fn kl_divergence(target: Vec<f64>, prediction: Vec<f64>) -> f64 {
    dino::kl_divergence(&target, &prediction)
}

/// Collapse verdict of a `(kl, entropy)` trace for `k` output dimensions.
#[pyfunction]
fn collapse_classify(trace: Vec<(f64, f64)>, k: usize) -> PyResult<String> {
    Ok(dino::collapse_classify(&trace, k, &CollapseThresholds::default()).py_err()?.to_string())
}

/// Flat `key = value` run configuration.
#[pyclass(name = "RunConfig", module = "wavedino", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Desk preset, optionally with `key = value` text applied on top.
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => RunConfig::parse(t).py_err()?,
            None => RunConfig::desk(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn full() -> Self {
        Self {
            inner: RunConfig::full(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).py_err()?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py_err()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py_err()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn out_dim(&self) -> usize {
        self.inner.projector.out_dim
    }

    #[getter]
    fn target_size(&self) -> usize {
        self.inner.tfm.target_size
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, target_size={})", self.inner.seed, self.inner.tfm.target_size)
    }
}

/// A colour-mapped scalogram in `[0, 1]`, stored height × width × channels.
#[pyclass(name = "TimeFrequencyMap", module = "wavedino", frozen)]
struct PyMap {
    inner: tfm::TimeFrequencyMap,
}

#[pymethods]
impl PyMap {
    #[new]
    fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: tfm::TimeFrequencyMap::new(height, width, channels, pixels, "").py_err()?,
        })
    }

    /// Map of one signal window under `config`'s transform settings.
    #[staticmethod]
    fn from_signal(samples: Vec<f64>, sample_rate: f64, config: &PyRunConfig) -> PyResult<Self> {
        let x = VibrationSignal::new(samples, sample_rate, None).py_err()?;
        Ok(Self {
            inner: tfm::preprocess(&x, &config.inner.tfm).py_err()?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tfm::TimeFrequencyMap::read(&path).py_err()?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).py_err()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height(), self.inner.width(), self.inner.channels())
    }

    #[getter]
    fn pixels(&self) -> Vec<f32> {
        self.inner.pixels().to_vec()
    }
}

/// Encoder and projector with one parameter set.
#[pyclass(name = "Model", module = "wavedino", frozen)]
struct PyModel {
    config: RunConfig,
    network: ModelNetwork,
    params: ParamStore<f32>,
}

#[pymethods]
impl PyModel {
    /// Randomly initialised teacher for `config`.
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        let (network, _) = ModelNetwork::init::<f32>(&cfg.model(), cfg.seed).py_err()?;
        let params = TrainState::new(&network, &cfg.dino, cfg.seed).py_err()?.teacher;
        Ok(Self {
            config: cfg,
            network,
            params,
        })
    }

    /// Teacher weights of a training checkpoint.
    #[staticmethod]
    fn from_checkpoint(config: &PyRunConfig, path: PathBuf) -> PyResult<Self> {
        let (network, state) = pipeline::load_state(&config.inner, &path).py_err()?;
        Ok(Self {
            config: config.inner.clone(),
            network,
            params: state.teacher,
        })
    }

    /// Class-token features, one row per map.
    fn encode(&self, maps: Vec<PyRef<'_, PyMap>>) -> PyResult<Vec<Vec<f32>>> {
        let refs: Vec<&tfm::TimeFrequencyMap> = maps.iter().map(|m| &m.inner).collect();
        let y = self.network.encoder.encode(&self.params, &refs).py_err()?;
        let dim = self.config.vit.embed_dim;
        Ok(y.data().chunks(dim).map(<[f32]>::to_vec).collect())
    }

    /// Head-averaged class-token attention over patches and the patches
    /// kept at `keep_mass`.
    #[pyo3(signature = (map, keep_mass=0.9))]
    fn attention(&self, map: &PyMap, keep_mass: f64) -> PyResult<(Vec<f64>, Vec<bool>, f64)> {
        let a = self.network.encoder.extract_attention(&self.params, &map.inner, keep_mass).py_err()?;
        Ok((a.mean_cam(), a.tam.clone(), a.concentration()))
    }
}

/// Labeled features for cosine KNN.
#[pyclass(name = "FeatureBank", module = "wavedino", frozen)]
struct PyFeatureBank {
    inner: knn::FeatureBank,
}

#[pymethods]
impl PyFeatureBank {
    #[new]
    fn new(vectors: Vec<Vec<f32>>, labels: Vec<u16>) -> PyResult<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(PyValueError::new_err("feature vectors differ in length"));
        }
        Ok(Self {
            inner: knn::FeatureBank::new(dim, vectors.concat(), labels).py_err()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Predicted class and per-class scores; `temperature=None` is a count vote.
    #[pyo3(signature = (query, n_neighbors=1, temperature=Some(0.07)))]
    fn classify(&self, query: Vec<f32>, n_neighbors: usize, temperature: Option<f64>) -> PyResult<(u16, Vec<(u16, f64)>)> {
        let cfg = KnnConfig {
            n_neighbors,
            temperature,
        };
        let p = knn::classify(&query, &self.inner, &cfg).py_err()?;
        Ok((p.class, p.scores))
    }
}

/// Writes a synthetic dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (config, out_dir, force=false))]
fn synth(config: &PyRunConfig, out_dir: PathBuf, force: bool) -> PyResult<PathBuf> {
    Ok(pipeline::synth(&config.inner, &out_dir, force).py_err()?.manifest)
}

/// Converts every manifest row to a map file; returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config, manifest, out_dir, threads=1))]
fn preprocess<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    manifest: PathBuf,
    out_dir: PathBuf,
    threads: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = pipeline::preprocess(&config.inner, &manifest, &out_dir, threads).py_err()?;
    let d = PyDict::new(py);
    d.set_item("manifest", r.manifest)?;
    d.set_item("written", r.written)?;
    d.set_item("skipped", r.skipped)?;
    d.set_item("errors", r.errors.iter().map(ToString::to_string).collect::<Vec<_>>())?;
    Ok(d)
}

/// Trains (or resumes) a run; returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (config, manifest, run_dir, threads=1, force=false))]
fn train(config: &PyRunConfig, manifest: PathBuf, run_dir: PathBuf, threads: usize, force: bool) -> PyResult<PathBuf> {
    Ok(pipeline::train(&config.inner, &manifest, &run_dir, threads, force).py_err()?.final_checkpoint)
}

/// KNN evaluation report as JSON text.
#[pyfunction]
fn evaluate(config: &PyRunConfig, manifest: PathBuf, checkpoint: PathBuf) -> PyResult<String> {
    Ok(pipeline::eval(&config.inner, &manifest, &checkpoint).py_err()?.to_json())
}

#[pymodule]
#[pyo3(name = "wavedino")]
fn wavedino_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("WavedinoError", m.py().get_type::<WavedinoError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyMap>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFeatureBank>()?;
    m.add_function(wrap_pyfunction!(fault_classes, m)?)?;
    m.add_function(wrap_pyfunction!(synth_fault_signal, m)?)?;
    m.add_function(wrap_pyfunction!(cwt_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(tempered_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(collapse_classify, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
