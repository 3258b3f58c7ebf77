//! Python bindings. Grids cross the boundary as flat `list[float]` in
//! `[T, H, W]` order plus explicit dimensions; configurations as JSON text
//! using the same keys as the command-line config file.

use std::path::PathBuf;

use pidnowcast::grid::{read_grid_file, read_mask_file, write_grid_file, GridData, GridShape};
use pidnowcast::physics::{self, ConsistencyConfig, ResidualConfig};
use pidnowcast::pid::{self, AblationFlags};
use pidnowcast::synth::{self, SynthConfig};
use pidnowcast::transformer::SamplingConfig;
use pidnowcast::verify::{self, CatchmentMask, PrPoint, VerificationConfig};
use pidnowcast::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// A precipitation sequence in mm/h.
#[pyclass(name = "PrecipSequence", module = "pidnowcast_py")]
#[derive(Clone)]
pub struct PySequence {
    inner: pidnowcast::grid::PrecipSequence,
}

#[pymethods]
impl PySequence {
    #[new]
    #[pyo3(signature = (values, frames, height, width, step_minutes=30, pixel_size_km=1.0))]
    fn new(
        values: Vec<f32>,
        frames: usize,
        height: usize,
        width: usize,
        step_minutes: u32,
        pixel_size_km: f32,
    ) -> PyResult<Self> {
        let shape = GridShape::plane(height, width).map_err(to_py)?;
        if values.len() != frames * shape.pixels() {
            return Err(PyValueError::new_err(format!(
                "expected {} values, got {}",
                frames * shape.pixels(),
                values.len()
            )));
        }
        let chunks = values.chunks(shape.pixels().max(1)).map(<[f32]>::to_vec).collect();
        let inner = pidnowcast::grid::PrecipSequence::from_frames(shape, step_minutes, chunks)
            .and_then(|s| s.with_pixel_size(pixel_size_km))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = read_grid_file(&path).and_then(|g| g.into_precip()).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_grid_file(&GridData::Precip(self.inner.clone()), &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(frames, height, width)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.inner.shape();
        (self.inner.len(), s.height, s.width)
    }

    #[getter]
    fn step_minutes(&self) -> u32 {
        self.inner.step_minutes()
    }

    fn values(&self) -> Vec<f32> {
        self.inner.flat_values()
    }

    /// Conditioning and target parts.
    fn split(&self, n_cond: usize, n_pred: usize) -> PyResult<(Self, Self)> {
        let (a, b) = self.inner.split(n_cond, n_pred).map_err(to_py)?;
        Ok((Self { inner: a }, Self { inner: b }))
    }

    fn __repr__(&self) -> String {
        let (t, h, w) = self.shape();
        format!("PrecipSequence(frames={t}, height={h}, width={w}, step_minutes={})", self.inner.step_minutes())
    }
}

/// Synthetic sequences whose humidity budget closes exactly.
#[pyclass(name = "SynthDataset", module = "pidnowcast_py")]
pub struct PyDataset {
    inner: synth::SynthDataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (config_json=None))]
    fn generate(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: SynthConfig = parse_json(config_json)?;
        Ok(Self {
            inner: synth::generate(&cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: synth::read_dataset(&dir).map_err(to_py)?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        synth::write_dataset(&self.inner, &dir).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.sequences.len()
    }

    fn precip(&self, index: usize) -> PyResult<PySequence> {
        let s = self.inner.sequences.get(index).ok_or_else(|| PyValueError::new_err("index out of range"))?;
        Ok(PySequence { inner: s.precip.clone() })
    }

    fn is_extreme(&self, index: usize) -> PyResult<bool> {
        let s = self.inner.sequences.get(index).ok_or_else(|| PyValueError::new_err("index out of range"))?;
        Ok(s.is_extreme())
    }

    /// Per-frame consistency scores of `pred` against sequence `index`'s
    /// meteorology. `pred` frames must carry timestamps the meteorology covers.
    #[pyo3(signature = (index, pred, lambda_sharpness=1.0))]
    fn consistency_scores(&self, index: usize, pred: &PySequence, lambda_sharpness: f64) -> PyResult<Vec<f64>> {
        let s = self.inner.sequences.get(index).ok_or_else(|| PyValueError::new_err("index out of range"))?;
        let ccfg = ConsistencyConfig {
            lambda_sharpness,
            ..Default::default()
        };
        physics::sequence_scores(&pred.inner, &s.meteo, &self.residual_config(), &ccfg, true).map_err(to_py)
    }

    /// Per-frame mean |residual| of the observed frames after the first.
    fn observed_residuals(&self, index: usize) -> PyResult<Vec<f64>> {
        let s = self.inner.sequences.get(index).ok_or_else(|| PyValueError::new_err("index out of range"))?;
        let frames = s.precip.frames()[1..].to_vec();
        let seq = pidnowcast::grid::PrecipSequence::new(frames, s.precip.step_minutes())
            .and_then(|q| q.with_pixel_size(s.precip.pixel_size_km()))
            .map_err(to_py)?;
        let r = physics::sequence_residuals(&seq, &s.meteo, &self.residual_config()).map_err(to_py)?;
        Ok(r.iter().map(|f| f.mean_abs).collect())
    }
}

impl PyDataset {
    fn residual_config(&self) -> ResidualConfig {
        self.inner.config.residual_config()
    }
}

#[pyclass(name = "VqGan", module = "pidnowcast_py")]
pub struct PyVqGan {
    inner: pidnowcast::vqgan::VqGan,
}

#[pymethods]
impl PyVqGan {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: pidnowcast::vqgan::VqGan::load(&path).map_err(to_py)?,
        })
    }

    /// Trains on every frame of `frames` and returns the model with its
    /// reconstruction-loss curve.
    #[staticmethod]
    #[pyo3(signature = (frames, steps, seed=0, config_json=None))]
    fn train(frames: &PySequence, steps: usize, seed: u64, config_json: Option<&str>) -> PyResult<(Self, Vec<f64>)> {
        let cfg: pidnowcast::vqgan::VqGanConfig = parse_json(config_json)?;
        let run = pidnowcast::vqgan::train_vqgan(frames.inner.frames(), &cfg, steps, seed, 0).map_err(to_py)?;
        let curve = run.curve.iter().map(|r| r.rec).collect();
        Ok((Self { inner: run.model }, curve))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Token indices per frame.
    fn encode(&self, seq: &PySequence) -> PyResult<Vec<Vec<usize>>> {
        let s = seq.inner.shape();
        let raw: Vec<&[f32]> = seq.inner.frames().iter().map(|f| f.values()).collect();
        let grids = self.inner.encode_frames(&raw, s.height, s.width).map_err(to_py)?;
        Ok(grids.into_iter().map(|g| g.indices).collect())
    }

    /// Reconstruction in mm/h, same layout as the input.
    fn reconstruct(&self, seq: &PySequence) -> PyResult<Vec<f32>> {
        let s = seq.inner.shape();
        let raw: Vec<&[f32]> = seq.inner.frames().iter().map(|f| f.values()).collect();
        let grids = self.inner.encode_frames(&raw, s.height, s.width).map_err(to_py)?;
        Ok(self.inner.decode_tokens(&grids).map_err(to_py)?.concat())
    }
}

#[pyclass(name = "Transformer", module = "pidnowcast_py")]
pub struct PyTransformer {
    inner: pidnowcast::transformer::Transformer,
}

#[pymethods]
impl PyTransformer {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: pidnowcast::transformer::Transformer::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// Mean next-token cross-entropy of a token stream.
    fn stream_loss(&self, tokens: Vec<usize>) -> PyResult<f64> {
        self.inner.stream_loss(&tokens).map_err(to_py)
    }
}

/// Ensemble-mean forecast of `n_pred` frames following `cond`, plus members.
#[pyfunction]
#[pyo3(signature = (vqgan, transformer, cond, n_pred, n_samples=5, seed=0, temperature=1.0, top_k=64))]
#[allow(clippy::too_many_arguments)]
fn predict_ensemble(
    vqgan: &PyVqGan,
    transformer: &PyTransformer,
    cond: &PySequence,
    n_pred: usize,
    n_samples: usize,
    seed: u64,
    temperature: f64,
    top_k: usize,
) -> PyResult<(PySequence, Vec<PySequence>)> {
    let sampling = SamplingConfig { temperature, top_k };
    let e = pid::predict_ensemble(&vqgan.inner, &transformer.inner, &cond.inner, n_pred, n_samples, seed, sampling)
        .map_err(to_py)?;
    Ok((
        PySequence { inner: e.mean },
        e.members.into_iter().map(|m| PySequence { inner: m }).collect(),
    ))
}

/// Parses `full`, `-P` or `-PT` into `(physics_enabled, temporal_disc_enabled)`.
#[pyfunction]
fn ablation_flags(name: &str) -> PyResult<(bool, bool)> {
    let f = AblationFlags::from_name(name).map_err(to_py)?;
    Ok((f.physics_enabled, f.temporal_disc_enabled))
}

/// `exp(-lambda * residual)`.
#[pyfunction]
#[pyo3(signature = (residual, lambda_sharpness=1.0))]
fn consistency_score(residual: f64, lambda_sharpness: f64) -> f64 {
    physics::score_from_scalar(residual, lambda_sharpness)
}

#[pyfunction]
fn pixel_metrics<'py>(py: Python<'py>, pred: Vec<f32>, obs: Vec<f32>) -> PyResult<Bound<'py, PyDict>> {
    let m = verify::pixel_metrics_flat(&pred, &obs).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mse", m.mse)?;
    d.set_item("mae", m.mae)?;
    d.set_item("pcc", m.pcc)?;
    Ok(d)
}

/// `(hits, misses, false_alarms, correct_negatives, csi, far)` at `threshold`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn contingency(
    pred: Vec<f32>,
    obs: Vec<f32>,
    threshold: f64,
) -> PyResult<(u64, u64, u64, u64, Option<f64>, Option<f64>)> {
    let t = verify::contingency_flat(&pred, &obs, threshold).map_err(to_py)?;
    Ok((t.hits, t.misses, t.false_alarms, t.correct_negatives, t.csi(), t.far()))
}

/// Area under `(precision or None, recall)` points.
#[pyfunction]
fn pr_auc(points: Vec<(Option<f64>, f64)>) -> f64 {
    let pts: Vec<PrPoint> = points
        .into_iter()
        .map(|(precision, recall)| PrPoint {
            threshold: 0.0,
            precision,
            recall,
        })
        .collect();
    verify::pr_auc(&pts)
}

/// Scores paired sequences; returns `(metrics_csv, pr_curve_csv or None)`.
#[pyfunction]
#[pyo3(signature = (preds, obs, masks_path=None, config_json=None))]
fn evaluate(
    preds: Vec<PySequence>,
    obs: Vec<PySequence>,
    masks_path: Option<PathBuf>,
    config_json: Option<&str>,
) -> PyResult<(String, Option<String>)> {
    let cfg: VerificationConfig = parse_json(config_json)?;
    let masks = match masks_path {
        None => Vec::new(),
        Some(p) => {
            let (shape, raw) = read_mask_file(&p).map_err(to_py)?;
            raw.into_iter()
                .enumerate()
                .map(|(i, m)| CatchmentMask::new(format!("c{i}"), shape, m))
                .collect::<Result<Vec<_>, _>>()
                .map_err(to_py)?
        }
    };
    let p: Vec<_> = preds.into_iter().map(|s| s.inner).collect();
    let o: Vec<_> = obs.into_iter().map(|s| s.inner).collect();
    let r = verify::evaluate(&p, &o, &masks, &cfg).map_err(to_py)?;
    Ok((r.metrics_csv(), r.pr_curve.as_ref().map(verify::PrCurve::to_csv)))
}

/// Natural cubic spline through `(time, value)` knots evaluated at `queries`.
#[pyfunction]
fn cubic_time_interp(series: Vec<(i64, f64)>, queries: Vec<i64>) -> PyResult<Vec<f64>> {
    pidnowcast::ingest::cubic_time_interp(&series, &queries).map_err(to_py)
}

/// Runs the command-line interface in-process; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("pidnowcast".to_string()).chain(args);
    pidnowcast::cli::main_with_args(argv)
}

#[pymodule]
fn pidnowcast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySequence>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyVqGan>()?;
    m.add_class::<PyTransformer>()?;
    m.add_function(wrap_pyfunction!(predict_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_flags, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_score, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(contingency, m)?)?;
    m.add_function(wrap_pyfunction!(pr_auc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cubic_time_interp, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
