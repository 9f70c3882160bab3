//! Python bindings: transformations, synthetic data, the segmentation model,
//! training, metrics and experiments.
//!
//! Images cross the boundary as nested lists indexed `[channel][row][col]`;
//! masks and probability maps as `[row][col]`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use tcsm::checkpoint::{self, Checkpoint};
use tcsm::experiment::{self, ExperimentConfig, Variant};
use tcsm::metrics::{self, ConfusionCounts};
use tcsm::objective::{self, ScheduleConfig};
use tcsm::trainer::{self, stream_rng, TrainConfig};
use tcsm::{Grid, MetricReport, ModelConfig};

fn to_py(e: tcsm::Error) -> PyErr {
    let msg = format!("[{}] {e}", e.code());
    match e {
        tcsm::Error::Io(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn plane_from_rows<T: Copy>(rows: Vec<Vec<T>>) -> PyResult<Grid<T>> {
    Grid::from_rows(&rows).map_err(to_py)
}

fn plane_to_rows<T: Copy>(grid: &Grid<T>) -> Vec<Vec<T>> {
    grid.to_rows(0)
}

fn image_from_nested(channels: Vec<Vec<Vec<f64>>>) -> PyResult<Grid<f64>> {
    let c = channels.len();
    let h = channels.first().map_or(0, Vec::len);
    let w = channels.first().and_then(|p| p.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(c * h * w);
    for plane in &channels {
        if plane.len() != h {
            return Err(PyValueError::new_err("[E_SHAPE] ragged image channels"));
        }
        for row in plane {
            if row.len() != w {
                return Err(PyValueError::new_err("[E_SHAPE] ragged image rows"));
            }
            data.extend_from_slice(row);
        }
    }
    Grid::new(c, h, w, data).map_err(to_py)
}

fn image_to_nested(grid: &Grid<f64>) -> Vec<Vec<Vec<f64>>> {
    (0..grid.channels()).map(|ch| grid.to_rows(ch)).collect()
}

fn report_dict(r: &MetricReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("ja".to_string(), r.ja),
        ("di".to_string(), r.di),
        ("ac".to_string(), r.ac),
        ("se".to_string(), r.se),
        ("sp".to_string(), r.sp),
        ("n_images".to_string(), r.n_images as f64),
    ])
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(to_py)
}

/// One of the eight rotation/flip operations on square grids.
#[pyclass(name = "TransformOp", frozen, eq, hash, from_py_object)]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct PyTransformOp(tcsm::TransformOp);

#[pymethods]
impl PyTransformOp {
    #[new]
    #[pyo3(signature = (gamma, flip=false))]
    fn new(gamma: i64, flip: bool) -> Self {
        Self(tcsm::TransformOp::new(gamma, flip))
    }

    #[staticmethod]
    fn all() -> Vec<PyTransformOp> {
        tcsm::TransformOp::all().into_iter().map(Self).collect()
    }

    #[getter]
    fn gamma(&self) -> u8 {
        self.0.gamma()
    }

    #[getter]
    fn flip(&self) -> bool {
        self.0.flip()
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// `self` after `other`.
    fn compose(&self, other: &PyTransformOp) -> Self {
        Self(self.0.compose(other.0))
    }

    /// Applies the operation to a square 2-D grid of numbers.
    fn apply(&self, grid: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let g = plane_from_rows(grid)?;
        Ok(plane_to_rows(&self.0.apply(&g).map_err(to_py)?))
    }

    fn __repr__(&self) -> String {
        format!("TransformOp(gamma={}, flip={})", self.0.gamma(), self.0.flip())
    }
}

/// An RGB image with an optional binary lesion mask.
#[pyclass(name = "Sample", frozen, from_py_object)]
#[derive(Clone)]
struct PySample(tcsm::Sample);

#[pymethods]
impl PySample {
    #[new]
    #[pyo3(signature = (id, image, mask=None))]
    fn new(id: String, image: Vec<Vec<Vec<f64>>>, mask: Option<Vec<Vec<u8>>>) -> PyResult<Self> {
        let image = image_from_nested(image)?;
        let mask = mask.map(plane_from_rows).transpose()?;
        Ok(Self(tcsm::Sample::new(id, image, mask).map_err(to_py)?))
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn size(&self) -> usize {
        self.0.size()
    }

    #[getter]
    fn image(&self) -> Vec<Vec<Vec<f64>>> {
        image_to_nested(&self.0.image)
    }

    #[getter]
    fn mask(&self) -> Option<Vec<Vec<u8>>> {
        self.0.mask.as_ref().map(plane_to_rows)
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(id={:?}, size={}, labeled={})",
            self.0.id,
            self.0.size(),
            self.0.mask.is_some()
        )
    }
}

/// Synthetic lesion images with exact masks.
#[pyfunction]
#[pyo3(signature = (n, size=64, artifact_level=0.3, seed=0))]
fn generate_dataset(n: usize, size: usize, artifact_level: f64, seed: u64) -> PyResult<Vec<PySample>> {
    let ds = tcsm::data::generate_dataset(&mut stream_rng(seed, 0, 0), n, size, artifact_level)
        .map_err(to_py)?;
    Ok(ds.into_iter().map(PySample).collect())
}

/// Loads `images/` (and optionally `masks/`) resized to `size`.
#[pyfunction]
#[pyo3(signature = (images, masks=None, size=64))]
fn load_directory(images: PathBuf, masks: Option<PathBuf>, size: usize) -> PyResult<Vec<PySample>> {
    let ds = tcsm::data::load_directory(&images, masks.as_deref(), size).map_err(to_py)?;
    Ok(ds.into_iter().map(PySample).collect())
}

/// The encoder-decoder segmentation network.
#[pyclass(name = "SegModel", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySegModel(tcsm::SegModel);

#[pymethods]
impl PySegModel {
    #[new]
    #[pyo3(signature = (depth=3, base_channels=16, dropout_rate=0.1, input_noise_sigma=0.05, size=64, seed=0))]
    fn new(
        depth: usize,
        base_channels: usize,
        dropout_rate: f64,
        input_noise_sigma: f64,
        size: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            depth,
            base_channels,
            dropout_rate,
            input_noise_sigma,
            size,
        };
        Ok(Self(trainer::init_model(&cfg, seed).map_err(to_py)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(checkpoint::load_checkpoint(&path).map_err(to_py)?.model))
    }

    /// Writes a checkpoint with an empty momentum state.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint {
            model: self.0.clone(),
            velocity: vec![0.0; self.0.param_count()],
            epoch: 0,
            train_config: TrainConfig::default(),
        };
        checkpoint::save_checkpoint(&ck, &path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn size(&self) -> usize {
        self.0.config().size
    }

    /// Deterministic lesion probability map.
    fn predict(&self, image: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let p = self.0.predict(&image_from_nested(image)?).map_err(to_py)?;
        Ok(plane_to_rows(&p))
    }

    /// Thresholded, hole-filled binary mask.
    fn infer(&self, image: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<u8>>> {
        let m = metrics::infer(&self.0, &image_from_nested(image)?).map_err(to_py)?;
        Ok(plane_to_rows(&m))
    }

    /// Mean squared gap between `op(f(x))` and `f(op(x))` over all eight ops.
    fn equivariance_gap(&self, samples: Vec<PySample>) -> PyResult<f64> {
        let images: Vec<Grid<f64>> = samples.into_iter().map(|s| s.0.image).collect();
        tcsm::model::equivariance_gap(&self.0, &images, &tcsm::TransformOp::all()).map_err(to_py)
    }

    fn evaluate(&self, samples: Vec<PySample>) -> PyResult<BTreeMap<String, f64>> {
        let ds: Vec<tcsm::Sample> = samples.into_iter().map(|s| s.0).collect();
        Ok(report_dict(&trainer::evaluate(&self.0, &ds).map_err(to_py)?))
    }

    fn __repr__(&self) -> String {
        let c = self.0.config();
        format!(
            "SegModel(depth={}, base_channels={}, size={}, params={})",
            c.depth,
            c.base_channels,
            c.size,
            self.0.param_count()
        )
    }
}

/// Trains one variant on `samples`, keeping `labeled` randomly chosen masks.
///
/// Returns the model and one dict of loss terms per epoch.
#[pyfunction]
#[pyo3(signature = (samples, labeled, variant="full", epochs=10, seed=0, lr0=0.01, lambda_max=1.0, base_channels=4, depth=3))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    samples: Vec<PySample>,
    labeled: usize,
    variant: &str,
    epochs: usize,
    seed: u64,
    lr0: f64,
    lambda_max: f64,
    base_channels: usize,
    depth: usize,
) -> PyResult<(PySegModel, Vec<BTreeMap<String, f64>>)> {
    let variant = parse_variant(variant)?;
    let pool: Vec<tcsm::Sample> = samples.into_iter().map(|s| s.0).collect();
    let size = pool
        .first()
        .map(tcsm::Sample::size)
        .ok_or_else(|| PyValueError::new_err("[E_PARAM] no samples"))?;
    let model = ModelConfig {
        depth,
        base_channels,
        size,
        ..ModelConfig::default()
    };
    let mut base = TrainConfig::for_epochs(epochs);
    base.schedule.lr0 = lr0;
    base.schedule.lambda_max = lambda_max;
    let (model, history) = py
        .detach(|| {
            let split = experiment::split_pool(&pool, Some(labeled), seed)?;
            experiment::train_variant(&split, variant, seed, &model, &base, true)
        })
        .map_err(to_py)?;
    let records = history
        .epochs
        .iter()
        .map(|e| {
            BTreeMap::from([
                ("epoch".to_string(), e.epoch as f64),
                ("supervised".to_string(), e.loss.supervised),
                ("consistency".to_string(), e.loss.consistency),
                ("total".to_string(), e.loss.total),
                ("lambda".to_string(), e.lambda),
                ("lr".to_string(), e.lr),
            ])
        })
        .collect();
    Ok((PySegModel(model), records))
}

/// Runs an experiment described by a JSON configuration; returns result rows.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<Vec<BTreeMap<String, String>>> {
    let cfg: ExperimentConfig = serde_json::from_str(config_json)
        .map_err(|e| PyValueError::new_err(format!("[E_CONFIG] {e}")))?;
    let rows = py.detach(|| experiment::run_experiment(&cfg)).map_err(to_py)?;
    Ok(rows
        .iter()
        .map(|r| {
            let value = serde_json::to_value(r).expect("rows serialize");
            value
                .as_object()
                .expect("rows are objects")
                .iter()
                .map(|(k, v)| (k.clone(), v.to_string().trim_matches('"').to_string()))
                .collect()
        })
        .collect())
}

/// The five segmentation scores from confusion counts.
#[pyfunction]
fn metrics_from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> BTreeMap<String, f64> {
    let s = metrics::metrics_from_counts(&ConfusionCounts { tp, fp, fn_, tn });
    BTreeMap::from([
        ("ja".to_string(), s.ja),
        ("di".to_string(), s.di),
        ("ac".to_string(), s.ac),
        ("se".to_string(), s.se),
        ("sp".to_string(), s.sp),
    ])
}

/// Fills background regions not connected to the border.
#[pyfunction]
fn fill_holes(mask: Vec<Vec<u8>>) -> PyResult<Vec<Vec<u8>>> {
    Ok(plane_to_rows(&metrics::fill_holes(&plane_from_rows(mask)?)))
}

#[pyfunction]
#[pyo3(signature = (epoch, lambda_max=1.0, ramp_epochs=8))]
fn ramp_weight(epoch: usize, lambda_max: f64, ramp_epochs: usize) -> f64 {
    let s = ScheduleConfig {
        lambda_max,
        ramp_epochs,
        ..ScheduleConfig::default()
    };
    objective::ramp_weight(epoch, &s)
}

#[pyfunction]
#[pyo3(signature = (iteration, total_iterations, lr0=0.01))]
fn poly_lr(iteration: usize, total_iterations: usize, lr0: f64) -> PyResult<f64> {
    let s = ScheduleConfig {
        lr0,
        total_iterations,
        ..ScheduleConfig::default()
    };
    objective::poly_lr(iteration, &s).map_err(to_py)
}

#[pymodule]
fn tcsm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTransformOp>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PySegModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_directory, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_from_counts, m)?)?;
    m.add_function(wrap_pyfunction!(fill_holes, m)?)?;
    m.add_function(wrap_pyfunction!(ramp_weight, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    Ok(())
}
