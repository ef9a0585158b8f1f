//! Python bindings: configuration parsing, schedules, masking, the synthetic
//! dataset, the backbone model, and PCA feature analysis.

use jepa::config::TrainConfig;
use jepa::masking::MaskSet;
use jepa::model::ScottVit;
use jepa::module::Module;
use jepa::pca::{self, FeatureMatrix};
use jepa::tensor::Tensor;
use jepa::trainer::ModelState;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn err(e: jepa::Error) -> PyErr {
    match e {
        jepa::Error::Io(_) | jepa::Error::Checkpoint(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_config(text: Option<&str>) -> PyResult<TrainConfig> {
    let cfg = match text {
        Some(text) => TrainConfig::parse(text).map_err(err)?,
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pyfunction]
fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Canonical (sorted key=value) form of a config file.
#[pyfunction]
#[pyo3(signature = (text=None))]
fn config_canonical(text: Option<&str>) -> PyResult<String> {
    Ok(parse_config(text)?.canonical())
}

/// Hex digest of the canonical config; stable under key reordering.
#[pyfunction]
#[pyo3(signature = (text=None))]
fn config_digest(text: Option<&str>) -> PyResult<String> {
    Ok(parse_config(text)?.digest())
}

/// Learning rate, weight decay, and EMA momentum at schedule position
/// `frac` in [0, 1].
#[pyfunction]
#[pyo3(signature = (frac, config=None))]
fn schedule_at(frac: f64, config: Option<&str>) -> PyResult<(f64, f64, f64)> {
    let cfg = parse_config(config)?;
    Ok((
        jepa::optim::lr_at(frac, &cfg),
        jepa::optim::wd_at(frac, &cfg),
        jepa::optim::ema_at(frac, &cfg),
    ))
}

/// Masked patch indices for a blockwise mask.
#[pyfunction]
fn blockwise_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jepa::masking::blockwise_mask(grid_h, grid_w, ratio, &mut rng).masked_indices()
}

/// Masked patch indices for an independent random mask.
#[pyfunction]
fn random_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jepa::masking::random_mask(grid_h, grid_w, ratio, &mut rng).masked_indices()
}

/// Fraction of masked patches whose 4-neighborhood is also masked.
#[pyfunction]
fn mask_contiguity(grid_h: usize, grid_w: usize, indices: Vec<usize>) -> f64 {
    MaskSet::from_indices(grid_h, grid_w, indices).contiguity()
}

/// Synthetic dataset: per-sample (label, pixels) with pixels flattened
/// channel-major as [3 * size * size] floats in [0, 1].
#[pyfunction]
fn synth_dataset(n: usize, classes: usize, size: usize, seed: u64) -> PyResult<Vec<(usize, Vec<f32>)>> {
    let dataset = jepa::data::synth_dataset::<f32>(n, classes, size, seed).map_err(err)?;
    Ok(dataset
        .samples
        .iter()
        .map(|s| (s.label.unwrap_or(0), s.pixels.data().to_vec()))
        .collect())
}

/// PCA over row-major feature rows: returns (components, projections,
/// explained_variance), each flattened row-major.
#[pyfunction]
fn pca_project(rows: Vec<Vec<f64>>, k: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = rows.len();
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let matrix = FeatureMatrix::new(data, n, dim, (0..n).map(|i| (0, i)).collect()).map_err(err)?;
    let result = pca::pca(&matrix, k).map_err(err)?;
    Ok((result.components, result.projections, result.explained_variance))
}

/// The backbone: a sparse convolutional stem feeding a transformer encoder.
/// Unsendable: tensors share storage through non-atomic reference counts.
#[pyclass(unsendable)]
struct Model {
    inner: ScottVit<f32>,
    image_size: usize,
}

#[pymethods]
impl Model {
    /// Fresh model from a config text (or the defaults) and a seed.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Model {
            inner: ScottVit::init(cfg.model(), &mut rng).map_err(err)?,
            image_size: cfg.image_size,
        })
    }

    /// The EMA target encoder of a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let state = ModelState::<f32>::load(&path).map_err(err)?;
        Ok(Model { inner: state.target.clone(), image_size: state.cfg.image_size })
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn embed_dim(&self) -> usize {
        self.inner.cfg.backbone.embed_dim
    }

    fn image_size(&self) -> usize {
        self.image_size
    }

    /// Token features `[N][d]` for a full image given as flattened
    /// channel-major [3 * size * size] pixels.
    fn forward_dense(&self, pixels: Vec<f32>, size: usize) -> PyResult<Vec<Vec<f32>>> {
        let image = Tensor::from_vec(pixels, &[3, size, size]).map_err(err)?;
        let out = self.inner.forward_dense(&image).map_err(err)?;
        let d = out.shape()[1];
        Ok(out.data().chunks(d).map(|row| row.to_vec()).collect())
    }

    /// Context-encoder features with the given patches masked out.
    fn forward_masked(
        &self,
        pixels: Vec<f32>,
        size: usize,
        masked_indices: Vec<usize>,
    ) -> PyResult<Vec<Vec<f32>>> {
        let image = Tensor::from_vec(pixels, &[3, size, size]).map_err(err)?;
        let grid = size / 16;
        let mask = MaskSet::from_indices(grid, grid, masked_indices);
        let out = self.inner.forward_context(&image, &mask).map_err(err)?;
        let d = out.shape()[1];
        Ok(out.data().chunks(d).map(|row| row.to_vec()).collect())
    }
}

#[pymodule]
fn jepa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(config_canonical, m)?)?;
    m.add_function(wrap_pyfunction!(config_digest, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_at, m)?)?;
    m.add_function(wrap_pyfunction!(blockwise_mask, m)?)?;
    m.add_function(wrap_pyfunction!(random_mask, m)?)?;
    m.add_function(wrap_pyfunction!(mask_contiguity, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(pca_project, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
