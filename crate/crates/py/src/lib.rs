//! Python bindings: the trained-model surface (forward, predict, train,
//! evaluate, infer) plus the small numeric primitives that are useful to
//! poke at interactively (scan, pooling ladder, metrics, schedule).
//!
//! Tensors cross the boundary as flat row-major lists with explicit shapes;
//! no numpy dependency.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pymamba::checkpoint;
use pymamba::config::RunConfig;
use pymamba::data::raster::{load_image, save_mask, ImageBuf};
use pymamba::data::synth;
use pymamba::decoder;
use pymamba::model::{Model as CoreModel, ModelConfig, Variant};
use pymamba::schedule::LrSchedule;
use pymamba::ssm::scan::{scan_parallel, scan_sequential, ScanElem};
use pymamba::ssm::DEFAULT_CHUNK;
use pymamba::trainer::{self, predict_mask, Trainer};
use pymamba::tta::TtaConfig;
use pymamba::SplitRng;

fn err(e: pymamba::Error) -> PyErr {
    match e {
        pymamba::Error::Config(_) | pymamba::Error::Usage(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// The segmentation network, fixed to single precision.
#[pyclass(unsendable)]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    /// Builds a randomly initialized desk-scale model.
    #[new]
    #[pyo3(signature = (classes, input_size = 64, variant = "full", seed = 0))]
    fn new(classes: usize, input_size: usize, variant: &str, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig {
            input_size,
            variant: Variant::parse(variant).map_err(err)?,
            ..ModelConfig::desk(classes)
        };
        Ok(Model { inner: CoreModel::init(cfg, seed).map_err(err)? })
    }

    /// Loads weights and architecture from a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let loaded = checkpoint::load(&path).map_err(err)?;
        if loaded.config_text.trim().is_empty() {
            return Err(PyValueError::new_err("checkpoint has no embedded run config"));
        }
        let cfg = RunConfig::parse(&loaded.config_text).map_err(err)?;
        let inner = CoreModel::init(cfg.model.clone(), cfg.seed).map_err(err)?;
        loaded.apply(&inner, None).map_err(err)?;
        Ok(Model { inner })
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn num_classes(&self) -> usize {
        self.inner.cfg.num_classes
    }

    /// Eval-mode forward. `image` is a flat [3, h, w] float list in [0, 1];
    /// returns `(logits, shape)` with logits flat row-major [K, h, w].
    fn forward(&self, image: Vec<f32>, h: usize, w: usize) -> PyResult<(Vec<f32>, Vec<usize>)> {
        let x = self.image_tensor(image, h, w)?;
        let mut rng = SplitRng::with_stream(0, 0);
        let logits = self.inner.forward(&x, false, &mut rng).map_err(err)?;
        Ok((logits.to_vec(), logits.shape().to_vec()))
    }

    /// Argmax class map for one image, flat row-major [h, w].
    fn predict(&self, image: Vec<f32>, h: usize, w: usize) -> PyResult<Vec<u32>> {
        let x = self.image_tensor(image, h, w)?;
        let mut rng = SplitRng::with_stream(0, 0);
        let logits = self.inner.forward(&x, false, &mut rng).map_err(err)?;
        Ok(predict_mask(&logits).map_err(err)?.px)
    }
}

impl Model {
    fn image_tensor(&self, image: Vec<f32>, h: usize, w: usize) -> PyResult<pymamba::Tensor<f32>> {
        if image.len() != 3 * h * w {
            return Err(PyValueError::new_err(format!(
                "image has {} values, expected 3*{h}*{w}",
                image.len()
            )));
        }
        Ok(ImageBuf { h, w, px: image }.to_tensor())
    }
}

/// First-order recurrence h_t = a_t * h_{t-1} + b_t over interleaved lanes,
/// returning all states. `parallel` switches to the work-efficient tree scan.
#[pyfunction]
#[pyo3(signature = (a, b, lanes = 1, parallel = false))]
fn scan(a: Vec<f64>, b: Vec<f64>, lanes: usize, parallel: bool) -> PyResult<Vec<f64>> {
    if a.len() != b.len() || lanes == 0 || a.len() % lanes != 0 {
        return Err(PyValueError::new_err(format!(
            "need equal-length a/b divisible by lanes, got {} / {} / {lanes}",
            a.len(),
            b.len()
        )));
    }
    let l = a.len() / lanes;
    let mut elems: Vec<ScanElem<f64>> =
        a.iter().zip(b.iter()).map(|(&a, &b)| ScanElem { a, b }).collect();
    if parallel {
        scan_parallel(&mut elems, l, lanes, DEFAULT_CHUNK);
    } else {
        scan_sequential(&mut elems, l, lanes);
    }
    Ok(elems.iter().map(|e| e.b).collect())
}

/// Pooling-scale ladder used by the dense pyramid block.
#[pyfunction]
fn dspp_scales(n: usize) -> PyResult<Vec<usize>> {
    decoder::dspp_scales(n).map_err(err)
}

/// Learning rate at a global step: linear warmup then polynomial decay.
#[pyfunction]
fn lr_at(base: f64, warmup_steps: u64, total_steps: u64, step: u64) -> f64 {
    LrSchedule::new(base, warmup_steps, total_steps).lr_at(step)
}

/// Writes a synthetic dataset plus manifest; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, n = 16, size = 64, classes = 4))]
fn synth_dataset(out_dir: PathBuf, seed: u64, n: usize, size: usize, classes: usize) -> PyResult<String> {
    synth::synth_dataset(&out_dir, seed, n, size, classes).map_err(err)?;
    Ok(out_dir.join("manifest.toml").display().to_string())
}

/// Confusion-matrix metrics for one ground-truth/prediction pair.
#[pyfunction]
#[pyo3(signature = (gt, pred, classes, ignore = None))]
fn segmentation_metrics(
    py: Python<'_>,
    gt: Vec<u32>,
    pred: Vec<u32>,
    classes: usize,
    ignore: Option<u32>,
) -> PyResult<Py<PyDict>> {
    let mut cm = pymamba::metrics::ConfusionMatrix::new(classes).map_err(err)?;
    cm.record(&gt, &pred, ignore).map_err(err)?;
    let m = pymamba::metrics::metrics(&cm).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("miou", m.miou)?;
    d.set_item("oa", m.oa)?;
    d.set_item("f1", m.f1)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("per_class_iou", m.per_class_iou)?;
    Ok(d.into())
}

fn load_samples(path: &Path, classes: usize) -> PyResult<Vec<(ImageBuf, pymamba::data::raster::MaskBuf)>> {
    let mf = pymamba::data::manifest::DatasetManifest::load(path).map_err(err)?;
    if mf.classes != classes {
        return Err(PyValueError::new_err(format!(
            "manifest has {} classes, config says {classes}",
            mf.classes
        )));
    }
    (0..mf.len()).map(|i| mf.load_sample(i).map_err(err)).collect()
}

/// Full training run from a config file; returns the summary as a dict.
#[pyfunction]
fn train(py: Python<'_>, config: PathBuf) -> PyResult<Py<PyDict>> {
    let (cfg, echo) = RunConfig::load(&config).map_err(err)?;
    let train = load_samples(&cfg.train_manifest, cfg.classes)?;
    let val = match &cfg.val_manifest {
        Some(p) => load_samples(p, cfg.classes)?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| PyRuntimeError::new_err(format!("{}: {e}", cfg.out_dir.display())))?;
    let model = CoreModel::<f32>::init(cfg.model.clone(), cfg.seed).map_err(err)?;
    let mut tr = Trainer::new(model, cfg.train_options(echo), train.len()).map_err(err)?;
    let report = tr.fit(&train, &val, &mut |_| {}).map_err(err)?;

    let d = PyDict::new(py);
    d.set_item("epochs_run", report.epochs_run)?;
    d.set_item("stopped_early", report.stopped_early)?;
    d.set_item("best_miou", report.best_miou)?;
    d.set_item("best_epoch", report.best_epoch)?;
    d.set_item("steps", report.log.len())?;
    d.set_item("final_loss", report.log.last().map(|l| l.total))?;
    d.set_item("out_dir", cfg.out_dir.display().to_string())?;
    Ok(d.into())
}

/// Evaluates a checkpoint on the config's validation (or train) split.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, tta = false))]
fn evaluate(py: Python<'_>, config: PathBuf, checkpoint: PathBuf, tta: bool) -> PyResult<Py<PyDict>> {
    let (cfg, _) = RunConfig::load(&config).map_err(err)?;
    let split = cfg.val_manifest.as_ref().unwrap_or(&cfg.train_manifest).clone();
    let data = load_samples(&split, cfg.classes)?;
    let loaded = checkpoint::load(&checkpoint).map_err(err)?;
    let model = CoreModel::<f32>::init(cfg.model.clone(), cfg.seed).map_err(err)?;
    loaded.apply(&model, None).map_err(err)?;
    let tta_cfg = if tta {
        let t = TtaConfig::full();
        t.validate(cfg.model.input_size, cfg.model.input_size).map_err(err)?;
        Some(t)
    } else {
        None
    };
    let (m, cm) = trainer::evaluate(&model, &data, cfg.ignore, tta_cfg.as_ref()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("miou", m.miou)?;
    d.set_item("oa", m.oa)?;
    d.set_item("f1", m.f1)?;
    d.set_item("per_class_iou", m.per_class_iou)?;
    d.set_item("ignored", cm.ignored)?;
    d.set_item("tiles", data.len())?;
    Ok(d.into())
}

/// Segments one raster with a trained checkpoint and writes a P5 mask.
#[pyfunction]
fn infer(checkpoint: PathBuf, image: PathBuf, out: PathBuf) -> PyResult<()> {
    let model = Model::load(checkpoint)?;
    let img = load_image(&image).map_err(err)?;
    let mask = model.predict(img.px.clone(), img.h, img.w)?;
    save_mask(
        &out,
        &pymamba::data::raster::MaskBuf { h: img.h, w: img.w, px: mask },
    )
    .map_err(err)?;
    Ok(())
}

#[pymodule]
fn pymamba_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(scan, m)?)?;
    m.add_function(wrap_pyfunction!(dspp_scales, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(segmentation_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add("CLASS_NAMES", synth::CLASS_NAMES.to_vec())?;
    Ok(())
}
