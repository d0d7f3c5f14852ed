//! Python bindings. Structured results cross the boundary as plain Python
//! objects decoded from their JSON form.

use std::path::PathBuf;
use std::str::FromStr;

use mitobench::adapt::AdaptationMode;
use mitobench::backbone::{load_weights, BackboneSpec, VisionTransformer, WeightSource};
use mitobench::bench::{self as mb, BenchConfig, ReportFormat, StdKind, SweepOptions};
use mitobench::ingest::{
    generate_synthetic, import_manifest, resolve_image_root, DatasetManifest, FileImageStore, MappingConfig,
    SyntheticConfig,
};
use mitobench::splits::{make_cross_domain_plan, make_scaling_plan, verify_no_leakage, SplitPlan};
use mitobench::train::{one_cycle_lr as core_lr, OneCyclePolicy};
use mitobench::{metrics, Error};
use ndarray::Array4;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

create_exception!(mitobench, MitobenchError, PyException);
create_exception!(mitobench, ValidationError, PyValueError);

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        ValidationError::new_err(e.to_string())
    } else {
        MitobenchError::new_err(e.to_string())
    }
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for mitobench::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_py<'py, S: Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| MitobenchError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, what: &str, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| {
        py_err(Error::Parse {
            what: what.into(),
            message: e.to_string(),
        })
    })
}

/// `None`, a path to a TOML/JSON file, or a dict with the config fields.
fn bench_config(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<BenchConfig> {
    let Some(config) = config else {
        return Ok(BenchConfig::default());
    };
    if config.is_instance_of::<PyDict>() {
        let cfg: BenchConfig = from_py(py, "config", config)?;
        cfg.validate().py()?;
        return Ok(cfg);
    }
    let path: PathBuf = config.extract()?;
    BenchConfig::load(path).py()
}

fn parse_modes(modes: &[String]) -> PyResult<Vec<AdaptationMode>> {
    modes.iter().map(|m| AdaptationMode::from_str(m).py()).collect()
}

/// Annotation manifest: one record per labeled cell location.
#[pyclass(name = "Manifest", module = "mitobench")]
struct PyManifest {
    inner: DatasetManifest,
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyManifest {
            inner: DatasetManifest::load(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn image_root(&self) -> Option<&str> {
        self.inner.image_root.as_deref()
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    fn domains(&self) -> Vec<String> {
        self.inner.domains().into_iter().collect()
    }

    fn case_counts(&self) -> std::collections::BTreeMap<String, usize> {
        self.inner.case_counts()
    }

    fn label_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.label_counts())
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.records)
    }

    /// Keeps only the records of the given cases.
    fn subset(&self, cases: Vec<String>, name: Option<String>) -> Self {
        let mut inner = self.inner.clone();
        inner.records.retain(|r| cases.contains(&r.case_id));
        if let Some(n) = name {
            inner.name = n;
        }
        PyManifest { inner }
    }

    fn __repr__(&self) -> String {
        format!(
            "Manifest(name={:?}, records={}, domains={})",
            self.inner.name,
            self.inner.records.len(),
            self.inner.domains().len()
        )
    }
}

/// A split plan: fixed test cases, folds and training fractions.
#[pyclass(name = "SplitPlan", module = "mitobench")]
struct PySplitPlan {
    inner: SplitPlan,
}

#[pymethods]
impl PySplitPlan {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySplitPlan {
            inner: SplitPlan::load(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }

    #[getter]
    fn test_cases(&self) -> Vec<String> {
        self.inner.test_cases.iter().cloned().collect()
    }

    #[getter]
    fn fractions(&self) -> Vec<f64> {
        self.inner.fractions.clone()
    }

    #[getter]
    fn train_domain(&self) -> Option<String> {
        self.inner.train_domain.clone()
    }

    #[getter]
    fn num_folds(&self) -> usize {
        self.inner.folds.len()
    }

    /// `(fold_index, fraction)` for every training session.
    fn sessions(&self) -> Vec<(usize, f64)> {
        self.inner.sessions().into_iter().map(|s| (s.fold_index, s.fraction)).collect()
    }

    /// Leakage violations against `manifest`; empty when the plan is clean.
    fn leakage<'py>(&self, py: Python<'py>, manifest: &PyManifest) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &verify_no_leakage(&self.inner, &manifest.inner).violations)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

/// Append-only results store with per-record digests.
#[pyclass(name = "ResultsStore", module = "mitobench")]
struct PyResultsStore {
    inner: mb::ResultsStore,
}

#[pymethods]
impl PyResultsStore {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => mb::ResultsStore::open(p).py()?,
            None => mb::ResultsStore::in_memory(),
        };
        Ok(PyResultsStore { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, run_id: &str) -> bool {
        self.inner.contains(run_id)
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.records())
    }

    fn corrupt_lines(&self) -> Vec<usize> {
        self.inner.corrupt_lines().iter().map(|c| c.line).collect()
    }

    fn reload(&mut self) -> PyResult<()> {
        self.inner.reload().py()
    }

    /// Writes the summary tables (and figure for markdown) to `out_dir`.
    #[pyo3(signature = (out_dir, format="md", std="population"))]
    fn report(&self, out_dir: PathBuf, format: &str, std: &str) -> PyResult<Vec<PathBuf>> {
        let format = ReportFormat::from_str(format).py()?;
        let std: StdKind = serde_json::from_value(serde_json::Value::String(std.into()))
            .map_err(|_| ValidationError::new_err(format!("unknown std kind `{std}`")))?;
        Ok(mb::emit_report(self.inner.records(), format, &out_dir, std).py()?.files)
    }
}

/// A backbone with loaded weights, used as a frozen feature extractor.
#[pyclass(name = "Backbone", module = "mitobench")]
struct PyBackbone {
    inner: VisionTransformer<f32>,
}

#[pymethods]
impl PyBackbone {
    #[new]
    #[pyo3(signature = (name, weights=None, config=None))]
    fn new(py: Python<'_>, name: &str, weights: Option<&str>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let cfg = bench_config(py, config)?;
        let spec = cfg.registry().py()?.get(name).py()?;
        let source = match weights {
            Some(w) => w.to_string(),
            None => cfg.weights.get(name).cloned().unwrap_or_else(|| spec.weights_source.clone()),
        };
        let inner = load_weights::<f32>(&spec, &WeightSource::parse(&source).py()?).py()?;
        Ok(PyBackbone { inner })
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.spec().input_size
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.spec().feature_dim
    }

    fn checksum(&self) -> String {
        self.inner.base_checksum()
    }

    /// Embeds normalized images given as a flat `B*3*S*S` float list in
    /// channel-first order. Returns `B` rows of `feature_dim` floats.
    fn embed(&self, pixels: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        let images = images_from_flat(pixels, self.inner.spec().input_size).py()?;
        let out = self.inner.embed(images.view()).py()?;
        Ok(out.outer_iter().map(|r| r.to_vec()).collect())
    }
}

fn images_from_flat(pixels: Vec<f32>, size: usize) -> mitobench::Result<Array4<f32>> {
    let per = 3 * size * size;
    if pixels.is_empty() || pixels.len() % per != 0 {
        return Err(Error::Invalid {
            field: "pixels".into(),
            message: format!("length {} is not a multiple of 3*{size}*{size}", pixels.len()),
        });
    }
    let b = pixels.len() / per;
    Ok(Array4::from_shape_vec((b, 3, size, size), pixels).expect("length checked"))
}

/// Names of the registered backbones, built-in plus those in `config`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn backbones(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<Vec<String>> {
    let reg = bench_config(py, config)?.registry().py()?;
    Ok(reg.names().map(str::to_string).collect())
}

/// Spec dict for a small randomly initialised ViT, suitable for the
/// `backbones` list of a config.
#[pyfunction]
#[pyo3(signature = (name, depth=1, width=16, heads=2, mlp_dim=32, patch_grid=4, input_size=32))]
fn toy_backbone<'py>(
    py: Python<'py>,
    name: &str,
    depth: usize,
    width: usize,
    heads: usize,
    mlp_dim: usize,
    patch_grid: usize,
    input_size: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = BackboneSpec::toy(name, depth, width, heads, mlp_dim, patch_grid);
    spec.input_size = input_size;
    spec.validate().py()?;
    to_py(py, &spec)
}

#[pyfunction]
#[pyo3(signature = (source, mapping, image_root=None))]
fn import_dataset<'py>(
    py: Python<'py>,
    source: PathBuf,
    mapping: PathBuf,
    image_root: Option<PathBuf>,
) -> PyResult<(PyManifest, Bound<'py, PyAny>)> {
    let mapping = MappingConfig::load(mapping).py()?;
    let dims = image_root.map(FileImageStore::new);
    let (inner, report) = import_manifest(source, &mapping, dims.as_ref().map(|d| d as _)).py()?;
    Ok((PyManifest { inner }, to_py(py, &report)?))
}

/// Renders a synthetic dataset to PNG files under `out_dir` and returns its
/// manifest (also saved as `out_dir/manifest.jsonl`).
#[pyfunction]
#[pyo3(signature = (out_dir, config=None))]
fn synthesize(py: Python<'_>, out_dir: PathBuf, config: Option<&Bound<'_, PyAny>>) -> PyResult<PyManifest> {
    let cfg: SyntheticConfig = match config {
        Some(c) => from_py(py, "synthetic config", c)?,
        None => SyntheticConfig::default(),
    };
    let mut ds = generate_synthetic(&cfg).py()?;
    ds.store.save_png(&out_dir).py()?;
    ds.manifest.image_root = Some(out_dir.display().to_string());
    ds.manifest.save(out_dir.join("manifest.jsonl")).py()?;
    Ok(PyManifest { inner: ds.manifest })
}

#[pyfunction]
#[pyo3(signature = (manifest, config=None))]
fn scaling_plan(py: Python<'_>, manifest: &PyManifest, config: Option<&Bound<'_, PyAny>>) -> PyResult<PySplitPlan> {
    let cfg = bench_config(py, config)?;
    Ok(PySplitPlan {
        inner: make_scaling_plan(&manifest.inner, &cfg.scaling, cfg.seed).py()?,
    })
}

#[pyfunction]
#[pyo3(signature = (manifest, domain=None, config=None))]
fn crossdomain_plans(
    py: Python<'_>,
    manifest: &PyManifest,
    domain: Option<&str>,
    config: Option<&Bound<'_, PyAny>>,
) -> PyResult<Vec<PySplitPlan>> {
    let cfg = bench_config(py, config)?;
    let plans = match domain {
        Some(d) => vec![make_cross_domain_plan(&manifest.inner, d, &cfg.crossdomain, cfg.seed).py()?],
        None => mb::cross_domain_plans(&manifest.inner, &cfg).py()?,
    };
    Ok(plans.into_iter().map(|inner| PySplitPlan { inner }).collect())
}

#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    cross_domain: bool,
    manifest: &PyManifest,
    models: Vec<String>,
    modes: Vec<String>,
    store: &mut PyResultsStore,
    config: Option<&Bound<'_, PyAny>>,
    image_root: Option<PathBuf>,
    artifacts: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = bench_config(py, config)?;
    let modes = parse_modes(&modes)?;
    let tiles = FileImageStore::new(resolve_image_root(image_root.as_deref(), manifest.inner.image_root.as_deref()))
        .with_capacity(64);
    let opts = SweepOptions { artifacts };
    let run = if cross_domain {
        mb::run_cross_domain_experiment
    } else {
        mb::run_scaling_experiment
    };
    let report = run(&manifest.inner, &tiles, &models, &modes, &cfg, &mut store.inner, &opts).py()?;
    to_py(py, &report)
}

/// Runs the dataset-scaling sweep and returns the sweep report.
#[pyfunction]
#[pyo3(signature = (manifest, models, store, modes=vec!["probe".into(), "lora".into()], config=None, image_root=None, artifacts=None))]
#[allow(clippy::too_many_arguments)]
fn run_scaling<'py>(
    py: Python<'py>,
    manifest: &PyManifest,
    models: Vec<String>,
    store: &mut PyResultsStore,
    modes: Vec<String>,
    config: Option<&Bound<'_, PyAny>>,
    image_root: Option<PathBuf>,
    artifacts: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    sweep(py, false, manifest, models, modes, store, config, image_root, artifacts)
}

/// Runs the cross-domain sweep and returns the sweep report.
#[pyfunction]
#[pyo3(signature = (manifest, models, store, modes=vec!["probe".into(), "lora".into()], config=None, image_root=None, artifacts=None))]
#[allow(clippy::too_many_arguments)]
fn run_crossdomain<'py>(
    py: Python<'py>,
    manifest: &PyManifest,
    models: Vec<String>,
    store: &mut PyResultsStore,
    modes: Vec<String>,
    config: Option<&Bound<'_, PyAny>>,
    image_root: Option<PathBuf>,
    artifacts: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    sweep(py, true, manifest, models, modes, store, config, image_root, artifacts)
}

/// Scores every annotation of `test` with a saved checkpoint and appends
/// the record to `store`.
#[pyfunction]
#[pyo3(signature = (checkpoint, test, store, config=None, image_root=None))]
fn evaluate_checkpoint<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    test: &PyManifest,
    store: &mut PyResultsStore,
    config: Option<&Bound<'_, PyAny>>,
    image_root: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = bench_config(py, config)?;
    let tiles = FileImageStore::new(resolve_image_root(image_root.as_deref(), test.inner.image_root.as_deref()));
    let record = mb::evaluate_checkpoint(&checkpoint, &test.inner, &tiles, &cfg, &mut store.inner).py()?;
    to_py(py, &record)
}

#[pyfunction]
fn auroc(labels: Vec<bool>, scores: Vec<f64>) -> PyResult<f64> {
    metrics::auroc(&labels, &scores).py()
}

#[pyfunction]
fn balanced_accuracy(labels: Vec<bool>, predictions: Vec<bool>) -> PyResult<f64> {
    metrics::balanced_accuracy(&labels, &predictions).py()
}

#[pyfunction]
fn weighted_f1(labels: Vec<bool>, predictions: Vec<bool>) -> PyResult<f64> {
    metrics::weighted_f1(&labels, &predictions).py()
}

/// All metrics at once for probability scores thresholded at `threshold`.
#[pyfunction]
#[pyo3(signature = (labels, scores, threshold=0.5))]
fn evaluate_scores<'py>(
    py: Python<'py>,
    labels: Vec<bool>,
    scores: Vec<f64>,
    threshold: f64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &metrics::evaluate_scores(&labels, &scores, threshold).py()?)
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, max_lr, pct_start=0.3, div_factor=25.0, final_div=1e4))]
fn one_cycle_lr(
    step: usize,
    total_steps: usize,
    max_lr: f64,
    pct_start: f64,
    div_factor: f64,
    final_div: f64,
) -> PyResult<f64> {
    let policy = OneCyclePolicy {
        pct_start,
        div_factor,
        final_div,
    };
    core_lr(step, total_steps, max_lr, &policy).py()
}

#[pymodule(name = "mitobench")]
pub fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("MitobenchError", py.get_type::<MitobenchError>())?;
    m.add("ValidationError", py.get_type::<ValidationError>())?;
    m.add_class::<PyManifest>()?;
    m.add_class::<PySplitPlan>()?;
    m.add_class::<PyResultsStore>()?;
    m.add_class::<PyBackbone>()?;
    m.add_function(wrap_pyfunction!(backbones, m)?)?;
    m.add_function(wrap_pyfunction!(toy_backbone, m)?)?;
    m.add_function(wrap_pyfunction!(import_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_plan, m)?)?;
    m.add_function(wrap_pyfunction!(crossdomain_plans, m)?)?;
    m.add_function(wrap_pyfunction!(run_scaling, m)?)?;
    m.add_function(wrap_pyfunction!(run_crossdomain, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_scores, m)?)?;
    m.add_function(wrap_pyfunction!(one_cycle_lr, m)?)?;
    Ok(())
}
