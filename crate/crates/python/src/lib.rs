use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dgt_core::config::ExperimentConfig;
use dgt_core::lifelong::{self, AccessGuard, LifelongConfig, ProtocolMode};
use dgt_core::metrics::{self, CfMode, ScoreMatrix};
use dgt_core::micronet::{NetConfig, NetworkParams};
use dgt_core::taskgen::{self, DomainSpec};
use dgt_core::tree::{self, DgtTree, NodeId, TreeConfig};
use dgt_core::{DgtError, Tensor};

fn err(e: DgtError) -> PyErr {
    match e.exit_code() {
        2 => PyIOError::new_err(e.to_string()),
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn lifelong_config(toml: Option<&str>) -> PyResult<LifelongConfig> {
    match toml {
        Some(t) => Ok(ExperimentConfig::from_toml(t).map_err(err)?.lifelong()),
        None => Ok(LifelongConfig::default()),
    }
}

/// Flat row-major data and `[C, H, W]` shape.
fn tensor_parts(t: &Tensor) -> (Vec<f32>, Vec<usize>) {
    (t.data().to_vec(), t.shape().to_vec())
}

#[pyclass(name = "Video", module = "dgt", from_py_object)]
#[derive(Clone)]
struct PyVideo {
    inner: lifelong::Video,
}

#[pymethods]
impl PyVideo {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn domain(&self) -> String {
        self.inner.domain_tag.clone()
    }

    #[getter]
    fn num_frames(&self) -> usize {
        self.inner.num_frames()
    }

    #[getter]
    fn num_objects(&self) -> usize {
        self.inner.num_objects()
    }

    fn labelled_frames(&self) -> Vec<usize> {
        self.inner.labelled_frames()
    }

    /// `(data, shape)` of frame `t`.
    fn frame(&self, t: usize) -> PyResult<(Vec<f32>, Vec<usize>)> {
        self.inner
            .frames
            .get(t)
            .map(tensor_parts)
            .ok_or_else(|| PyValueError::new_err(format!("frame {t} out of range")))
    }

    /// Label map of frame `t`, or `None` when it is unlabelled.
    fn label_map(&self, t: usize) -> Option<(Vec<f32>, Vec<usize>)> {
        self.inner.label_map(t).as_ref().map(tensor_parts)
    }

    fn with_shots(&self, shots: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_shots(shots).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Video(id={:?}, frames={}, objects={})",
            self.inner.id,
            self.inner.num_frames(),
            self.inner.num_objects()
        )
    }
}

/// Videos of a named synthetic domain.
#[pyfunction]
#[pyo3(signature = (preset, n_videos, seed, width=64, height=48))]
fn generate_domain(preset: &str, n_videos: usize, seed: u64, width: usize, height: usize) -> PyResult<Vec<PyVideo>> {
    let mut spec = DomainSpec::preset(preset).map_err(err)?;
    spec.resolution = (width, height);
    Ok(taskgen::generate_domain(&spec, n_videos, seed)
        .map_err(err)?
        .into_iter()
        .map(|g| PyVideo { inner: g.video })
        .collect())
}

#[pyfunction]
#[pyo3(signature = (path, width=None, height=None))]
fn load_folder_dataset(path: PathBuf, width: Option<usize>, height: Option<usize>) -> PyResult<Vec<PyVideo>> {
    let res = width.zip(height);
    Ok(taskgen::load_folder_dataset(&path, res)
        .map_err(err)?
        .into_iter()
        .map(|inner| PyVideo { inner })
        .collect())
}

#[pyfunction]
fn write_folder_dataset(videos: Vec<PyVideo>, path: PathBuf) -> PyResult<()> {
    let v: Vec<_> = videos.into_iter().map(|v| v.inner).collect();
    taskgen::write_folder_dataset(&v, &path).map_err(err)
}

fn tensor(data: Vec<f32>, h: usize, w: usize) -> PyResult<Tensor> {
    Tensor::new(vec![1, h, w], data).map_err(err)
}

/// Region similarity of two binary masks given as flat `h * w` lists.
#[pyfunction]
fn jaccard(pred: Vec<f32>, gt: Vec<f32>, height: usize, width: usize) -> PyResult<f64> {
    metrics::jaccard(&tensor(pred, height, width)?, &tensor(gt, height, width)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, height, width, tolerance_px=None))]
fn boundary_f(pred: Vec<f32>, gt: Vec<f32>, height: usize, width: usize, tolerance_px: Option<usize>) -> PyResult<f64> {
    let tol = tolerance_px.unwrap_or_else(|| metrics::default_tolerance(height, width));
    metrics::boundary_f(&tensor(pred, height, width)?, &tensor(gt, height, width)?, tol).map_err(err)
}

/// `(F, CF)` of a score matrix; `rows[v][i]` with `None` for missing entries.
#[pyfunction]
#[pyo3(signature = (rows, cf_mode="retrospective"))]
fn aggregates(rows: Vec<Vec<Option<f64>>>, cf_mode: &str) -> PyResult<(f64, f64)> {
    let ids = (0..rows.len()).map(|i| i.to_string()).collect();
    let m = ScoreMatrix::from_rows(ids, rows).map_err(err)?;
    let mode: CfMode = cf_mode.parse().map_err(err)?;
    Ok((metrics::f_aggregate(&m).map_err(err)?.1, metrics::cf_aggregate(&m, mode).map_err(err)?.1))
}

#[pyclass(name = "Tree", module = "dgt")]
struct PyTree {
    inner: DgtTree,
}

impl PyTree {
    fn videos(videos: Vec<PyVideo>) -> Vec<lifelong::Video> {
        videos.into_iter().map(|v| v.inner).collect()
    }

    fn name(&self, id: NodeId) -> PyResult<String> {
        self.inner.path_name(id).map_err(err)
    }
}

#[pymethods]
impl PyTree {
    /// Root-only tree over a freshly initialised network.
    #[new]
    #[pyo3(signature = (seed=0, width=64, height=48, max_depth=None))]
    fn new(seed: u64, width: usize, height: usize, max_depth: Option<usize>) -> PyResult<Self> {
        let net = NetConfig {
            width,
            height,
            ..NetConfig::default()
        };
        let params = NetworkParams::init(&net, seed).map_err(err)?;
        Ok(Self {
            inner: DgtTree::from_params(TreeConfig { max_depth }, params).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tree::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        tree::save(&self.inner, &path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(stored, per_inference)` parameter counts.
    fn param_count(&self) -> (usize, usize) {
        self.inner.param_count()
    }

    fn path_names(&self) -> PyResult<Vec<String>> {
        self.inner.breadth_first().into_iter().map(|id| self.name(id)).collect()
    }

    #[getter]
    fn shared_frozen(&self) -> bool {
        self.inner.shared_frozen()
    }

    fn to_dot(&self) -> PyResult<String> {
        tree::to_dot(&self.inner).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        tree::to_json(&self.inner).map_err(err)
    }

    /// `config` is an experiment TOML document; library defaults when omitted.
    #[pyo3(signature = (videos, config=None))]
    fn pretrain(&mut self, py: Python<'_>, videos: Vec<PyVideo>, config: Option<&str>) -> PyResult<usize> {
        let cfg = lifelong_config(config)?;
        let v = Self::videos(videos);
        let t = &mut self.inner;
        let log = py.detach(|| lifelong::pretrain_root(t, &v, &cfg)).map_err(err)?;
        Ok(log.events().len())
    }

    /// Builds the base tree; returns the number of nodes.
    #[pyo3(signature = (videos, config=None))]
    fn build(&mut self, py: Python<'_>, videos: Vec<PyVideo>, config: Option<&str>) -> PyResult<usize> {
        let cfg = lifelong_config(config)?;
        let v = Self::videos(videos);
        let t = &mut self.inner;
        py.detach(|| lifelong::sequential_build(t, &v, &cfg, &AccessGuard::new(), None))
            .map_err(err)?;
        Ok(self.inner.len())
    }

    /// Adds one video; returns `(path_name, created)`.
    #[pyo3(signature = (video, shots, config=None))]
    fn grow(&mut self, py: Python<'_>, video: PyVideo, shots: usize, config: Option<&str>) -> PyResult<(String, bool)> {
        let cfg = lifelong_config(config)?;
        let t = &mut self.inner;
        let (o, _) = py
            .detach(|| lifelong::grow(t, &video.inner, &cfg, shots, &AccessGuard::new()))
            .map_err(err)?;
        Ok((self.name(o.node)?, o.created))
    }

    /// `(path_name, label maps)`; each map is a flat `h * w` list.
    fn segment(&self, py: Python<'_>, video: PyVideo) -> PyResult<(String, Vec<Vec<f32>>)> {
        let t = &self.inner;
        let seg = py.detach(|| lifelong::segment_video(t, &video.inner)).map_err(err)?;
        Ok((self.name(seg.node)?, seg.labels.iter().map(|l| l.data().to_vec()).collect()))
    }

    /// `(path_name, F)` with a single node selection.
    fn evaluate(&self, py: Python<'_>, video: PyVideo) -> PyResult<(String, f64)> {
        let t = &self.inner;
        let (node, f) = py.detach(|| lifelong::evaluate_with_tree(t, &video.inner)).map_err(err)?;
        Ok((self.name(node)?, f))
    }

    /// Sequential run over `datasets`; returns the score matrix rows.
    #[pyo3(signature = (datasets, config=None, mode="dgt"))]
    fn run_protocol(
        &mut self,
        py: Python<'_>,
        datasets: Vec<Vec<PyVideo>>,
        config: Option<&str>,
        mode: &str,
    ) -> PyResult<Vec<Vec<Option<f64>>>> {
        let cfg = lifelong_config(config)?;
        let mode: ProtocolMode = mode.parse().map_err(err)?;
        let sets: Vec<Vec<lifelong::Video>> = datasets.into_iter().map(Self::videos).collect();
        let t = &mut self.inner;
        let out = py
            .detach(|| lifelong::run_sequential_protocol(t, &sets, &cfg, mode, &AccessGuard::new()))
            .map_err(err)?;
        let n = out.matrix.len();
        Ok((0..n).map(|v| (0..n).map(|i| out.matrix.get(v, i)).collect()).collect())
    }
}

#[pymodule]
fn dgt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVideo>()?;
    m.add_class::<PyTree>()?;
    m.add_function(wrap_pyfunction!(generate_domain, m)?)?;
    m.add_function(wrap_pyfunction!(load_folder_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_folder_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_f, m)?)?;
    m.add_function(wrap_pyfunction!(aggregates, m)?)?;
    Ok(())
}
