//! Python bindings for the `cotar` localization library.
//!
//! ```python
//! import cotar
//! refs = cotar.ReferenceLayout.corners(50.0)
//! truth = cotar.PositionVector([(24.5, 24.5), (25.5, 24.5)])
//! ch = cotar.ChannelParams("clear")
//! obs = cotar.synthesize(truth, refs, "cotar", ch, seed=1)
//! est = cotar.solve(cotar.PositionVector([(24, 25), (26, 25)]), obs, refs, ch)
//! ```

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cotar::error::Error;
use cotar::scenario::Scheme;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { .. } | Error::Domain(_) | Error::DegenerateGeometry { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_scheme(name: &str) -> PyResult<Scheme> {
    Scheme::parse(name).ok_or_else(|| {
        PyValueError::new_err(format!(
            "unknown scheme {name:?}; expected one of rss_only, toa_only, hybrid, cotar"
        ))
    })
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Path-loss and TOA noise parameters of one channel condition.
#[pyclass(name = "ChannelParams", module = "cotar", skip_from_py_object)]
#[derive(Clone)]
pub struct PyChannel {
    inner: cotar::channel::ChannelParams,
}

#[pymethods]
impl PyChannel {
    /// `preset` is "clear" or "obstructed".
    #[new]
    #[pyo3(signature = (preset = "clear"))]
    fn new(preset: &str) -> PyResult<Self> {
        cotar::channel::ChannelParams::preset(preset)
            .map(|inner| PyChannel { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown channel preset {preset:?}")))
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.inner.eta
    }

    #[getter]
    fn g0_db(&self) -> f64 {
        self.inner.g0_db
    }

    #[getter]
    fn sigma_g_db(&self) -> f64 {
        self.inner.sigma_g_db
    }

    #[getter]
    fn sigma_tau_s(&self) -> f64 {
        self.inner.sigma_tau_s
    }

    #[getter]
    fn k_factor(&self) -> f64 {
        self.inner.k_factor
    }

    /// Same channel with both noise terms set to zero.
    fn noiseless(&self) -> Self {
        PyChannel {
            inner: self.inner.noiseless(),
        }
    }

    /// Range standard deviation of one TOA reading, in meters.
    fn toa_range_std(&self) -> f64 {
        self.inner.toa_range_std()
    }

    fn mean_path_loss_db(&self, d: f64) -> PyResult<f64> {
        self.inner.mean_path_loss_db(d).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "ChannelParams(eta={}, sigma_g_db={}, sigma_tau_s={:e}, k_factor={})",
            self.inner.eta, self.inner.sigma_g_db, self.inner.sigma_tau_s, self.inner.k_factor
        )
    }
}

/// Known anchor coordinates.
#[pyclass(name = "ReferenceLayout", module = "cotar", skip_from_py_object)]
#[derive(Clone)]
pub struct PyRefs {
    inner: cotar::scenario::ReferenceLayout,
}

#[pymethods]
impl PyRefs {
    #[new]
    fn new(points: Vec<(f64, f64)>) -> PyResult<Self> {
        cotar::scenario::ReferenceLayout::from_points(&points)
            .map(|inner| PyRefs { inner })
            .map_err(to_py)
    }

    /// Four anchors on the corners of an `side` × `side` square.
    #[staticmethod]
    fn corners(side: f64) -> Self {
        PyRefs {
            inner: cotar::scenario::ReferenceLayout::corners(side),
        }
    }

    #[staticmethod]
    fn grid(side: f64, pitch: f64) -> PyResult<Self> {
        cotar::scenario::ReferenceLayout::grid(side, pitch)
            .map(|inner| PyRefs { inner })
            .map_err(to_py)
    }

    fn points(&self) -> Vec<(f64, f64)> {
        self.inner.nodes().collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("ReferenceLayout({:?})", self.points())
    }
}

/// Coordinates of N target nodes.
#[pyclass(name = "PositionVector", module = "cotar", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPositions {
    inner: cotar::scenario::PositionVector,
}

#[pymethods]
impl PyPositions {
    #[new]
    fn new(points: Vec<(f64, f64)>) -> PyResult<Self> {
        cotar::scenario::PositionVector::from_points(&points)
            .map(|inner| PyPositions { inner })
            .map_err(to_py)
    }

    /// `n` nodes on a square grid of `spacing`, centroid at `center`.
    #[staticmethod]
    #[pyo3(signature = (n, center, spacing = 1.0))]
    fn square(n: usize, center: (f64, f64), spacing: f64) -> Self {
        let formation = cotar::scenario::square_formation(n, spacing);
        PyPositions {
            inner: cotar::scenario::TargetCluster::centered_on(formation, center).positions(),
        }
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x().to_vec()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y().to_vec()
    }

    fn points(&self) -> Vec<(f64, f64)> {
        self.inner.nodes().collect()
    }

    fn centroid(&self) -> (f64, f64) {
        self.inner.centroid()
    }

    fn translated(&self, dx: f64, dy: f64) -> Self {
        PyPositions {
            inner: self.inner.translated(dx, dy),
        }
    }

    /// Euclidean error of each node against `other`.
    fn node_errors(&self, other: &PyPositions) -> Vec<f64> {
        self.inner.node_errors(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PositionVector({:?})", self.points())
    }
}

/// One noisy measurement vector with its row layout and mask.
#[pyclass(name = "ObservationSet", module = "cotar", skip_from_py_object)]
#[derive(Clone)]
pub struct PyObservations {
    inner: cotar::observation::ObservationSet,
}

#[pymethods]
impl PyObservations {
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.iter().copied().collect()
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        self.inner.mask.clone()
    }

    #[getter]
    fn sigma(&self) -> Vec<f64> {
        self.inner.variances.iter().map(|v| v.sqrt()).collect()
    }

    /// Row kinds in order: "neighbor_rss", "toa" or "remote_rss".
    #[getter]
    fn kinds(&self) -> Vec<&'static str> {
        self.inner.layout.rows().iter().map(|r| r.name()).collect()
    }

    fn active_count(&self) -> usize {
        self.inner.active_count()
    }

    fn __len__(&self) -> usize {
        self.inner.values.len()
    }
}

fn layout_for(
    scheme: &str,
    pos: &PyPositions,
    refs: &PyRefs,
) -> PyResult<cotar::observation::ObservationLayout> {
    Ok(cotar::observation::ObservationLayout::new(
        parse_scheme(scheme)?,
        pos.inner.len(),
        refs.inner.len(),
    ))
}

/// Noise-free observation vector of `scheme` at `pos`.
#[pyfunction]
fn forward_model(
    pos: &PyPositions,
    refs: &PyRefs,
    scheme: &str,
    channel: &PyChannel,
) -> PyResult<Vec<f64>> {
    let layout = layout_for(scheme, pos, refs)?;
    cotar::observation::forward_model(&pos.inner, &layout, &refs.inner, &channel.inner)
        .map(|v| v.iter().copied().collect())
        .map_err(to_py)
}

/// Jacobian rows; columns are x1..xN then y1..yN.
#[pyfunction]
fn jacobian(
    pos: &PyPositions,
    refs: &PyRefs,
    scheme: &str,
    channel: &PyChannel,
) -> PyResult<Vec<Vec<f64>>> {
    let layout = layout_for(scheme, pos, refs)?;
    cotar::jacobian::assemble(&pos.inner, &layout, &refs.inner, &channel.inner)
        .map(|j| rows(&j.matrix))
        .map_err(to_py)
}

/// Fisher information matrix (2N × 2N) at the true positions.
#[pyfunction]
fn fisher(
    pos: &PyPositions,
    refs: &PyRefs,
    scheme: &str,
    channel: &PyChannel,
) -> PyResult<Vec<Vec<f64>>> {
    let layout = layout_for(scheme, pos, refs)?;
    cotar::bounds::fisher(&pos.inner, &layout, &refs.inner, &channel.inner)
        .map(|f| rows(&f.matrix))
        .map_err(to_py)
}

/// Per-node CRB standard deviation in meters.
#[pyfunction]
fn crb_std(
    pos: &PyPositions,
    refs: &PyRefs,
    scheme: &str,
    channel: &PyChannel,
) -> PyResult<Vec<f64>> {
    let layout = layout_for(scheme, pos, refs)?;
    let fim =
        cotar::bounds::fisher(&pos.inner, &layout, &refs.inner, &channel.inner).map_err(to_py)?;
    cotar::bounds::crb_per_node(&fim).map_err(to_py)
}

/// RMS bound `sqrt(tr(P) / N)` in meters.
#[pyfunction]
fn rms_bound(pos: &PyPositions, refs: &PyRefs, scheme: &str, channel: &PyChannel) -> PyResult<f64> {
    let layout = layout_for(scheme, pos, refs)?;
    cotar::bounds::rms_bound(&pos.inner, &layout, &refs.inner, &channel.inner).map_err(to_py)
}

/// Draw one observation set at the true positions.
#[pyfunction]
#[pyo3(signature = (pos, refs, scheme, channel, p_miss = 0.0, seed = 0))]
fn synthesize(
    pos: &PyPositions,
    refs: &PyRefs,
    scheme: &str,
    channel: &PyChannel,
    p_miss: f64,
    seed: u64,
) -> PyResult<PyObservations> {
    let layout = layout_for(scheme, pos, refs)?;
    let mut noise = cotar::montecarlo::substream(seed, 0, 0, 0);
    let mut mask = cotar::montecarlo::substream(seed, 1, 0, 0);
    cotar::observation::synthesize(
        &pos.inner,
        &layout,
        &refs.inner,
        &channel.inner,
        p_miss,
        &mut noise,
        &mut mask,
    )
    .map(|inner| PyObservations { inner })
    .map_err(to_py)
}

/// Run exactly `iterations` Gauss-Newton steps from `init`.
#[pyfunction]
#[pyo3(signature = (init, obs, refs, channel, iterations = 2))]
fn solve(
    init: &PyPositions,
    obs: &PyObservations,
    refs: &PyRefs,
    channel: &PyChannel,
    iterations: usize,
) -> PyResult<PyPositions> {
    cotar::estimator::solve(
        &init.inner,
        &obs.inner,
        &refs.inner,
        &channel.inner,
        iterations,
    )
    .map(|r| PyPositions {
        inner: r.state.positions,
    })
    .map_err(to_py)
}

/// Parse and validate a JSON config; raises ValueError naming the bad field.
#[pyfunction]
fn validate_config(config_json: &str) -> PyResult<()> {
    cotar::scenario::parse_config(config_json)
        .map(|_| ())
        .map_err(to_py)
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Static Monte-Carlo run described by a JSON config. Returns the summary
/// as a dict with one entry per evaluation point.
#[pyfunction]
#[pyo3(signature = (config_json, seed = None))]
fn run_static<'py>(
    py: Python<'py>,
    config_json: &str,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = cotar::scenario::parse_config(config_json).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let result = py
        .detach(|| cotar::montecarlo::run_static(&cfg, false))
        .map_err(to_py)?;
    let value =
        serde_json::to_value(&result).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

#[pymodule]
#[pyo3(name = "cotar")]
fn cotar_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyChannel>()?;
    m.add_class::<PyRefs>()?;
    m.add_class::<PyPositions>()?;
    m.add_class::<PyObservations>()?;
    m.add_function(wrap_pyfunction!(forward_model, m)?)?;
    m.add_function(wrap_pyfunction!(jacobian, m)?)?;
    m.add_function(wrap_pyfunction!(fisher, m)?)?;
    m.add_function(wrap_pyfunction!(crb_std, m)?)?;
    m.add_function(wrap_pyfunction!(rms_bound, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_static, m)?)?;
    m.add(
        "SCHEMES",
        Scheme::ALL.iter().map(|s| s.name()).collect::<Vec<_>>(),
    )?;
    m.add("SPEED_OF_LIGHT", cotar::channel::SPEED_OF_LIGHT)?;
    Ok(())
}
