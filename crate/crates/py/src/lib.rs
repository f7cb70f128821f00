//! Python bindings. Import as `qemb_py`.

use pyo3::exceptions::{PyNotImplementedError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use qemb::embeddings as emb;
use qemb::modelsets::Proposition;
use qemb::rng::stream;
use qemb::verify;

fn to_py(e: qemb::Error) -> PyErr {
    match e {
        qemb::Error::Unsupported(_) => PyNotImplementedError::new_err(e.to_string()),
        qemb::Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = qemb::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// Uniform mid-rise quantizer with step `delta`.
#[pyclass(name = "QuantConfig", frozen)]
pub struct PyQuantConfig(qemb::QuantConfig);

#[pymethods]
impl PyQuantConfig {
    #[new]
    fn new(delta: f64) -> PyResult<Self> {
        qemb::QuantConfig::new(delta).map(Self).map_err(to_py)
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.0.delta()
    }

    /// Cell index `floor(x / delta)`.
    fn index(&self, x: f64) -> PyResult<i64> {
        self.0.index(x).map_err(to_py)
    }

    /// Cell center for an index.
    fn value(&self, k: i64) -> f64 {
        self.0.value(k)
    }

    fn __repr__(&self) -> String {
        format!("QuantConfig(delta={})", self.0.delta())
    }
}

/// Random measurement operator.
#[pyclass(name = "LinOp", frozen)]
pub struct PyLinOp(qemb::LinOp);

#[pymethods]
impl PyLinOp {
    #[new]
    #[pyo3(signature = (family, m, n, seed = 0, degree = 8, profile = None, rop_shape = None))]
    fn new(
        family: &str,
        m: usize,
        n: usize,
        seed: u64,
        degree: usize,
        profile: Option<(f64, f64)>,
        rop_shape: Option<(usize, usize)>,
    ) -> PyResult<Self> {
        let mut opts = qemb::BuildOptions::default().with_degree(degree);
        opts.profile = profile.map(|(p, q)| qemb::RipProfile { p, q });
        opts.rop_shape = rop_shape;
        qemb::LinOp::build(parse(family)?, m, n, seed, &opts).map(Self).map_err(to_py)
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.0.family().name()
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.0.mu()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed()
    }

    /// `(p, q)` norm pair the scaling `mu` is calibrated for.
    #[getter]
    fn profile(&self) -> (f64, f64) {
        let p = self.0.profile();
        (p.p, p.q)
    }

    fn matvec(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.matvec(&x).map_err(to_py)
    }

    /// Rows of the explicit matrix.
    fn dense(&self) -> Vec<Vec<f64>> {
        let d = self.0.dense();
        d.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    fn __repr__(&self) -> String {
        format!("LinOp(family='{}', m={}, n={}, seed={})", self.0.family(), self.0.m(), self.0.n(), self.0.seed())
    }
}

/// Structured signal set, parsed from strings such as `sparse:4:256`.
#[pyclass(name = "ModelSet", frozen)]
pub struct PyModelSet(qemb::ModelSet);

#[pymethods]
impl PyModelSet {
    #[new]
    #[pyo3(signature = (spec, radius = None, q = None))]
    fn new(spec: &str, radius: Option<f64>, q: Option<f64>) -> PyResult<Self> {
        let mut set: qemb::ModelSet = parse(spec)?;
        if let Some(r) = radius {
            set = set.with_radius(r).map_err(to_py)?;
        }
        if let Some(q) = q {
            set = set.with_q(q).map_err(to_py)?;
        }
        Ok(Self(set))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn radius(&self) -> f64 {
        self.0.radius()
    }

    #[getter]
    fn q(&self) -> f64 {
        self.0.q()
    }

    /// Two members of the set at `distance` apart.
    #[pyo3(signature = (distance, seed = 0))]
    fn sample_pair(&self, distance: f64, seed: u64) -> PyResult<(Vec<f64>, Vec<f64>)> {
        self.0.sample_pair(distance, &mut stream(seed, "pair", &[])).map_err(to_py)
    }

    #[pyo3(signature = (x, tol = 1e-9))]
    fn contains(&self, x: Vec<f64>, tol: f64) -> bool {
        self.0.contains(&x, tol)
    }

    fn support_function(&self, g: Vec<f64>) -> PyResult<f64> {
        self.0.support_function(&g).map_err(to_py)
    }

    /// `(mean, standard error)` of the Gaussian mean width.
    #[pyo3(signature = (trials = 2000, seed = 0))]
    fn mean_width(&self, py: Python<'_>, trials: usize, seed: u64) -> PyResult<(f64, f64)> {
        py.detach(|| self.0.mean_width_mc(trials, seed)).map_err(to_py)
    }

    #[pyo3(signature = (eta, q = None))]
    fn entropy_bound(&self, eta: f64, q: Option<f64>) -> PyResult<f64> {
        self.0.entropy_bound(eta, q.unwrap_or(self.0.q())).map_err(to_py)
    }

    #[pyo3(signature = (prop, eps, delta, c = 1.0, q = 2.0))]
    fn required_m(&self, prop: &str, eps: f64, delta: f64, c: f64, q: f64) -> PyResult<u64> {
        let prop: Proposition = parse(prop)?;
        let cfg = qemb::QuantConfig::new(delta).map_err(to_py)?;
        self.0.required_m(prop, eps, &cfg, c, q).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("ModelSet('{}', radius={}, q={})", self.0, self.0.radius(), self.0.q())
    }
}

/// Quantized codes of one vector.
#[pyclass(name = "CodeBlock", frozen, eq)]
#[derive(PartialEq)]
pub struct PyCodeBlock(qemb::CodeBlock);

#[pymethods]
impl PyCodeBlock {
    #[getter]
    fn layout(&self) -> &'static str {
        match self.0.layout() {
            qemb::Layout::Single => "single",
            qemb::Layout::Bidither => "bidither",
        }
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.0.delta()
    }

    /// Cell indices, row-major with one or two columns per measurement.
    #[getter]
    fn codes(&self) -> Vec<i64> {
        self.0.codes().to_vec()
    }

    #[getter]
    fn op_seed(&self) -> u64 {
        self.0.op_seed()
    }

    #[getter]
    fn dither_seed(&self) -> u64 {
        self.0.dither_seed()
    }

    fn with_seeds(&self, op_seed: u64, dither_seed: u64) -> Self {
        Self(self.0.clone().with_seeds(op_seed, dither_seed))
    }

    fn __len__(&self) -> usize {
        self.0.m()
    }

    fn __repr__(&self) -> String {
        format!("CodeBlock(layout='{}', m={}, delta={})", self.layout(), self.0.m(), self.0.delta())
    }
}

/// Dither vector drawn uniformly on `[0, delta)`; `2m` entries when `bidither`.
#[pyfunction]
#[pyo3(signature = (m, cfg, seed = 0, bidither = false))]
fn sample_dither(m: usize, cfg: &PyQuantConfig, seed: u64, bidither: bool) -> PyResult<Vec<f64>> {
    let len = if bidither { 2 * m } else { m };
    qemb::quantizer::sample_dither(len, &cfg.0, &mut stream(seed, "dither", &[])).map_err(to_py)
}

/// Single-dither codes of `x`. `dither` has `op.m` entries.
#[pyfunction]
fn embed(op: &PyLinOp, x: Vec<f64>, dither: Vec<f64>, cfg: &PyQuantConfig) -> PyResult<PyCodeBlock> {
    emb::embed(&op.0, &x, &dither, &cfg.0).map(PyCodeBlock).map_err(to_py)
}

/// Bi-dithered codes of `x`. `dither` has `2 * op.m` entries, two per row.
#[pyfunction]
fn embed_bidither(op: &PyLinOp, x: Vec<f64>, dither: Vec<f64>, cfg: &PyQuantConfig) -> PyResult<PyCodeBlock> {
    if dither.len() != 2 * op.0.m() {
        return Err(PyValueError::new_err(format!("dither needs {} entries, got {}", 2 * op.0.m(), dither.len())));
    }
    let pairs: Vec<[f64; 2]> = dither.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    emb::embed_bidither(&op.0, &x, &pairs, &cfg.0).map(PyCodeBlock).map_err(to_py)
}

/// `mode` is `l1`, `l2sq` or `circ`.
#[pyfunction]
#[pyo3(signature = (a, b, mode = "l1"))]
fn estimate_distance(a: &PyCodeBlock, b: &PyCodeBlock, mode: &str) -> PyResult<f64> {
    emb::estimate_distance(&a.0, &b.0, parse(mode)?).map_err(to_py)
}

#[pyfunction]
fn serialize<'py>(py: Python<'py>, c: &PyCodeBlock) -> PyResult<Bound<'py, PyBytes>> {
    let bytes = emb::serialize(&c.0).map_err(to_py)?;
    Ok(PyBytes::new(py, &bytes))
}

#[pyfunction]
fn deserialize(data: &[u8]) -> PyResult<PyCodeBlock> {
    emb::deserialize(data).map(PyCodeBlock).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (prop, model, eps, delta, c = 1.0, q = 2.0))]
fn required_m(prop: &str, model: &str, eps: f64, delta: f64, c: f64, q: f64) -> PyResult<u64> {
    PyModelSet::new(model, None, None)?.required_m(prop, eps, delta, c, q)
}

/// Empirical RIP constant over `pairs` random differences.
#[pyfunction]
#[pyo3(signature = (op, model, pairs = 200, seed = 0))]
fn estimate_rip(py: Python<'_>, op: &PyLinOp, model: &PyModelSet, pairs: usize, seed: u64) -> PyResult<f64> {
    let prof = op.0.profile();
    py.detach(|| verify::estimate_rip(&op.0, &model.0, prof.p, prof.q, pairs, seed))
        .map(|r| r.eps_hat)
        .map_err(to_py)
}

/// Distortion sweep. Returns `(records, summary)`: records are
/// `(true_dist, est_dist, rel_err, pair_id, trial_id)` and summary rows are
/// `(dist, rho_hat_max, rho_hat_median)`; `eps_L_hat` is the third element.
#[pyfunction]
#[pyo3(signature = (op, model, cfg, mode, grid, pairs = 20, dithers = 10, seed = 0))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn measure_qrip(
    py: Python<'_>,
    op: &PyLinOp,
    model: &PyModelSet,
    cfg: &PyQuantConfig,
    mode: &str,
    grid: Vec<f64>,
    pairs: usize,
    dithers: usize,
    seed: u64,
) -> PyResult<(Vec<(f64, f64, f64, u64, u64)>, Vec<(f64, f64, f64)>, f64)> {
    let qc = verify::QripConfig { mode: parse(mode)?, grid, pairs_per_distance: pairs, dithers_per_pair: dithers, seed };
    let (records, fit) = py.detach(|| verify::measure_qrip(&op.0, &model.0, &cfg.0, &qc)).map_err(to_py)?;
    let records = records.iter().map(|r| (r.true_dist, r.est_dist, r.rel_err, r.pair_id, r.trial_id)).collect();
    let summary = fit.rho.iter().map(|r| (r.dist, r.rho_max, r.rho_median)).collect();
    Ok((records, summary, fit.eps_l_hat))
}

/// `(name, passed, detail)` for every built-in identity check.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn selftest(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let lines = py.detach(|| verify::selftest(seed)).map_err(to_py)?;
    Ok(lines.into_iter().map(|l| (l.name.to_string(), l.pass, l.detail)).collect())
}

#[pymodule]
fn qemb_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuantConfig>()?;
    m.add_class::<PyLinOp>()?;
    m.add_class::<PyModelSet>()?;
    m.add_class::<PyCodeBlock>()?;
    m.add_function(wrap_pyfunction!(sample_dither, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(embed_bidither, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_distance, m)?)?;
    m.add_function(wrap_pyfunction!(serialize, m)?)?;
    m.add_function(wrap_pyfunction!(deserialize, m)?)?;
    m.add_function(wrap_pyfunction!(required_m, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_rip, m)?)?;
    m.add_function(wrap_pyfunction!(measure_qrip, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_python_exception_kinds() {
        Python::initialize();
        Python::attach(|py| {
            let unsupported = to_py(qemb::Error::Unsupported("x".into()));
            assert!(unsupported.is_instance_of::<PyNotImplementedError>(py));
            let bad = to_py(qemb::QuantConfig::new(-1.0).unwrap_err());
            assert!(bad.is_instance_of::<PyValueError>(py));
        });
    }

    #[test]
    fn bidither_rejects_short_dither() {
        Python::initialize();
        Python::attach(|_| {
            let op = PyLinOp::new("gaussian", 4, 3, 0, 8, None, None).unwrap();
            let cfg = PyQuantConfig::new(1.0).unwrap();
            assert!(embed_bidither(&op, vec![1.0; 3], vec![0.5; 4], &cfg).is_err());
            let ok = embed_bidither(&op, vec![1.0; 3], vec![0.5; 8], &cfg).unwrap();
            assert_eq!(ok.codes().len(), 8);
        });
    }
}
