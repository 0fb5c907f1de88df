//! Python bindings: sets, strata, pairs, point verdicts, scans, flat
//! subdivision and refinement. Points cross the boundary as lists of floats.

use std::sync::Arc;

use nalgebra::DVector;
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use stratcheck_core as core;
use core::io::StrataSet;
use core::kuo::KuoContext;
use core::refine::{RefineOptions, Stratification};
use core::whitney::{self, CheckOptions, Condition};

create_exception!(stratcheck, StratcheckError, PyValueError, "Raised for invalid input or failed computations.");
create_exception!(stratcheck, BudgetError, StratcheckError, "Raised when a piece or search budget runs out.");

fn to_py(e: core::Error) -> PyErr {
    match e {
        core::Error::Budget(_) => BudgetError::new_err(e.to_string()),
        _ => StratcheckError::new_err(e.to_string()),
    }
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn condition(name: &str) -> PyResult<Condition> {
    match name {
        "a" | "A" => Ok(Condition::A),
        "b" | "B" => Ok(Condition::B),
        _ => Err(StratcheckError::new_err(format!("condition must be 'a' or 'b', got {name:?}"))),
    }
}

/// Linear subspace given by spanning vectors.
#[pyclass(name = "Subspace", module = "stratcheck", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySubspace {
    inner: core::Subspace,
}

#[pymethods]
impl PySubspace {
    #[new]
    #[pyo3(signature = (ambient_dim, vectors = Vec::new()))]
    fn new(ambient_dim: usize, vectors: Vec<Vec<f64>>) -> PyResult<Self> {
        let vs: Vec<DVector<f64>> = vectors.into_iter().map(vector).collect();
        core::Subspace::span(ambient_dim, &vs).map(|inner| PySubspace { inner }).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }

    /// Orthonormal basis vectors.
    fn basis(&self) -> Vec<Vec<f64>> {
        self.inner.basis().map(|b| list(&b)).collect()
    }

    fn project(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.project(&vector(v)).map(|p| list(&p)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Subspace(dim={}, ambient_dim={})", self.inner.dim(), self.inner.ambient_dim())
    }
}

/// Angle `sup_{|u|=1, u in P} dist(u, Q)`; zero when `P` lies in `Q`.
#[pyfunction]
fn angle(p: &PySubspace, q: &PySubspace) -> PyResult<f64> {
    core::grassmann::angle(&p.inner, &q.inner).map_err(to_py)
}

/// Symmetric version of `angle` for subspaces of equal dimension.
#[pyfunction]
fn symmetric_angle(p: &PySubspace, q: &PySubspace) -> PyResult<f64> {
    core::grassmann::symmetric_angle(&p.inner, &q.inner).map_err(to_py)
}

/// Parsed arithmetic expression with forward-mode gradients.
#[pyclass(name = "Expression", module = "stratcheck", frozen)]
struct PyExpression {
    inner: core::Expression,
}

#[pymethods]
impl PyExpression {
    #[new]
    #[pyo3(signature = (text, variables = None))]
    fn new(text: &str, variables: Option<Vec<String>>) -> PyResult<Self> {
        let parsed = match variables {
            Some(vars) => core::Expression::parse_with_vars(text, &vars),
            None => core::Expression::parse(text),
        };
        parsed.map(|inner| PyExpression { inner }).map_err(|e| to_py(e.into()))
    }

    #[getter]
    fn variables(&self) -> Vec<String> {
        self.inner.variables().to_vec()
    }

    fn eval(&self, point: Vec<f64>) -> PyResult<f64> {
        self.inner.eval(&point).map_err(|e| to_py(e.into()))
    }

    fn gradient(&self, point: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.gradient(&point).map_err(|e| to_py(e.into()))
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Expression({:?})", self.inner.to_string())
    }
}

/// A stratum: a union of patches of one dimension.
#[pyclass(name = "Stratum", module = "stratcheck", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyStratum {
    inner: Arc<core::Stratum>,
}

#[pymethods]
impl PyStratum {
    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim
    }

    #[getter]
    fn patch_count(&self) -> usize {
        self.inner.patches.len()
    }

    #[pyo3(signature = (n, seed = 42))]
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        self.inner.sample(n, seed).points.iter().map(|p| list(&p.x)).collect()
    }

    fn contains(&self, point: Vec<f64>) -> bool {
        self.inner.contains(&vector(point))
    }

    fn tangent(&self, point: Vec<f64>) -> PyResult<PySubspace> {
        self.inner.tangent_at(&vector(point)).map(|inner| PySubspace { inner }).map_err(to_py)
    }

    fn nearest_point(&self, point: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.nearest_point(&vector(point)).map(|p| list(&p.x)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Stratum({:?}, dim={}, patches={})", self.inner.name, self.inner.dim(), self.inner.patches.len())
    }
}

/// Outcome of a condition (a) or (b) check at one point of `Y`.
#[pyclass(name = "Verdict", module = "stratcheck", frozen, skip_from_py_object, get_all)]
#[derive(Clone)]
struct PyVerdict {
    y: Vec<f64>,
    condition: String,
    /// "regular", "fault" or "inconclusive".
    status: String,
    score: f64,
    tol: f64,
    /// Points of the witnessing sequence, nearest to `y` last.
    witness: Option<Vec<Vec<f64>>>,
}

impl From<&whitney::Verdict> for PyVerdict {
    fn from(v: &whitney::Verdict) -> Self {
        PyVerdict {
            y: list(&v.y),
            condition: v.condition.as_str().into(),
            status: v.status.as_str().into(),
            score: v.score,
            tol: v.tol,
            witness: v.witness.as_ref().map(|w| w.points.iter().map(|p| list(&p.x)).collect()),
        }
    }
}

#[pymethods]
impl PyVerdict {
    fn __repr__(&self) -> String {
        format!("Verdict({}, status={:?}, score={})", self.condition, self.status, self.score)
    }
}

/// Result of scanning a pair for faults along `Y`.
#[pyclass(name = "FaultReport", module = "stratcheck", frozen, get_all)]
struct PyFaultReport {
    pair: String,
    condition: String,
    samples: Vec<PyVerdict>,
    fault_fraction: f64,
    faults: usize,
    inconclusive: usize,
    /// Center point of each fault cluster.
    clusters: Vec<Vec<f64>>,
    pitch: f64,
    csv: String,
}

impl From<&whitney::FaultReport> for PyFaultReport {
    fn from(r: &whitney::FaultReport) -> Self {
        PyFaultReport {
            pair: r.pair.clone(),
            condition: r.condition.as_str().into(),
            samples: r.samples.iter().map(PyVerdict::from).collect(),
            fault_fraction: r.fault_fraction,
            faults: r.faults(),
            inconclusive: r.inconclusive,
            clusters: r.isolated_faults.iter().map(|c| c.center.clone()).collect(),
            pitch: r.pitch,
            csv: core::io::report_csv(r),
        }
    }
}

#[pymethods]
impl PyFaultReport {
    fn __repr__(&self) -> String {
        format!(
            "FaultReport({:?}, faults={}, clusters={}, fault_fraction={})",
            self.pair,
            self.faults,
            self.clusters.len(),
            self.fault_fraction
        )
    }
}

/// Local components of `X` near a point of `Y`.
#[pyclass(name = "Components", module = "stratcheck", frozen, get_all)]
struct PyComponents {
    radius: f64,
    stable: bool,
    /// Number of sampled points in each component.
    sizes: Vec<usize>,
    essential: Vec<bool>,
}

#[pymethods]
impl PyComponents {
    fn __len__(&self) -> usize {
        self.sizes.len()
    }

    fn __repr__(&self) -> String {
        format!("Components(count={}, essential={:?})", self.sizes.len(), self.essential)
    }
}

/// Refined stratification produced by `Pair.refine`.
#[pyclass(name = "Stratification", module = "stratcheck", frozen)]
struct PyStratification {
    inner: Stratification,
}

#[pymethods]
impl PyStratification {
    #[getter]
    fn complete(&self) -> bool {
        self.inner.complete
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn strata(&self) -> Vec<PyStratum> {
        self.inner.strata.iter().map(|s| PyStratum { inner: s.clone() }).collect()
    }

    /// Names of pairs whose final scan still has faults.
    fn offending(&self) -> Vec<String> {
        self.inner.offending().iter().map(|r| r.pair.clone()).collect()
    }

    fn to_set(&self) -> PyResult<PyStrataSet> {
        self.inner.to_set().map(|inner| PyStrataSet { inner }).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Stratification(strata={}, iterations={}, complete={})",
            self.inner.strata.len(),
            self.inner.iterations,
            self.inner.complete
        )
    }
}

/// A pair `(X, Y)` with `Y` in the frontier of `X`.
#[pyclass(name = "Pair", module = "stratcheck", frozen)]
struct PyPair {
    inner: core::PairXY,
}

impl PyPair {
    fn verdict(&self, y: Vec<f64>, cond: Condition, opts: CheckOptions) -> PyResult<PyVerdict> {
        whitney::check(&self.inner, &vector(y), cond, &opts).map(|v| PyVerdict::from(&v)).map_err(to_py)
    }
}

fn options(tol: f64, budget: usize, seed: u64) -> CheckOptions {
    CheckOptions { tol, budget, seed, ..CheckOptions::default() }
}

#[pymethods]
impl PyPair {
    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn x(&self) -> PyStratum {
        PyStratum { inner: self.inner.x.clone() }
    }

    #[getter]
    fn y(&self) -> PyStratum {
        PyStratum { inner: self.inner.y.clone() }
    }

    /// `p_a` at a point of `X`, with `Y` framed at `y`.
    fn p_a(&self, y: Vec<f64>, x: Vec<f64>) -> PyResult<f64> {
        let ctx = KuoContext::new(&self.inner, &vector(y)).map_err(to_py)?;
        let p = self.inner.x.locate(&vector(x)).map_err(to_py)?;
        ctx.p_a(&p).map_err(to_py)
    }

    /// `p_b'` at a point of `X`, with `Y` framed at `y`.
    fn p_b_prime(&self, y: Vec<f64>, x: Vec<f64>) -> PyResult<f64> {
        let ctx = KuoContext::new(&self.inner, &vector(y)).map_err(to_py)?;
        let p = self.inner.x.locate(&vector(x)).map_err(to_py)?;
        ctx.p_b_prime(&p).map_err(to_py)
    }

    #[pyo3(signature = (y, tol = whitney::DEFAULT_TOL, budget = core::sequence::DEFAULT_BUDGET, seed = 42))]
    fn check_a(&self, y: Vec<f64>, tol: f64, budget: usize, seed: u64) -> PyResult<PyVerdict> {
        self.verdict(y, Condition::A, options(tol, budget, seed))
    }

    #[pyo3(signature = (y, tol = whitney::DEFAULT_TOL, budget = core::sequence::DEFAULT_BUDGET, seed = 42))]
    fn check_b(&self, y: Vec<f64>, tol: f64, budget: usize, seed: u64) -> PyResult<PyVerdict> {
        self.verdict(y, Condition::B, options(tol, budget, seed))
    }

    /// Condition (a) restricted to the essential components of `X` at `y`.
    #[pyo3(signature = (y, tol = whitney::DEFAULT_TOL, budget = core::sequence::DEFAULT_BUDGET, seed = 42))]
    fn sing_a(&self, y: Vec<f64>, tol: f64, budget: usize, seed: u64) -> PyResult<PyVerdict> {
        whitney::sing_a_kaloshin(&self.inner, &vector(y), &options(tol, budget, seed))
            .map(|s| PyVerdict::from(&s.verdict))
            .map_err(to_py)
    }

    #[pyo3(signature = (condition = "a", samples = 64, tol = whitney::DEFAULT_TOL, budget = core::sequence::DEFAULT_BUDGET, seed = 42))]
    fn scan(
        &self,
        py: Python<'_>,
        condition: &str,
        samples: usize,
        tol: f64,
        budget: usize,
        seed: u64,
    ) -> PyResult<PyFaultReport> {
        let cond = self::condition(condition)?;
        let opts = options(tol, budget, seed);
        let report = py.detach(|| whitney::scan_pair(&self.inner, cond, samples, &opts));
        Ok(PyFaultReport::from(&report))
    }

    #[pyo3(signature = (y, seed = 42))]
    fn components(&self, y: Vec<f64>, seed: u64) -> PyResult<PyComponents> {
        let y = vector(y);
        let comps = whitney::local_components(&self.inner, &y, seed).map_err(to_py)?;
        let essential = whitney::essential_flags(&self.inner, &comps, seed).map_err(to_py)?;
        Ok(PyComponents {
            radius: comps.radius,
            stable: comps.stable,
            sizes: comps.components.iter().map(|c| c.points.len()).collect(),
            essential,
        })
    }

    /// Slices `X` along level sets of `p_a` until the (a)-scan is clean,
    /// for at most `budget` rounds.
    #[pyo3(signature = (tol = whitney::DEFAULT_TOL, budget = 3, seed = 42))]
    fn refine(&self, py: Python<'_>, tol: f64, budget: usize, seed: u64) -> PyResult<PyStratification> {
        let opts = RefineOptions { tol, budget, seed, ..RefineOptions::default() };
        py.detach(|| core::refine::refine_with(&self.inner, &opts))
            .map(|inner| PyStratification { inner })
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Pair({:?}, x={:?}, y={:?})", self.inner.name, self.inner.x.name, self.inner.y.name)
    }
}

/// Strata plus the pairs to check, as read from a JSON set description.
#[pyclass(name = "StrataSet", module = "stratcheck", frozen)]
struct PyStrataSet {
    inner: StrataSet,
}

#[pymethods]
impl PyStrataSet {
    /// A built-in set by name; see `fixture_names()`.
    #[staticmethod]
    fn fixture(name: &str) -> PyResult<Self> {
        core::fixtures::set_by_name(name)
            .map(|inner| PyStrataSet { inner })
            .ok_or_else(|| StratcheckError::new_err(format!("unknown fixture {name:?}")))
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        core::io::load_set(&path).map(|inner| PyStrataSet { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        core::io::set_from_json(text).map(|inner| PyStrataSet { inner }).map_err(to_py)
    }

    fn to_json(&self) -> String {
        core::io::set_to_json(&self.inner)
    }

    #[getter]
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim
    }

    #[getter]
    fn strata(&self) -> Vec<PyStratum> {
        self.inner.strata.iter().map(|s| PyStratum { inner: s.clone() }).collect()
    }

    #[getter]
    fn pair_names(&self) -> Vec<String> {
        self.inner.pairs.iter().map(|p| p.name.clone()).collect()
    }

    fn stratum(&self, name: &str) -> PyResult<PyStratum> {
        self.inner
            .stratum(name)
            .map(|s| PyStratum { inner: s.clone() })
            .ok_or_else(|| StratcheckError::new_err(format!("no stratum named {name:?}")))
    }

    /// A pair by name or as `"x,y"`.
    fn pair(&self, query: &str) -> PyResult<PyPair> {
        self.inner.pair(query).map(|inner| PyPair { inner }).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("StrataSet(strata={}, pairs={})", self.inner.strata.len(), self.inner.pairs.len())
    }
}

#[pyfunction]
fn fixture_names() -> Vec<&'static str> {
    core::fixtures::SET_NAMES.to_vec()
}

/// Splits a parametric stratum into pieces that are each `eps`-flat.
#[pyfunction]
#[pyo3(signature = (stratum, eps, max_pieces = 64, seed = 42))]
fn flatten(stratum: &PyStratum, eps: f64, max_pieces: usize, seed: u64) -> PyResult<Vec<PyStratum>> {
    core::flatness::flatten(&stratum.inner, eps, max_pieces, seed)
        .map(|pieces| pieces.into_iter().map(|s| PyStratum { inner: Arc::new(s) }).collect())
        .map_err(to_py)
}

/// Largest sampled angle between tangent spaces of a stratum.
#[pyfunction]
#[pyo3(signature = (stratum, n = 64, seed = 42))]
fn max_tangent_angle(stratum: &PyStratum, n: usize, seed: u64) -> PyResult<f64> {
    core::flatness::is_eps_flat(&stratum.inner, 1.0, n, seed).map(|c| c.max_angle).map_err(to_py)
}

/// Runs the command-line front end and returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> (i32, String, String) {
    py.detach(|| {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("stratcheck".to_string()).chain(args);
        let code = core::cli::run(argv, &mut out, &mut err);
        (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
    })
}

#[pymodule]
pub fn stratcheck(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("StratcheckError", py.get_type::<StratcheckError>())?;
    m.add("BudgetError", py.get_type::<BudgetError>())?;
    m.add_class::<PySubspace>()?;
    m.add_class::<PyExpression>()?;
    m.add_class::<PyStratum>()?;
    m.add_class::<PyVerdict>()?;
    m.add_class::<PyFaultReport>()?;
    m.add_class::<PyComponents>()?;
    m.add_class::<PyStratification>()?;
    m.add_class::<PyPair>()?;
    m.add_class::<PyStrataSet>()?;
    m.add_function(wrap_pyfunction!(angle, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_angle, m)?)?;
    m.add_function(wrap_pyfunction!(fixture_names, m)?)?;
    m.add_function(wrap_pyfunction!(flatten, m)?)?;
    m.add_function(wrap_pyfunction!(max_tangent_angle, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
