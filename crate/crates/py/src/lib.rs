//! Python bindings: ring arithmetic, models, plans and encrypted-style inference.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOverflowError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use lola_core::backend::{BackendKind, BudgetPolicy, Evaluator};
use lola_core::io::{load_idx, Model as CoreModel};
use lola_core::network::{
    build_plan, collapse, predict, InferencePlan, Layer, LayerSpec, Network, PlanConfig, Preset, Shape, Strategy,
    DEFAULT_PRIMES,
};
use lola_core::ring::{CrtModulus, PrimeModulus, RingContext, RingElement, Rotation, SlotVector};
use lola_core::trace::TraceReport;
use lola_core::verify::{run_suites, VerifyConfig};
use lola_core::Error;

create_exception!(lola, LolaError, PyException);

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::LayerOverflow { .. } | Error::MagnitudeOverflow { .. } | Error::DepthExceeded { .. } => {
            PyOverflowError::new_err(msg)
        }
        Error::InvalidParams(_)
        | Error::NoRootOfUnity { .. }
        | Error::NotCoprime { .. }
        | Error::Shape(_)
        | Error::Parse(_)
        | Error::IncompatibleStrategy(_) => PyValueError::new_err(msg),
        _ => LolaError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Plaintext ring `Z_p[x]/(x^n + 1)` with its slot encoding.
#[pyclass(frozen)]
struct Ring {
    ctx: RingContext,
    p: u64,
}

impl Ring {
    fn elem(&self, coeffs: Vec<u64>) -> PyResult<RingElement> {
        RingElement::new(self.p, coeffs).map_err(err)
    }
}

#[pymethods]
impl Ring {
    #[new]
    #[pyo3(signature = (n, prime = DEFAULT_PRIMES[0]))]
    fn new(n: usize, prime: u64) -> PyResult<Self> {
        let ctx = RingContext::new(PrimeModulus::new(prime, n).map_err(err)?).map_err(err)?;
        Ok(Self { ctx, p: prime })
    }

    #[getter]
    fn n(&self) -> usize {
        self.ctx.n()
    }

    #[getter]
    fn prime(&self) -> u64 {
        self.p
    }

    /// Slot values to polynomial coefficients.
    fn encode(&self, slots: Vec<u64>) -> PyResult<Vec<u64>> {
        let v = SlotVector::new(self.p, slots).map_err(err)?;
        Ok(self.ctx.encode(&v).map_err(err)?.coeffs().to_vec())
    }

    fn decode(&self, coeffs: Vec<u64>) -> PyResult<Vec<u64>> {
        Ok(self.ctx.decode(&self.elem(coeffs)?).map_err(err)?.slots().to_vec())
    }

    fn add(&self, a: Vec<u64>, b: Vec<u64>) -> PyResult<Vec<u64>> {
        Ok(self.ctx.add(&self.elem(a)?, &self.elem(b)?).map_err(err)?.coeffs().to_vec())
    }

    /// Negacyclic product of two coefficient vectors.
    fn mul(&self, a: Vec<u64>, b: Vec<u64>) -> PyResult<Vec<u64>> {
        Ok(self.ctx.mul(&self.elem(a)?, &self.elem(b)?).map_err(err)?.coeffs().to_vec())
    }

    /// Rotates the slots of an encoded element: an integer `k` moves columns
    /// right by `k`, the string "rows" swaps the two slot rows.
    fn rotate(&self, coeffs: Vec<u64>, k: &Bound<'_, PyAny>) -> PyResult<Vec<u64>> {
        let rot = match k.extract::<i64>() {
            Ok(k) => Rotation::Columns(k),
            Err(_) if k.extract::<String>().is_ok_and(|s| s == "rows") => Rotation::Rows,
            Err(_) => return Err(PyValueError::new_err("rotation must be an int or \"rows\"")),
        };
        Ok(self.ctx.galois_rotate(&self.elem(coeffs)?, rot).map_err(err)?.coeffs().to_vec())
    }
}

fn layer_spec(d: &Bound<'_, PyDict>) -> PyResult<LayerSpec> {
    let mut map = serde_json::Map::new();
    for (k, v) in d.iter() {
        let key: String = k.extract()?;
        let value = match v.extract::<usize>() {
            Ok(x) => serde_json::Value::from(x),
            Err(_) => serde_json::Value::from(v.extract::<String>()?),
        };
        map.insert(key, value);
    }
    serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| PyValueError::new_err(format!("layer: {e}")))
}

/// A network with optional weights and quantization settings.
#[pyclass(frozen)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// `layers` holds dicts such as `{"kind": "conv", "kernel_h": 5, ...}`;
    /// `weights` holds one `(weights, bias)` pair per layer, or `None` for a
    /// shape-only model.
    #[new]
    #[pyo3(signature = (input_shape, layers, weights = None, input_bound = 255, name = None))]
    fn new(
        input_shape: (usize, usize, usize),
        layers: Vec<Bound<'_, PyDict>>,
        weights: Option<Vec<(Vec<f64>, Vec<f64>)>>,
        input_bound: u64,
        name: Option<String>,
    ) -> PyResult<Self> {
        let specs = layers.iter().map(layer_spec).collect::<PyResult<Vec<_>>>()?;
        let layers = match weights {
            None => specs.into_iter().map(Layer::shape_only).collect(),
            Some(w) if w.len() == specs.len() => specs.into_iter().zip(w).map(|(s, (w, b))| Layer::new(s, w, b)).collect(),
            Some(w) => return Err(PyValueError::new_err(format!("{} weight pairs for {} layers", w.len(), specs.len()))),
        };
        let (c, h, w) = input_shape;
        let mut inner = CoreModel::new(Network::new(Shape::new(c, h, w), layers).map_err(err)?, input_bound);
        inner.name = name;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreModel::load(path).map_err(err)?,
        })
    }

    /// Writes `{stem}.toml` and weight blobs to `dir`; returns the manifest path.
    fn save(&self, dir: PathBuf, stem: &str) -> PyResult<PathBuf> {
        self.inner.save(dir, stem).map_err(err)
    }

    #[getter]
    fn name(&self) -> Option<String> {
        self.inner.name.clone()
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.network.input;
        (s.channels, s.height, s.width)
    }

    #[getter]
    fn has_weights(&self) -> bool {
        self.inner.network.has_weights()
    }

    /// Float forward pass of the uncollapsed network.
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.network.forward(&x).map_err(err)
    }

    /// Builds the named plan for this model.
    #[pyo3(signature = (preset, n = None, primes = None))]
    fn plan(&self, preset: &str, n: Option<usize>, primes: Option<Vec<u64>>) -> PyResult<Plan> {
        let cfg = config(parse(preset)?, n, primes);
        let net = collapse(&self.inner.network).map_err(err)?;
        Ok(Plan {
            inner: build_plan(&net, &Strategy::Preset(parse(preset)?), &cfg).map_err(err)?,
        })
    }

    /// Quantizes `x`, runs the plan on the chosen backend and returns the result.
    #[pyo3(signature = (x, preset = "lola-mnist", n = None, primes = None, backend = "slot"))]
    fn infer(
        &self,
        py: Python<'_>,
        x: Vec<f64>,
        preset: &str,
        n: Option<usize>,
        primes: Option<Vec<u64>>,
        backend: &str,
    ) -> PyResult<Inference> {
        let p: Preset = parse(preset)?;
        let backend: BackendKind = parse(backend)?;
        let cfg = config(p, n, primes);
        let modulus = Arc::new(CrtModulus::new(&cfg.primes, cfg.n).map_err(err)?);
        let ev = Evaluator::new(modulus, backend, BudgetPolicy::default());
        let model = &self.inner;
        let out = py.detach(|| model.execute(&x, &Strategy::Preset(p), &ev)).map_err(err)?;
        Ok(Inference {
            label: predict(&out.scores),
            scores: out.scores.iter().map(|&s| s as i64).collect(),
            matches_prediction: out.report.matches_prediction(),
            report: TraceReport::from_cost(&out.report),
        })
    }
}

fn config(p: Preset, n: Option<usize>, primes: Option<Vec<u64>>) -> PlanConfig {
    let mut cfg = PlanConfig::for_preset(p);
    if let Some(n) = n {
        cfg.n = n;
    }
    if let Some(primes) = primes {
        cfg.primes = primes;
    }
    cfg
}

/// A planned sequence of kernels with predicted costs.
#[pyclass(frozen)]
struct Plan {
    inner: InferencePlan,
}

#[pymethods]
impl Plan {
    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn depth(&self) -> u32 {
        self.inner.depth()
    }

    #[getter]
    fn peak_messages(&self) -> usize {
        self.inner.peak_messages()
    }

    /// `(layer, input, representation, operation)` per step.
    fn steps(&self) -> Vec<(String, String, String, String)> {
        TraceReport::from_plan(&self.inner)
            .rows
            .into_iter()
            .map(|r| (r.layer, r.input, r.representation, r.operation))
            .collect()
    }

    fn trace(&self) -> String {
        TraceReport::from_plan(&self.inner).to_text()
    }

    fn trace_jsonl(&self) -> String {
        TraceReport::from_plan(&self.inner).to_jsonl()
    }
}

#[pyclass(frozen)]
struct Inference {
    #[pyo3(get)]
    label: usize,
    #[pyo3(get)]
    scores: Vec<i64>,
    /// Whether every measured counter equals the plan's prediction.
    #[pyo3(get)]
    matches_prediction: bool,
    report: TraceReport,
}

#[pymethods]
impl Inference {
    fn trace(&self) -> String {
        self.report.to_text()
    }

    fn trace_jsonl(&self) -> String {
        self.report.to_jsonl()
    }
}

/// Runs the self-check suites; returns `(name, trials, failures)` per suite.
#[pyfunction]
#[pyo3(signature = (n = 1024, trials = 100, seed = 0, primes = None))]
fn verify(py: Python<'_>, n: usize, trials: usize, seed: u64, primes: Option<Vec<u64>>) -> PyResult<Vec<(String, usize, usize)>> {
    let cfg = VerifyConfig {
        n,
        primes: primes.unwrap_or_else(|| DEFAULT_PRIMES.to_vec()),
        trials,
        seed,
        corrupt_rotation: false,
    };
    let results = py.detach(|| run_suites(&cfg)).map_err(err)?;
    Ok(results.into_iter().map(|r| (r.name.to_string(), r.trials, r.failures)).collect())
}

/// Reads an IDX file; returns `(dims, values)` with values flattened.
#[pyfunction]
fn read_idx(path: PathBuf) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let a = load_idx(path).map_err(err)?;
    Ok((a.dims, a.data))
}

#[pymodule]
fn lola(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LolaError", m.py().get_type::<LolaError>())?;
    m.add("DEFAULT_PRIMES", PyList::new(m.py(), DEFAULT_PRIMES)?)?;
    m.add("PRESETS", Preset::ALL.iter().map(|p| p.name()).collect::<Vec<_>>())?;
    m.add_class::<Ring>()?;
    m.add_class::<Model>()?;
    m.add_class::<Plan>()?;
    m.add_class::<Inference>()?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(read_idx, m)?)?;
    Ok(())
}
