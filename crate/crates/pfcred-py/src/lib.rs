//! Python bindings for the `pfcred` dimension-reduction library.
//!
//! The module is a thin veneer: datasets come in as lists (or a CSV path),
//! results go out as plain lists and dicts, and every fitted model keeps its
//! Rust core so `reduce` runs at native speed. Matrices cross the boundary
//! as row-major nested lists, directly consumable by `numpy.array`.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use pfcred::{
    build_design, BasisSpec, DeltaStructure, DesignMatrices, FixedPointOpts, ModelKind, PfcError,
    PfcFit, Response,
};

/// Input errors become `ValueError`; numerical failures become
/// `RuntimeError` (mirroring the CLI's exit-code split).
fn pyerr(e: PfcError) -> PyErr {
    match e {
        PfcError::SchemaError(_)
        | PfcError::ParseError { .. }
        | PfcError::InvalidInput(_)
        | PfcError::DegenerateResponse(_)
        | PfcError::RankDeficientBasis(_)
        | PfcError::Io(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_mat(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(PyValueError::new_err(format!("{what} must be non-empty")));
    }
    let (n, p) = (rows.len(), rows[0].len());
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err(format!(
            "{what} rows have unequal lengths"
        )));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

/// Observed responses: numbers, or strings treated as class labels.
#[derive(FromPyObject)]
enum YInput {
    Continuous(Vec<f64>),
    Labels(Vec<String>),
}

/// A response/predictor table ready for design construction.
#[pyclass(frozen)]
struct Dataset {
    inner: pfcred::Dataset,
}

impl Dataset {
    fn design(&self, basis: &str) -> PyResult<DesignMatrices> {
        let spec = BasisSpec::parse(basis).map_err(pyerr)?;
        build_design(&self.inner, &spec).map_err(pyerr)
    }

    fn active_indices(&self, keep: &[String]) -> PyResult<Vec<usize>> {
        keep.iter()
            .map(|name| {
                self.inner.predictor_index(name).ok_or_else(|| {
                    PyValueError::new_err(format!("unknown predictor '{name}'"))
                })
            })
            .collect()
    }
}

#[pymethods]
impl Dataset {
    /// Builds a dataset from predictor rows and a response list. String
    /// responses are treated as class labels.
    #[new]
    #[pyo3(signature = (x, y, names=None))]
    fn new(x: Vec<Vec<f64>>, y: YInput, names: Option<Vec<String>>) -> PyResult<Self> {
        let xm = rows_to_mat(&x, "x")?;
        let names =
            names.unwrap_or_else(|| (1..=xm.ncols()).map(|j| format!("x{j}")).collect());
        let resp = match y {
            YInput::Continuous(v) => Response::Continuous(v),
            YInput::Labels(v) => Response::Categorical(v),
        };
        Ok(Dataset {
            inner: pfcred::Dataset::new(xm, resp, names).map_err(pyerr)?,
        })
    }

    /// Loads a headed CSV. `predictors=None` takes every non-response
    /// column; `categorical=True` forces label treatment of the response.
    #[staticmethod]
    #[pyo3(signature = (path, response, predictors=None, categorical=false))]
    fn from_csv(
        path: &str,
        response: &str,
        predictors: Option<Vec<String>>,
        categorical: bool,
    ) -> PyResult<Self> {
        let inner = pfcred::load_csv(
            std::path::Path::new(path),
            response,
            predictors.as_deref(),
            categorical,
        )
        .map_err(pyerr)?;
        Ok(Dataset { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn predictor_names(&self) -> Vec<String> {
        self.inner.predictor_names().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, p={})", self.inner.n(), self.inner.p())
    }
}

/// A fitted reduction: estimates as lists, plus `reduce` for new data.
#[pyclass(frozen)]
struct Fit {
    inner: PfcFit,
}

#[pymethods]
impl Fit {
    #[getter]
    fn model(&self) -> String {
        self.inner.model_kind.to_string()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn loglik(&self) -> f64 {
        self.inner.loglik
    }

    #[getter]
    fn mu_hat(&self) -> Vec<f64> {
        self.inner.mu_hat.iter().copied().collect()
    }

    #[getter]
    fn lambda_hat(&self) -> Vec<f64> {
        self.inner.lambda_hat.clone()
    }

    #[getter]
    fn delta_hat(&self) -> Vec<Vec<f64>> {
        mat_to_rows(&self.inner.delta_hat)
    }

    /// Orthonormal basis (rows = predictors, columns = directions) of the
    /// fitted mean subspace.
    #[getter]
    fn gamma_span(&self) -> Vec<Vec<f64>> {
        mat_to_rows(self.inner.gamma_span.basis())
    }

    #[getter]
    fn beta_hat(&self) -> Vec<Vec<f64>> {
        mat_to_rows(&self.inner.beta_hat)
    }

    /// `p x d` matrix whose columns map predictors to reduced coordinates.
    #[getter]
    fn reduction(&self) -> Vec<Vec<f64>> {
        mat_to_rows(&self.inner.reduction)
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.iter().map(|w| w.to_string()).collect()
    }

    /// Applies the fitted reduction to new rows, returning `m x d`
    /// coordinates (not centered; subtract `mu_hat` first if comparing
    /// against centered training coordinates).
    fn reduce(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let xm = rows_to_mat(&x, "x")?;
        let out = self.inner.reduce(&xm).map_err(pyerr)?;
        Ok(mat_to_rows(&out))
    }

    fn __repr__(&self) -> String {
        format!(
            "Fit(model={}, d={}, loglik={:.4})",
            self.inner.model_kind, self.inner.d, self.inner.loglik
        )
    }
}

/// Fits a reduction of dimension `d`. `model` is `pfc_full` (free error
/// covariance), `isotonic_pfc` (isotropic errors), or `pc` (response
/// ignored).
#[pyfunction]
#[pyo3(signature = (data, d, basis="poly:3", model="pfc_full"))]
fn fit(data: &Dataset, d: usize, basis: &str, model: &str) -> PyResult<Fit> {
    let des = data.design(basis)?;
    let kind = match model {
        "pfc_full" => ModelKind::PfcFull,
        "isotonic_pfc" => ModelKind::IsotonicPfc,
        "pc" => ModelKind::Pc,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown model '{other}' (expected pfc_full, isotonic_pfc, or pc)"
            )))
        }
    };
    let inner = match kind {
        ModelKind::PfcFull => pfcred::fit_pfc(&des, d),
        ModelKind::IsotonicPfc => pfcred::fit_isotonic_pfc(&des, d),
        ModelKind::Pc => pfcred::fit_pc(&des, d),
    }
    .map_err(pyerr)?;
    Ok(Fit { inner })
}

fn selection_dict<'py>(
    py: Python<'py>,
    sel: &pfcred::DimSelection,
) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new_bound(py);
    out.set_item("method", &sel.method)?;
    out.set_item("chosen_d", sel.chosen_d)?;
    if let Some(a) = sel.alpha {
        out.set_item("alpha", a)?;
    }
    let rows = PyList::empty_bound(py);
    for r in &sel.per_w {
        let row = PyDict::new_bound(py);
        row.set_item("w", r.w)?;
        row.set_item("loglik", r.loglik)?;
        if let Some(v) = r.statistic {
            row.set_item("statistic", v)?;
        }
        if let Some(v) = r.df {
            row.set_item("df", v)?;
        }
        if let Some(v) = r.p_value {
            row.set_item("p_value", v)?;
        }
        if let Some(v) = r.ic {
            row.set_item("ic", v)?;
        }
        row.set_item("decision", &r.decision)?;
        rows.append(row)?;
    }
    out.set_item("table", rows)?;
    Ok(out)
}

/// Chooses the reduction dimension. `method` is `lrt`, `aic`, `bic`, or
/// `all`; returns a list with one selection dict per method.
#[pyfunction]
#[pyo3(signature = (data, basis="poly:3", method="all", alpha=0.05))]
fn select_d<'py>(
    py: Python<'py>,
    data: &Dataset,
    basis: &str,
    method: &str,
    alpha: f64,
) -> PyResult<Bound<'py, PyList>> {
    let des = data.design(basis)?;
    let mut sels = Vec::new();
    if method == "lrt" || method == "all" {
        sels.push(pfcred::select_d_lrt(&des, alpha).map_err(pyerr)?);
    }
    if method == "aic" || method == "all" {
        sels.push(pfcred::select_d_ic(&des, pfcred::Criterion::Aic).map_err(pyerr)?);
    }
    if method == "bic" || method == "all" {
        sels.push(pfcred::select_d_ic(&des, pfcred::Criterion::Bic).map_err(pyerr)?);
    }
    if sels.is_empty() {
        return Err(PyValueError::new_err(format!(
            "unknown method '{method}' (expected lrt, aic, bic, or all)"
        )));
    }
    let out = PyList::empty_bound(py);
    for sel in &sels {
        out.append(selection_dict(py, sel)?)?;
    }
    Ok(out)
}

/// Tests whether the predictors NOT listed in `keep` can be dropped from
/// the reduction. With `d=None` the working dimension is `min(r, len(keep))`.
#[pyfunction]
#[pyo3(signature = (data, keep, d=None, basis="poly:3"))]
fn test_predictors<'py>(
    py: Python<'py>,
    data: &Dataset,
    keep: Vec<String>,
    d: Option<usize>,
    basis: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let des = data.design(basis)?;
    let active = data.active_indices(&keep)?;
    let test = match d {
        Some(d) => pfcred::test_predictors(&des, d, &active),
        None => pfcred::test_predictors_maxw(&des, &active),
    }
    .map_err(pyerr)?;
    let out = PyDict::new_bound(py);
    out.set_item("kind", &test.report.kind)?;
    out.set_item("statistic", test.report.statistic)?;
    out.set_item("df", test.report.df)?;
    out.set_item("p_value", test.report.p_value)?;
    out.set_item("working_d", test.working_d)?;
    out.set_item("kept", keep)?;
    Ok(out)
}

/// Error-covariance structure: `"diag"`, `"equicorr"`, a list of group ids
/// (one per predictor, tying diagonal entries), or a list of symmetric
/// `p x p` matrices spanning the allowed covariances.
#[derive(FromPyObject)]
enum StructureInput {
    Name(String),
    Groups(Vec<usize>),
    Matrices(Vec<Vec<Vec<f64>>>),
}

impl StructureInput {
    fn build(self) -> PyResult<DeltaStructure> {
        match self {
            StructureInput::Name(s) => match s.as_str() {
                "diag" => Ok(DeltaStructure::Diagonal),
                "equicorr" => Ok(DeltaStructure::Equicorrelated),
                other => Err(PyValueError::new_err(format!(
                    "unknown structure '{other}' (expected diag, equicorr, group ids, or matrices)"
                ))),
            },
            StructureInput::Groups(groups) => Ok(DeltaStructure::GroupedDiagonal { groups }),
            StructureInput::Matrices(mats) => {
                let matrices = mats
                    .iter()
                    .map(|m| rows_to_mat(m, "structure matrix"))
                    .collect::<PyResult<Vec<_>>>()?;
                Ok(DeltaStructure::Custom { matrices })
            }
        }
    }
}

/// Fits the reduction with the error covariance constrained to a linear
/// structure.
#[pyfunction]
#[pyo3(signature = (data, d, structure, basis="poly:3", tol=1e-9, max_iter=500))]
fn fit_structured<'py>(
    py: Python<'py>,
    data: &Dataset,
    d: usize,
    structure: StructureInput,
    basis: &str,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let des = data.design(basis)?;
    let fit = pfcred::fit_structured(
        &des,
        d,
        &structure.build()?,
        FixedPointOpts { tol, max_iter },
    )
    .map_err(pyerr)?;
    let out = PyDict::new_bound(py);
    out.set_item("delta_coeffs", &fit.delta_coeffs)?;
    out.set_item("delta_tilde", mat_to_rows(&fit.delta_tilde))?;
    out.set_item("loglik", fit.loglik)?;
    out.set_item("subspace", mat_to_rows(fit.subspace.basis()))?;
    out.set_item("iterations", fit.iterations)?;
    out.set_item("converged", fit.converged)?;
    out.set_item("gradient_norm", fit.gradient_norm)?;
    out.set_item(
        "warnings",
        fit.warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
    )?;
    Ok(out)
}

/// Likelihood-ratio test of a covariance structure against the
/// unconstrained model, at working dimension `w` (default `min(p, r)`).
#[pyfunction]
#[pyo3(signature = (data, structure, w=None, basis="poly:3", tol=1e-9, max_iter=500))]
fn test_structure<'py>(
    py: Python<'py>,
    data: &Dataset,
    structure: StructureInput,
    w: Option<usize>,
    basis: &str,
    tol: f64,
    max_iter: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let des = data.design(basis)?;
    let w = w.unwrap_or_else(|| des.tau());
    let report = pfcred::test_structure(
        &des,
        &structure.build()?,
        w,
        FixedPointOpts { tol, max_iter },
    )
    .map_err(pyerr)?;
    let out = PyDict::new_bound(py);
    out.set_item("kind", &report.kind)?;
    out.set_item("statistic", report.statistic)?;
    out.set_item("df", report.df)?;
    out.set_item("p_value", report.p_value)?;
    out.set_item(
        "warnings",
        report.warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
    )?;
    Ok(out)
}

#[pymodule]
fn pfcred_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Fit>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(select_d, m)?)?;
    m.add_function(wrap_pyfunction!(test_predictors, m)?)?;
    m.add_function(wrap_pyfunction!(fit_structured, m)?)?;
    m.add_function(wrap_pyfunction!(test_structure, m)?)?;
    Ok(())
}
