//! Datasets, response bases, and the centered moment matrices every fit
//! consumes.
//!
//! A fit never touches raw data twice: [`build_design`] centers the
//! predictors and the basis once, forms the sample covariance, its fitted
//! part (the covariance of the predictors explained by regression on the
//! basis), and the residual part, and caches the two eigendecompositions
//! that all likelihood formulas share. Constructing the design costs one
//! pass over the data plus two `p x p` eigendecompositions; everything
//! downstream is spectrum arithmetic.

use nalgebra::{DMatrix, DVector};

use crate::error::PfcError;
use crate::linalg::{self, eig_sym_desc};
use crate::Result;

/// Observed response: numeric, or labels treated as an unordered factor.
#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Continuous(Vec<f64>),
    Categorical(Vec<String>),
}

impl Response {
    pub fn len(&self) -> usize {
        match self {
            Response::Continuous(v) => v.len(),
            Response::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn distinct_count(&self) -> usize {
        match self {
            Response::Continuous(v) => {
                let mut sorted: Vec<f64> = v.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite response"));
                sorted.dedup();
                sorted.len()
            }
            Response::Categorical(v) => {
                let mut sorted: Vec<&String> = v.iter().collect();
                sorted.sort();
                sorted.dedup();
                sorted.len()
            }
        }
    }
}

/// Predictor matrix plus response, validated on construction: finite
/// entries, matching lengths, unique predictor names, and a response with at
/// least two distinct values.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: Response,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Response, names: Vec<String>) -> Result<Self> {
        let (n, p) = x.shape();
        if n < 2 || p == 0 {
            return Err(PfcError::InvalidInput(format!(
                "dataset must have at least 2 rows and 1 predictor, got {n}x{p}"
            )));
        }
        if y.len() != n {
            return Err(PfcError::InvalidInput(format!(
                "response length {} does not match {n} rows",
                y.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PfcError::InvalidInput(
                "predictor matrix contains non-finite entries".to_string(),
            ));
        }
        if let Response::Continuous(v) = &y {
            if v.iter().any(|t| !t.is_finite()) {
                return Err(PfcError::InvalidInput(
                    "continuous response contains non-finite values".to_string(),
                ));
            }
        }
        if names.len() != p {
            return Err(PfcError::InvalidInput(format!(
                "{} predictor names for {p} columns",
                names.len()
            )));
        }
        let mut seen = names.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != p {
            return Err(PfcError::InvalidInput(
                "predictor names must be unique".to_string(),
            ));
        }
        if y.distinct_count() < 2 {
            return Err(PfcError::DegenerateResponse(
                "response takes fewer than 2 distinct values".to_string(),
            ));
        }
        Ok(Dataset { x, y, names })
    }

    /// Convenience constructor with numeric response and generated names
    /// `x1..xp`.
    pub fn from_continuous(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Dataset::new(x, Response::Continuous(y), names)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &Response {
        &self.y
    }

    pub fn predictor_names(&self) -> &[String] {
        &self.names
    }

    /// Index of a predictor by name.
    pub fn predictor_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Choice of response basis `f_y`.
///
/// All variants produce raw (uncentered) basis rows; centering and, for the
/// polynomial families, per-column standardization happen inside
/// [`build_design`]. Standardizing rescales columns by a full-rank diagonal
/// matrix, which leaves the projection onto the basis span (and hence every
/// fit) unchanged while keeping high-degree polynomials well conditioned.
#[derive(Debug, Clone)]
pub enum BasisSpec {
    /// Columns `y, y^2, ..., y^degree`.
    Polynomial { degree: usize },
    /// `count - 1` slice indicators from equal-count bins of the sorted
    /// response; the highest bin is the dropped reference.
    Slices { count: usize },
    /// One indicator per label in sorted order, dropping the last label.
    Categorical,
    /// Slice indicators plus, within every bin, `y, ..., y^degree` terms:
    /// `(count - 1) + count * degree` columns.
    PiecewisePolynomial { count: usize, degree: usize },
    /// Explicit `n x r` basis supplied by the caller.
    Custom(DMatrix<f64>),
}

impl BasisSpec {
    /// Parses the command-line form: `poly:K`, `slices:H`, `piecewise:H:K`,
    /// or `categorical`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || {
            PfcError::InvalidInput(format!(
                "unrecognized basis '{s}' (expected poly:K, slices:H, piecewise:H:K, or categorical)"
            ))
        };
        match parts.as_slice() {
            ["categorical"] => Ok(BasisSpec::Categorical),
            ["poly", k] => {
                let degree: usize = k.parse().map_err(|_| bad())?;
                Ok(BasisSpec::Polynomial { degree })
            }
            ["slices", h] => {
                let count: usize = h.parse().map_err(|_| bad())?;
                Ok(BasisSpec::Slices { count })
            }
            ["piecewise", h, k] => {
                let count: usize = h.parse().map_err(|_| bad())?;
                let degree: usize = k.parse().map_err(|_| bad())?;
                Ok(BasisSpec::PiecewisePolynomial { count, degree })
            }
            _ => Err(bad()),
        }
    }

    fn standardize_columns(&self) -> bool {
        matches!(
            self,
            BasisSpec::Polynomial { .. } | BasisSpec::PiecewisePolynomial { .. }
        )
    }
}

/// Equal-count slice assignment of a numeric response.
///
/// Observations are ranked by a stable sort; bin boundaries start at equal
/// counts (earlier bins absorb the remainder when `n % count != 0`) and are
/// then pushed past ties so equal responses never straddle two bins. Errors
/// if the tie rule empties a bin.
pub(crate) fn slice_assignments(y: &[f64], count: usize) -> Result<Vec<usize>> {
    let n = y.len();
    if count < 2 {
        return Err(PfcError::InvalidInput(
            "slicing needs at least 2 bins".to_string(),
        ));
    }
    if count > n {
        return Err(PfcError::DegenerateResponse(format!(
            "{count} slices requested for {n} observations"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| y[i].partial_cmp(&y[j]).expect("finite response"));
    let base = n / count;
    let extra = n % count;
    let mut boundaries = Vec::with_capacity(count);
    let mut pos = 0usize;
    for b in 0..count {
        pos += base + usize::from(b < extra);
        boundaries.push(pos);
    }
    // Push each boundary past any tie group it would split.
    for b in boundaries.iter_mut().take(count - 1) {
        while *b < n && y[order[*b - 1]] == y[order[*b]] {
            *b += 1;
        }
    }
    let mut assign = vec![0usize; n];
    let mut start = 0usize;
    for (bin, &end) in boundaries.iter().enumerate() {
        let end = end.min(n);
        if end <= start {
            return Err(PfcError::DegenerateResponse(format!(
                "slice {bin} is empty after keeping ties together; fewer distinct responses than bins"
            )));
        }
        for &idx in &order[start..end] {
            assign[idx] = bin;
        }
        start = end;
    }
    Ok(assign)
}

/// Sorted distinct labels of a categorical response.
fn sorted_labels(labels: &[String]) -> Vec<String> {
    let mut out: Vec<String> = labels.to_vec();
    out.sort();
    out.dedup();
    out
}

/// Builds the raw (uncentered) basis matrix for `spec`.
///
/// Polynomial and piecewise variants require a continuous response, the
/// categorical variant a categorical one. The custom variant is passed
/// through after a shape check.
pub fn build_basis(y: &Response, spec: &BasisSpec) -> Result<DMatrix<f64>> {
    let n = y.len();
    match spec {
        BasisSpec::Polynomial { degree } => {
            let yv = continuous(y, "polynomial basis")?;
            if *degree == 0 {
                return Err(PfcError::InvalidInput(
                    "polynomial degree must be at least 1".to_string(),
                ));
            }
            let mut f = DMatrix::zeros(n, *degree);
            for (i, &v) in yv.iter().enumerate() {
                let mut pow = 1.0;
                for j in 0..*degree {
                    pow *= v;
                    f[(i, j)] = pow;
                }
            }
            Ok(f)
        }
        BasisSpec::Slices { count } => {
            let yv = continuous(y, "slice basis")?;
            let assign = slice_assignments(yv, *count)?;
            let mut f = DMatrix::zeros(n, count - 1);
            for (i, &bin) in assign.iter().enumerate() {
                if bin < count - 1 {
                    f[(i, bin)] = 1.0;
                }
            }
            Ok(f)
        }
        BasisSpec::Categorical => {
            let labels = match y {
                Response::Categorical(v) => v,
                Response::Continuous(_) => {
                    return Err(PfcError::InvalidInput(
                        "categorical basis requires a categorical response".to_string(),
                    ))
                }
            };
            let distinct = sorted_labels(labels);
            if distinct.len() < 2 {
                return Err(PfcError::DegenerateResponse(
                    "categorical basis needs at least 2 labels".to_string(),
                ));
            }
            let r = distinct.len() - 1;
            let mut f = DMatrix::zeros(n, r);
            for (i, lab) in labels.iter().enumerate() {
                let k = distinct.binary_search(lab).expect("label present");
                if k < r {
                    f[(i, k)] = 1.0;
                }
            }
            Ok(f)
        }
        BasisSpec::PiecewisePolynomial { count, degree } => {
            let yv = continuous(y, "piecewise basis")?;
            if *degree == 0 {
                return Err(PfcError::InvalidInput(
                    "piecewise polynomial degree must be at least 1".to_string(),
                ));
            }
            let assign = slice_assignments(yv, *count)?;
            let r = (count - 1) + count * degree;
            let mut f = DMatrix::zeros(n, r);
            for (i, &bin) in assign.iter().enumerate() {
                if bin < count - 1 {
                    f[(i, bin)] = 1.0;
                }
                let mut pow = 1.0;
                for j in 0..*degree {
                    pow *= yv[i];
                    f[(i, (count - 1) + bin * degree + j)] = pow;
                }
            }
            Ok(f)
        }
        BasisSpec::Custom(f) => {
            if f.nrows() != n {
                return Err(PfcError::InvalidInput(format!(
                    "custom basis has {} rows for {n} observations",
                    f.nrows()
                )));
            }
            if f.ncols() == 0 {
                return Err(PfcError::InvalidInput(
                    "custom basis must have at least one column".to_string(),
                ));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(PfcError::InvalidInput(
                    "custom basis contains non-finite entries".to_string(),
                ));
            }
            Ok(f.clone())
        }
    }
}

fn continuous<'a>(y: &'a Response, what: &str) -> Result<&'a [f64]> {
    match y {
        Response::Continuous(v) => Ok(v),
        Response::Categorical(_) => Err(PfcError::InvalidInput(format!(
            "{what} requires a continuous response"
        ))),
    }
}

/// Centered data, moment matrices, and the cached spectra shared by every
/// likelihood formula.
///
/// Guaranteed on construction: `sigma = sigma_fit + sigma_res` holds exactly
/// as floating-point identity (the residual part is defined by subtraction),
/// `sigma_fit` is positive semidefinite with rank at most `min(p, r)`, and
/// `sigma_res` is positive definite at the rank tolerance — otherwise
/// construction fails with [`PfcError::ResidualCovSingular`].
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    n: usize,
    p: usize,
    r: usize,
    names: Vec<String>,
    x_bar: DVector<f64>,
    xc: DMatrix<f64>,
    fc: DMatrix<f64>,
    sigma: DMatrix<f64>,
    sigma_fit: DMatrix<f64>,
    sigma_res: DMatrix<f64>,
    bhat: DMatrix<f64>,
    res_sqrt: DMatrix<f64>,
    res_inv_sqrt: DMatrix<f64>,
    log_det_res: f64,
    /// Spectrum of `sigma_res^{-1/2} sigma_fit sigma_res^{-1/2}`, descending,
    /// entries past `min(p, r)` fixed at zero.
    lambda: Vec<f64>,
    /// Eigenvectors aligned with `lambda`.
    lambda_vectors: DMatrix<f64>,
    /// Spectrum of `sigma^{-1/2} sigma_fit sigma^{-1/2}`, the squared sample
    /// canonical correlations between predictors and basis, descending.
    corr_sq: Vec<f64>,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of basis columns.
    pub fn r(&self) -> usize {
        self.r
    }

    /// `min(p, r)`, the largest rank the fitted covariance can have.
    pub fn tau(&self) -> usize {
        self.p.min(self.r)
    }

    pub fn predictor_names(&self) -> &[String] {
        &self.names
    }

    /// Sample mean of the predictors.
    pub fn x_bar(&self) -> &DVector<f64> {
        &self.x_bar
    }

    /// Centered predictors, `n x p`.
    pub fn xc(&self) -> &DMatrix<f64> {
        &self.xc
    }

    /// Centered (and possibly standardized) basis, `n x r`.
    pub fn fc(&self) -> &DMatrix<f64> {
        &self.fc
    }

    /// Sample covariance `XcᵀXc / n`.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Fitted covariance `Xcᵀ P_F Xc / n`.
    pub fn sigma_fit(&self) -> &DMatrix<f64> {
        &self.sigma_fit
    }

    /// Residual covariance `sigma - sigma_fit`.
    pub fn sigma_res(&self) -> &DMatrix<f64> {
        &self.sigma_res
    }

    /// Regression coefficients `XcᵀFc (FcᵀFc)^{-1}`, `p x r`.
    pub fn bhat(&self) -> &DMatrix<f64> {
        &self.bhat
    }

    pub fn res_sqrt(&self) -> &DMatrix<f64> {
        &self.res_sqrt
    }

    pub fn res_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.res_inv_sqrt
    }

    pub fn log_det_res(&self) -> f64 {
        self.log_det_res
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn lambda_vectors(&self) -> &DMatrix<f64> {
        &self.lambda_vectors
    }

    pub fn corr_sq(&self) -> &[f64] {
        &self.corr_sq
    }
}

/// Population (divide-by-n) standard deviation of a column.
fn column_std(col: &[f64]) -> f64 {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Builds the moment matrices for a dataset under a basis choice.
///
/// Requires `n > p + r` so the residual covariance can be positive definite.
/// The basis Gram matrix must be invertible after centering
/// ([`PfcError::RankDeficientBasis`] otherwise), and the residual covariance
/// must clear the rank tolerance ([`PfcError::ResidualCovSingular`]; the fix
/// is usually a smaller basis, more data, or a structured error covariance).
pub fn build_design(data: &Dataset, spec: &BasisSpec) -> Result<DesignMatrices> {
    let n = data.n();
    let p = data.p();
    let mut f_raw = build_basis(data.y(), spec)?;
    let r = f_raw.ncols();
    if n <= p + r {
        return Err(PfcError::InvalidInput(format!(
            "need n > p + r for a positive definite residual covariance (n={n}, p={p}, r={r})"
        )));
    }

    if spec.standardize_columns() {
        for j in 0..r {
            let col: Vec<f64> = f_raw.column(j).iter().copied().collect();
            let sd = column_std(&col);
            if sd <= 0.0 {
                return Err(PfcError::RankDeficientBasis(format!(
                    "basis column {j} is constant"
                )));
            }
            for i in 0..n {
                f_raw[(i, j)] /= sd;
            }
        }
    }

    // Center predictors and basis.
    let mut x_bar = DVector::zeros(p);
    for j in 0..p {
        x_bar[j] = data.x().column(j).sum() / n as f64;
    }
    let mut xc = data.x().clone();
    for j in 0..p {
        for i in 0..n {
            xc[(i, j)] -= x_bar[j];
        }
    }
    let mut fc = f_raw;
    for j in 0..r {
        let mean = fc.column(j).sum() / n as f64;
        for i in 0..n {
            fc[(i, j)] -= mean;
        }
    }

    // Project through a thin QR of the centered basis rather than the
    // normal equations: the Gram matrix squares the basis condition
    // number, which visibly corrupts the fitted covariance for
    // high-degree polynomial bases.
    let rank_deficient =
        || PfcError::RankDeficientBasis("centered basis columns are linearly dependent".to_string());
    let qr = fc.clone().qr();
    let qmat = qr.q(); // n x r, orthonormal columns
    let rmat = qr.r(); // r x r, upper triangular
    let rdiag_max = (0..r).map(|i| rmat[(i, i)].abs()).fold(0.0, f64::max);
    if (0..r).any(|i| rmat[(i, i)].abs() <= linalg::RANK_TOL * rdiag_max) {
        return Err(rank_deficient());
    }
    let qtx = qmat.transpose() * &xc; // r x p
    // (FᵀF)^{-1} FᵀXc = R^{-1} QᵀXc by back substitution.
    let z = rmat.solve_upper_triangular(&qtx).ok_or_else(rank_deficient)?;
    let bhat = z.transpose(); // p x r

    let nf = n as f64;
    let sigma = symmetrize((xc.transpose() * &xc) / nf);
    let sigma_fit = symmetrize((qtx.transpose() * &qtx) / nf);
    // Defined by subtraction so sigma = sigma_fit + sigma_res is exact.
    let sigma_res = &sigma - &sigma_fit;

    let res_eig = eig_sym_desc(&sigma_res)?;
    let lead = res_eig.values.first().copied().unwrap_or(0.0);
    let min = res_eig.values.last().copied().unwrap_or(0.0);
    if !(min > linalg::RANK_TOL * lead.max(0.0) && min > 0.0) {
        return Err(PfcError::ResidualCovSingular(format!(
            "smallest residual eigenvalue {min:.6e} (largest {lead:.6e}); \
             reduce the basis dimension, add data, or use a structured error covariance"
        )));
    }
    let res_sqrt = scaled_eigvec_product(&res_eig.vectors, &res_eig.values, 0.5);
    let res_inv_sqrt = scaled_eigvec_product(&res_eig.vectors, &res_eig.values, -0.5);
    let log_det_res: f64 = res_eig.values.iter().map(|v| v.ln()).sum();

    let tau = p.min(r);
    let m = symmetrize(&res_inv_sqrt * &sigma_fit * &res_inv_sqrt);
    let m_eig = eig_sym_desc(&m)?;
    let mut lambda = m_eig.values.clone();
    clamp_rank_spectrum(&mut lambda, tau);

    let sig_inv_sqrt = {
        let sig_eig = eig_sym_desc(&sigma)?;
        scaled_eigvec_product(&sig_eig.vectors, &sig_eig.values, -0.5)
    };
    let m2 = symmetrize(&sig_inv_sqrt * &sigma_fit * &sig_inv_sqrt);
    let mut corr_sq = eig_sym_desc(&m2)?.values;
    for v in corr_sq.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    clamp_rank_spectrum(&mut corr_sq, tau);

    Ok(DesignMatrices {
        n,
        p,
        r,
        names: data.predictor_names().to_vec(),
        x_bar,
        xc,
        fc,
        sigma,
        sigma_fit,
        sigma_res,
        bhat,
        res_sqrt,
        res_inv_sqrt,
        log_det_res,
        lambda,
        lambda_vectors: m_eig.vectors,
        corr_sq,
    })
}

/// Zeroes roundoff noise: negative values anywhere, and everything past the
/// analytic rank bound `tau`.
fn clamp_rank_spectrum(values: &mut [f64], tau: usize) {
    for (i, v) in values.iter_mut().enumerate() {
        if i >= tau || *v < 0.0 {
            *v = v.max(0.0);
        }
        if i >= tau {
            *v = 0.0;
        }
    }
}

fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// `V diag(values^e) Vᵀ` from an existing eigendecomposition.
fn scaled_eigvec_product(vectors: &DMatrix<f64>, values: &[f64], e: f64) -> DMatrix<f64> {
    let p = vectors.nrows();
    let mut scaled = vectors.clone();
    for j in 0..p {
        let w = values[j].powf(e);
        for i in 0..p {
            scaled[(i, j)] *= w;
        }
    }
    symmetrize(&scaled * vectors.transpose())
}

/// Reads a headered CSV into a dataset.
///
/// `response` names the response column; `predictors` selects and orders the
/// predictor columns (default: every other column in file order). The
/// response is treated as continuous when every cell parses as a finite
/// float, as categorical otherwise; `force_categorical` overrides the
/// detection for numeric label codes.
pub fn load_csv(
    path: &std::path::Path,
    response: &str,
    predictors: Option<&[String]>,
    force_categorical: bool,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| PfcError::SchemaError(format!("cannot open {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| PfcError::SchemaError(format!("unreadable header: {e}")))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let y_col = headers
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| PfcError::SchemaError(format!("response column '{response}' not found")))?;

    let pred_cols: Vec<(usize, String)> = match predictors {
        Some(wanted) => {
            let mut cols = Vec::with_capacity(wanted.len());
            for name in wanted {
                let idx = headers.iter().position(|h| h == name).ok_or_else(|| {
                    PfcError::SchemaError(format!("predictor column '{name}' not found"))
                })?;
                if idx == y_col {
                    return Err(PfcError::SchemaError(format!(
                        "'{name}' is the response column"
                    )));
                }
                cols.push((idx, name.clone()));
            }
            cols
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y_col)
            .map(|(i, h)| (i, h.clone()))
            .collect(),
    };
    if pred_cols.is_empty() {
        return Err(PfcError::SchemaError(
            "no predictor columns selected".to_string(),
        ));
    }

    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut y_raw: Vec<String> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let row = row_idx + 1;
        let record = record.map_err(|e| PfcError::ParseError {
            row,
            column: "<record>".to_string(),
            message: e.to_string(),
        })?;
        let mut xs = Vec::with_capacity(pred_cols.len());
        for (idx, name) in &pred_cols {
            let cell = record.get(*idx).ok_or_else(|| PfcError::ParseError {
                row,
                column: name.clone(),
                message: "missing cell".to_string(),
            })?;
            let v: f64 = cell.parse().map_err(|_| PfcError::ParseError {
                row,
                column: name.clone(),
                message: format!("'{cell}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(PfcError::ParseError {
                    row,
                    column: name.clone(),
                    message: format!("'{cell}' is not finite"),
                });
            }
            xs.push(v);
        }
        let y_cell = record.get(y_col).ok_or_else(|| PfcError::ParseError {
            row,
            column: response.to_string(),
            message: "missing cell".to_string(),
        })?;
        x_rows.push(xs);
        y_raw.push(y_cell.to_string());
    }
    if x_rows.is_empty() {
        return Err(PfcError::SchemaError("no data rows".to_string()));
    }

    let numeric: Option<Vec<f64>> = if force_categorical {
        None
    } else {
        let parsed: Vec<Option<f64>> = y_raw
            .iter()
            .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect();
        if parsed.iter().all(|v| v.is_some()) {
            Some(parsed.into_iter().map(|v| v.unwrap()).collect())
        } else {
            None
        }
    };
    let y = match numeric {
        Some(v) => Response::Continuous(v),
        None => Response::Categorical(y_raw),
    };

    let n = x_rows.len();
    let p = pred_cols.len();
    let x = DMatrix::from_fn(n, p, |i, j| x_rows[i][j]);
    let names = pred_cols.into_iter().map(|(_, name)| name).collect();
    Dataset::new(x, y, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn random_dataset(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = DMatrix::from_fn(n, p, |i, _| y[i] + rng.gen_range(-1.0..1.0));
        Dataset::from_continuous(x, y).unwrap()
    }

    #[test]
    fn polynomial_degree_one_is_identity_basis() {
        let y = Response::Continuous(vec![1.0, 2.0, 3.0]);
        let f = build_basis(&y, &BasisSpec::Polynomial { degree: 1 }).unwrap();
        assert_eq!(f.ncols(), 1);
        for (i, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            assert_eq!(f[(i, 0)], *v);
        }
    }

    #[test]
    fn slices_two_bins_hand_case() {
        let y = Response::Continuous(vec![1.0, 2.0, 3.0, 4.0]);
        let f = build_basis(&y, &BasisSpec::Slices { count: 2 }).unwrap();
        assert_eq!(f.ncols(), 1);
        let col: Vec<f64> = f.column(0).iter().copied().collect();
        assert_eq!(col, vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn slices_keep_ties_in_one_bin() {
        let y = vec![2.0, 1.0, 1.0, 1.0];
        let assign = slice_assignments(&y, 2).unwrap();
        assert_eq!(assign, vec![1, 0, 0, 0]);
    }

    #[test]
    fn slices_remainder_goes_to_early_bins() {
        let y: Vec<f64> = (0..7).map(|i| i as f64).collect();
        let assign = slice_assignments(&y, 3).unwrap();
        let counts = (0..3)
            .map(|b| assign.iter().filter(|&&a| a == b).count())
            .collect::<Vec<_>>();
        assert_eq!(counts, vec![3, 2, 2]);
    }

    #[test]
    fn slices_fail_without_enough_distinct_values() {
        let y = vec![1.0, 1.0, 1.0, 2.0];
        assert!(matches!(
            slice_assignments(&y, 3),
            Err(PfcError::DegenerateResponse(_))
        ));
    }

    #[test]
    fn categorical_drops_last_sorted_label() {
        let y = Response::Categorical(
            ["b", "a", "c", "a"].iter().map(|s| s.to_string()).collect(),
        );
        let f = build_basis(&y, &BasisSpec::Categorical).unwrap();
        assert_eq!(f.ncols(), 2);
        // Column 0 indicates "a", column 1 indicates "b"; "c" is dropped.
        assert_eq!(
            f.column(0).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 1.0, 0.0, 1.0]
        );
        assert_eq!(
            f.column(1).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn piecewise_shape_and_rank() {
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let resp = Response::Continuous(y);
        let f = build_basis(&resp, &BasisSpec::PiecewisePolynomial { count: 3, degree: 2 })
            .unwrap();
        assert_eq!(f.ncols(), 2 + 6);
    }

    #[test]
    fn perfect_fit_is_refused() {
        // One predictor equal to the response with f_y = y: residual
        // covariance is exactly zero.
        let y = vec![1.0, 2.0, 3.0, 4.0];
        let x = DMatrix::from_column_slice(4, 1, &y);
        let data = Dataset::from_continuous(x, y).unwrap();
        let err = build_design(&data, &BasisSpec::Polynomial { degree: 1 }).unwrap_err();
        assert!(matches!(err, PfcError::ResidualCovSingular(_)), "{err}");
    }

    #[test]
    fn constant_predictor_is_refused() {
        let mut data = random_dataset(30, 3, 9);
        let n = data.n();
        let mut x = data.x().clone();
        for i in 0..n {
            x[(i, 1)] = 7.5;
        }
        data = Dataset::new(x, data.y().clone(), data.predictor_names().to_vec()).unwrap();
        let err = build_design(&data, &BasisSpec::Polynomial { degree: 1 }).unwrap_err();
        assert!(matches!(err, PfcError::ResidualCovSingular(_)));
    }

    #[test]
    fn sample_size_guard() {
        let data = random_dataset(6, 3, 4);
        let err = build_design(&data, &BasisSpec::Polynomial { degree: 3 }).unwrap_err();
        assert!(matches!(err, PfcError::InvalidInput(_)));
    }

    #[test]
    fn moment_identity_and_psd_rank() {
        let data = random_dataset(60, 4, 17);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 2 }).unwrap();
        let dev = (des.sigma() - (des.sigma_fit() + des.sigma_res())).abs().max();
        assert!(dev < 1e-10, "additivity violated by {dev}");
        let fit_eig = eig_sym_desc(des.sigma_fit()).unwrap();
        let lead = fit_eig.values[0];
        assert!(fit_eig.values.iter().all(|&v| v > -1e-10 * lead));
        for &v in &fit_eig.values[des.tau()..] {
            assert!(v < 1e-10 * lead, "rank bound violated: {v}");
        }
        // Cached spectra are clean: nonnegative, descending, zero past tau.
        for w in des.lambda().windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(des.lambda().iter().all(|&v| v >= 0.0));
        for &v in &des.lambda()[des.tau()..] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn hand_computed_moments() {
        // Independent accumulation by explicit loops, f_y = y (scalar):
        // fitted covariance is outer(c) / var(y) with c = cov(x, y).
        let y = vec![0.2, -1.1, 0.5, 1.7, -0.8, 0.3, 1.0, -0.4];
        let x = DMatrix::from_row_slice(
            8,
            2,
            &[
                1.0, 0.5, -0.7, 0.3, 0.4, -0.2, 2.1, 1.0, -0.9, -0.6, 0.2, 0.8, 1.3, -0.1,
                -0.5, 0.4,
            ],
        );
        let n = 8f64;
        let ybar = y.iter().sum::<f64>() / n;
        let xbar: Vec<f64> = (0..2).map(|j| x.column(j).sum() / n).collect();
        let mut sig = [[0.0f64; 2]; 2];
        let mut c = [0.0f64; 2];
        let mut vy = 0.0f64;
        for i in 0..8 {
            let xi = [x[(i, 0)] - xbar[0], x[(i, 1)] - xbar[1]];
            let yi = y[i] - ybar;
            vy += yi * yi / n;
            for a in 0..2 {
                c[a] += xi[a] * yi / n;
                for b in 0..2 {
                    sig[a][b] += xi[a] * xi[b] / n;
                }
            }
        }
        let data = Dataset::from_continuous(x, y).unwrap();
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 1 }).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert_relative_eq!(des.sigma()[(a, b)], sig[a][b], epsilon = 1e-12);
                assert_relative_eq!(
                    des.sigma_fit()[(a, b)],
                    c[a] * c[b] / vy,
                    epsilon = 1e-12
                );
            }
        }
        // bhat for f_y = y is cov(x,y)/var(y) up to the standardization of
        // the single basis column, which rescales fc but not the projection.
        let fitted = des.bhat() * des.fc().transpose();
        let direct = {
            let fc = des.fc();
            let scale = fc.column(0).dot(&fc.column(0));
            let xty = des.xc().transpose() * fc.column(0);
            DMatrix::from_fn(2, 8, |a, i| xty[a] * fc[(i, 0)] / scale)
        };
        assert!((fitted - direct).abs().max() < 1e-12);
    }

    #[test]
    fn standardization_leaves_fitted_covariance_unchanged() {
        let data = random_dataset(50, 3, 21);
        let des_poly = build_design(&data, &BasisSpec::Polynomial { degree: 4 }).unwrap();
        // Same basis without standardization, via the custom route.
        let yv = match data.y() {
            Response::Continuous(v) => v.clone(),
            _ => unreachable!(),
        };
        let raw = DMatrix::from_fn(50, 4, |i, j| yv[i].powi(j as i32 + 1));
        let des_raw = build_design(&data, &BasisSpec::Custom(raw)).unwrap();
        let dev = (des_poly.sigma_fit() - des_raw.sigma_fit()).abs().max();
        assert!(dev < 1e-10, "projection changed by {dev}");
    }

    #[test]
    fn orthogonal_basis_gives_zero_fitted_covariance() {
        // Predictor pattern orthogonal (after centering) to the basis.
        let x = DMatrix::from_column_slice(8, 1, &[1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]);
        let y = vec![1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
        let data = Dataset::from_continuous(x, y).unwrap();
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 1 }).unwrap();
        assert!(des.sigma_fit().abs().max() < 1e-12);
        assert!(des.lambda().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn duplicate_basis_columns_are_rejected() {
        let data = random_dataset(30, 2, 8);
        let yv = match data.y() {
            Response::Continuous(v) => v.clone(),
            _ => unreachable!(),
        };
        let f = DMatrix::from_fn(30, 2, |i, _| yv[i]);
        let err = build_design(&data, &BasisSpec::Custom(f)).unwrap_err();
        assert!(matches!(err, PfcError::RankDeficientBasis(_)));
    }

    #[test]
    fn row_permutation_leaves_moments_unchanged() {
        let data = random_dataset(40, 3, 33);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 2 }).unwrap();
        let n = data.n();
        let perm: Vec<usize> = (0..n).rev().collect();
        let xp = DMatrix::from_fn(n, 3, |i, j| data.x()[(perm[i], j)]);
        let yv = match data.y() {
            Response::Continuous(v) => v.clone(),
            _ => unreachable!(),
        };
        let yp: Vec<f64> = perm.iter().map(|&i| yv[i]).collect();
        let datap = Dataset::from_continuous(xp, yp).unwrap();
        let desp = build_design(&datap, &BasisSpec::Polynomial { degree: 2 }).unwrap();
        assert!((des.sigma() - desp.sigma()).abs().max() < 1e-12);
        assert!((des.sigma_fit() - desp.sigma_fit()).abs().max() < 1e-12);
        assert!((des.bhat() - desp.bhat()).abs().max() < 1e-12);
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut fh = std::fs::File::create(&path).unwrap();
        writeln!(fh, "y,x1,x2").unwrap();
        writeln!(fh, "1.5,0.1,2.0").unwrap();
        writeln!(fh, "2.5,0.2,1.0").unwrap();
        writeln!(fh, "3.5,0.3,0.5").unwrap();
        drop(fh);
        let data = load_csv(&path, "y", None, false).unwrap();
        assert_eq!(data.n(), 3);
        assert_eq!(data.p(), 2);
        assert!(matches!(data.y(), Response::Continuous(_)));
        assert_eq!(data.predictor_names(), &["x1", "x2"]);

        // Subset + reorder predictors.
        let sub = load_csv(&path, "y", Some(&["x2".to_string()]), false).unwrap();
        assert_eq!(sub.p(), 1);
        assert_eq!(sub.x()[(0, 0)], 2.0);

        assert!(matches!(
            load_csv(&path, "z", None, false),
            Err(PfcError::SchemaError(_))
        ));

        let bad = dir.path().join("bad.csv");
        let mut fh = std::fs::File::create(&bad).unwrap();
        writeln!(fh, "y,x1").unwrap();
        writeln!(fh, "1.0,0.5").unwrap();
        writeln!(fh, "2.0,oops").unwrap();
        drop(fh);
        match load_csv(&bad, "y", None, false) {
            Err(PfcError::ParseError { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "x1");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let nan = dir.path().join("nan.csv");
        let mut fh = std::fs::File::create(&nan).unwrap();
        writeln!(fh, "y,x1").unwrap();
        writeln!(fh, "1.0,NaN").unwrap();
        writeln!(fh, "2.0,0.5").unwrap();
        drop(fh);
        assert!(matches!(
            load_csv(&nan, "y", None, false),
            Err(PfcError::ParseError { row: 1, .. })
        ));
    }

    #[test]
    fn csv_categorical_detection_and_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lab.csv");
        let mut fh = std::fs::File::create(&path).unwrap();
        writeln!(fh, "grp,x1").unwrap();
        writeln!(fh, "a,0.1").unwrap();
        writeln!(fh, "b,0.2").unwrap();
        writeln!(fh, "a,0.3").unwrap();
        drop(fh);
        let data = load_csv(&path, "grp", None, false).unwrap();
        assert!(matches!(data.y(), Response::Categorical(_)));

        let codes = dir.path().join("codes.csv");
        let mut fh = std::fs::File::create(&codes).unwrap();
        writeln!(fh, "grp,x1").unwrap();
        writeln!(fh, "1,0.1").unwrap();
        writeln!(fh, "2,0.2").unwrap();
        drop(fh);
        let auto = load_csv(&codes, "grp", None, false).unwrap();
        assert!(matches!(auto.y(), Response::Continuous(_)));
        let forced = load_csv(&codes, "grp", None, true).unwrap();
        assert!(matches!(forced.y(), Response::Categorical(_)));
    }

    #[test]
    fn basis_spec_parser() {
        assert!(matches!(
            BasisSpec::parse("poly:3").unwrap(),
            BasisSpec::Polynomial { degree: 3 }
        ));
        assert!(matches!(
            BasisSpec::parse("slices:8").unwrap(),
            BasisSpec::Slices { count: 8 }
        ));
        assert!(matches!(
            BasisSpec::parse("piecewise:4:2").unwrap(),
            BasisSpec::PiecewisePolynomial { count: 4, degree: 2 }
        ));
        assert!(matches!(
            BasisSpec::parse("categorical").unwrap(),
            BasisSpec::Categorical
        ));
        assert!(BasisSpec::parse("poly").is_err());
        assert!(BasisSpec::parse("fourier:2").is_err());
    }

    #[test]
    fn dataset_validation() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(Dataset::from_continuous(x.clone(), vec![1.0, 1.0]).is_err());
        assert!(Dataset::from_continuous(x.clone(), vec![1.0]).is_err());
        let bad = DMatrix::from_row_slice(2, 1, &[f64::NAN, 2.0]);
        assert!(Dataset::from_continuous(bad, vec![1.0, 2.0]).is_err());
        assert!(Dataset::new(
            x,
            Response::Continuous(vec![1.0, 2.0]),
            vec!["a".into(), "a".into()]
        )
        .is_err());
    }
}
