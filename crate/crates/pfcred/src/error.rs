use thiserror::Error;

/// Errors shared by every layer of the crate.
///
/// The split matters to the command-line front end: variants describing bad
/// user input map to exit code 2, while numerical failures discovered after
/// validation map to exit code 3.
#[derive(Debug, Error)]
pub enum PfcError {
    /// A required column is missing or the file header is unusable.
    #[error("schema error: {0}")]
    SchemaError(String),

    /// A cell could not be parsed as a finite number. Rows are 1-based data
    /// rows (the header is row 0), columns are named.
    #[error("parse error at row {row}, column {column}: {message}")]
    ParseError {
        row: usize,
        column: String,
        message: String,
    },

    /// Arguments are structurally invalid (dimension out of range, empty
    /// predictor set, mismatched shapes, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The response cannot support the requested basis, e.g. fewer distinct
    /// values than slices.
    #[error("degenerate response: {0}")]
    DegenerateResponse(String),

    /// The centered basis matrix has linearly dependent columns.
    #[error("rank-deficient basis: {0}")]
    RankDeficientBasis(String),

    /// The residual covariance is singular at working precision, so no
    /// unstructured fit exists. Reducing the basis dimension or switching to
    /// a structured error covariance usually recovers a usable model.
    #[error("residual covariance is singular: {0}")]
    ResidualCovSingular(String),

    /// A matrix required to be symmetric positive semidefinite has an
    /// eigenvalue below the clipping tolerance.
    #[error("matrix is not positive semidefinite: {0}")]
    NotPSD(String),

    /// A matrix required to be invertible is singular at the rank tolerance.
    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    /// A quantity left the region where the estimator is defined (canonical
    /// correlation at 1, empty fitted spectrum, ...).
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    /// The structured-covariance fixed point lost positive definiteness and
    /// damping could not restore it.
    #[error("iteration diverged after {iterations} steps: {message}")]
    IterationDiverged { iterations: usize, message: String },

    /// Two routes to the same quantity disagreed beyond tolerance; this is a
    /// bug guard, not a user error.
    #[error("internal consistency check failed: {0}")]
    InternalInconsistency(String),

    /// Underlying I/O failure while reading or writing files.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Non-fatal conditions attached to fit reports.
///
/// Warnings never change the returned estimate; they flag places where the
/// estimate is valid but fragile (ties in a spectrum, an unconverged
/// iteration, a structure whose inverse leaves the modeled span).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitWarning {
    /// Adjacent eigenvalues needed for a unique subspace are closer than
    /// `1e-9` times the spectral radius; the reported basis is one of a
    /// continuum of maximizers.
    DegenerateSpectrum { detail: String },

    /// The fixed-point iteration stopped at `max_iter` without meeting the
    /// convergence tolerance; the best iterate is reported.
    NotConverged { iterations: usize },

    /// The inverse of the fitted structured covariance is not within the
    /// modeled span (relative projection residual above `1e-6`), so
    /// closed-form shortcuts that assume closure do not apply.
    ClosureViolated { residual: f64 },
}

impl std::fmt::Display for FitWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitWarning::DegenerateSpectrum { detail } => {
                write!(f, "degenerate spectrum: {detail}")
            }
            FitWarning::NotConverged { iterations } => {
                write!(f, "fixed point not converged after {iterations} iterations")
            }
            FitWarning::ClosureViolated { residual } => write!(
                f,
                "inverse covariance leaves the structure span (relative residual {residual:.3e})"
            ),
        }
    }
}
