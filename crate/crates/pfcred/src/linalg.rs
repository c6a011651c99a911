//! Dense symmetric-matrix kernels and the chi-square tail.
//!
//! Everything downstream reduces to a handful of operations on small
//! symmetric matrices: an ordered eigendecomposition with a deterministic
//! sign convention, real matrix powers, the span of leading generalized
//! eigenvectors of a pencil `(B, A)`, and principal angles between subspaces.
//! Centralizing them here pins down the conventions (ordering, signs,
//! tolerances) once, so fits and tests built on top are reproducible
//! bit-for-bit.

use nalgebra::DMatrix;

use crate::error::PfcError;
use crate::Result;

/// Relative tolerance below which an eigenvalue counts as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Relative gap under which adjacent eigenvalues count as tied.
pub const GAP_TOL: f64 = 1e-9;

/// Eigendecomposition of a symmetric matrix with eigenvalues in descending
/// order and columns of `vectors` aligned to `values`.
///
/// Signs are fixed so that each eigenvector's entry of largest absolute value
/// is nonnegative (ties broken by the lowest row index). With distinct
/// eigenvalues this makes the decomposition unique, which in turn makes every
/// reported basis deterministic.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    /// Largest absolute eigenvalue.
    pub fn spectral_radius(&self) -> f64 {
        self.values
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }
}

/// An orthonormal basis for a linear subspace of `R^p`.
///
/// Columns are orthonormal in the Euclidean inner product and sign-fixed by
/// the same convention as [`SymEigen`], so two equal subspaces produced by
/// the same code path compare equal entrywise.
#[derive(Debug, Clone)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Wraps an already-orthonormal basis, validating `BᵀB = I` to `1e-8`.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let (p, d) = basis.shape();
        if d == 0 || d > p {
            return Err(PfcError::InvalidInput(format!(
                "subspace dimension {d} must be in 1..={p}"
            )));
        }
        check_finite(&basis)?;
        let gram = basis.transpose() * &basis;
        let dev = (&gram - DMatrix::identity(d, d)).abs().max();
        if dev > 1e-8 {
            return Err(PfcError::InvalidInput(format!(
                "basis columns are not orthonormal (max deviation {dev:.3e})"
            )));
        }
        Ok(Subspace { basis })
    }

    /// Orthonormalizes the columns of `span` (QR) and applies the sign
    /// convention. Errors if the columns are linearly dependent at the rank
    /// tolerance.
    pub fn from_span(span: &DMatrix<f64>) -> Result<Self> {
        let (p, d) = span.shape();
        if d == 0 || d > p {
            return Err(PfcError::InvalidInput(format!(
                "span with {d} columns cannot define a subspace of R^{p}"
            )));
        }
        check_finite(span)?;
        let qr = span.clone().qr();
        let (q, r) = (qr.q(), qr.r());
        let scale = r.abs().max();
        if scale == 0.0 {
            return Err(PfcError::InvalidInput(
                "span columns are all zero".to_string(),
            ));
        }
        for j in 0..d {
            if r[(j, j)].abs() < RANK_TOL * scale {
                return Err(PfcError::InvalidInput(format!(
                    "span columns are linearly dependent (pivot {j} below rank tolerance)"
                )));
            }
        }
        let mut basis = q;
        fix_column_signs(&mut basis);
        Ok(Subspace { basis })
    }

    /// The orthonormal basis, `p x dim`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Subspace dimension.
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Ambient dimension.
    pub fn ambient(&self) -> usize {
        self.basis.nrows()
    }
}

/// Flips eigenvector/basis column signs so the entry of largest absolute
/// value in each column is nonnegative, ties broken by lowest index.
pub(crate) fn fix_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut best = 0usize;
        let mut best_abs = m[(0, j)].abs();
        for i in 1..m.nrows() {
            let a = m[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m[(best, j)] < 0.0 {
            for i in 0..m.nrows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

fn check_finite(a: &DMatrix<f64>) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(PfcError::InvalidInput(
            "matrix contains non-finite entries".to_string(),
        ));
    }
    Ok(())
}

/// Validates that `a` is square and symmetric to `1e-8` relative, returning
/// the symmetrized matrix `(A + Aᵀ)/2` used for computation.
pub(crate) fn validate_symmetric(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(PfcError::InvalidInput(format!(
            "expected a nonempty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    check_finite(a)?;
    let scale = a.abs().max().max(1e-300);
    let mut max_asym = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            max_asym = max_asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if max_asym > 1e-8 * scale {
        return Err(PfcError::InvalidInput(format!(
            "matrix is not symmetric (max asymmetry {max_asym:.3e} vs scale {scale:.3e})"
        )));
    }
    let mut sym = a.clone();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            sym[(i, j)] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    Ok(sym)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: returns the
/// unsorted eigenvalues and the matching eigenvector columns.
///
/// nalgebra's built-in symmetric eigensolver can return factorizations
/// whose reconstruction error is far above roundoff when the spectrum
/// spans several orders of magnitude, which breaks downstream likelihood
/// identities; Jacobi sweeps converge to machine precision for every
/// symmetric input at `O(p^3)` per sweep.
fn jacobi_sym(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let p = a.nrows();
    let mut m = a.clone();
    let mut v = DMatrix::<f64>::identity(p, p);
    if p > 1 {
        let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        let mut converged = false;
        for _sweep in 0..60 {
            let off: f64 = (0..p)
                .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
                .map(|(i, j)| 2.0 * m[(i, j)] * m[(i, j)])
                .sum::<f64>()
                .sqrt();
            if off <= 1e-15 * scale {
                converged = true;
                break;
            }
            for i in 0..p - 1 {
                for j in (i + 1)..p {
                    let apq = m[(i, j)];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (m[(j, j)] - m[(i, i)]) / (2.0 * apq);
                    let t = if theta.abs() > 1.0e150 {
                        0.5 / theta
                    } else {
                        let root = (1.0 + theta * theta).sqrt();
                        if theta >= 0.0 {
                            1.0 / (theta + root)
                        } else {
                            1.0 / (theta - root)
                        }
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    let shrink = s / (1.0 + c);
                    m[(i, i)] -= t * apq;
                    m[(j, j)] += t * apq;
                    m[(i, j)] = 0.0;
                    m[(j, i)] = 0.0;
                    for k in 0..p {
                        if k == i || k == j {
                            continue;
                        }
                        let g = m[(k, i)];
                        let h = m[(k, j)];
                        m[(k, i)] = g - s * (h + shrink * g);
                        m[(i, k)] = m[(k, i)];
                        m[(k, j)] = h + s * (g - shrink * h);
                        m[(j, k)] = m[(k, j)];
                    }
                    for k in 0..p {
                        let g = v[(k, i)];
                        let h = v[(k, j)];
                        v[(k, i)] = g - s * (h + shrink * g);
                        v[(k, j)] = h + s * (g - shrink * h);
                    }
                }
            }
        }
        if !converged {
            let off: f64 = (0..p)
                .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
                .map(|(i, j)| 2.0 * m[(i, j)] * m[(i, j)])
                .sum::<f64>()
                .sqrt();
            if off > 1e-10 * scale {
                return Err(PfcError::NumericalDegeneracy(format!(
                    "eigensolver did not converge (off-diagonal mass {off:.3e} at scale {scale:.3e})"
                )));
            }
        }
    }
    Ok(((0..p).map(|i| m[(i, i)]).collect(), v))
}

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted descending,
/// eigenvector signs fixed by the largest-entry convention.
pub fn eig_sym_desc(a: &DMatrix<f64>) -> Result<SymEigen> {
    let sym = validate_symmetric(a)?;
    let p = sym.nrows();
    let (raw_values, raw_vectors) = jacobi_sym(&sym)?;
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| {
        raw_values[j]
            .partial_cmp(&raw_values[i])
            .expect("eigenvalues are finite")
    });
    let values: Vec<f64> = order.iter().map(|&i| raw_values[i]).collect();
    let mut vectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &raw_vectors.column(src));
    }
    fix_column_signs(&mut vectors);
    Ok(SymEigen { values, vectors })
}

/// Real power `A^e` of a symmetric positive semidefinite matrix, intended
/// for `e` in `{1/2, -1/2, -1}`.
///
/// Eigenvalues in `[-RANK_TOL * lambda_max, 0]` are clipped to zero before
/// the power is applied; anything more negative is rejected as not positive
/// semidefinite. Negative powers additionally require the smallest
/// eigenvalue to clear the rank tolerance.
pub fn sym_power(a: &DMatrix<f64>, exponent: f64) -> Result<DMatrix<f64>> {
    if !exponent.is_finite() {
        return Err(PfcError::InvalidInput(
            "matrix power exponent must be finite".to_string(),
        ));
    }
    let eig = eig_sym_desc(a)?;
    let lambda_max = eig.values.first().copied().unwrap_or(0.0).max(0.0);
    let clip = RANK_TOL * lambda_max;
    let mut values = eig.values.clone();
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v >= -clip {
                *v = 0.0;
            } else {
                return Err(PfcError::NotPSD(format!(
                    "eigenvalue {v:.6e} below -{clip:.3e}"
                )));
            }
        }
    }
    if exponent < 0.0 {
        let min = values.last().copied().unwrap_or(0.0);
        if min <= clip || min == 0.0 {
            return Err(PfcError::SingularMatrix(format!(
                "smallest eigenvalue {min:.6e} under rank tolerance {clip:.3e} for negative power"
            )));
        }
    }
    let p = a.nrows();
    let mut scaled = eig.vectors.clone();
    for j in 0..p {
        let w = if values[j] == 0.0 {
            0.0
        } else {
            values[j].powf(exponent)
        };
        for i in 0..p {
            scaled[(i, j)] *= w;
        }
    }
    let mut out = &scaled * eig.vectors.transpose();
    // Exact symmetry keeps downstream validation noise-free.
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Span of the top-`d` generalized eigenvectors of the pencil `(B, A)`:
/// whiten by `A^{-1/2}`, take the `d` leading eigenvectors of
/// `A^{-1/2} B A^{-1/2}`, and map back through `A^{-1/2}`.
///
/// `A` must be symmetric positive definite and `B` symmetric positive
/// semidefinite. The returned basis is orthonormalized; when eigenvalues at
/// the `d` boundary tie, the deterministic eigensolver plus sign convention
/// still produce a repeatable (if arbitrary within the tie) choice.
pub fn generalized_eigen_subspace(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    d: usize,
) -> Result<Subspace> {
    let p = a.nrows();
    if b.nrows() != p || b.ncols() != p {
        return Err(PfcError::InvalidInput(format!(
            "pencil matrices disagree in size: {}x{} vs {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if d == 0 || d > p {
        return Err(PfcError::InvalidInput(format!(
            "subspace dimension {d} must be in 1..={p}"
        )));
    }
    let white = sym_power(a, -0.5)?;
    let m = validate_symmetric(&(&white * b * &white))?;
    let eig = eig_sym_desc(&m)?;
    let span = &white * eig.vectors.columns(0, d);
    Subspace::from_span(&span.into())
}

/// Principal angles in radians between two subspaces of equal dimension,
/// ascending, each in `[0, pi/2]`.
pub fn principal_angles(s1: &Subspace, s2: &Subspace) -> Result<Vec<f64>> {
    if s1.ambient() != s2.ambient() {
        return Err(PfcError::InvalidInput(format!(
            "subspaces live in different ambient spaces ({} vs {})",
            s1.ambient(),
            s2.ambient()
        )));
    }
    if s1.dim() != s2.dim() {
        return Err(PfcError::InvalidInput(format!(
            "subspaces have different dimensions ({} vs {})",
            s1.dim(),
            s2.dim()
        )));
    }
    let m = s1.basis().transpose() * s2.basis();
    let svd = m.svd(false, false);
    let mut cosines: Vec<f64> = svd.singular_values.iter().copied().collect();
    cosines.sort_by(|x, y| y.partial_cmp(x).expect("singular values are finite"));
    let angles: Vec<f64> = cosines
        .iter()
        .map(|c| c.clamp(0.0, 1.0).acos())
        .collect();
    Ok(angles)
}

/// The largest principal angle, the conservative scalar summary of subspace
/// distance used by the simulation studies.
pub fn largest_principal_angle(s1: &Subspace, s2: &Subspace) -> Result<f64> {
    let angles = principal_angles(s1, s2)?;
    Ok(*angles.last().expect("dimension is at least one"))
}

/// Upper tail `P(X > x)` of the chi-square distribution with `df` degrees of
/// freedom.
///
/// Computed through the regularized incomplete gamma function with the
/// classic split: a lower series when `x < df`, the Lentz continued fraction
/// for the upper tail otherwise. Absolute error is well under `1e-10` across
/// the usable range.
pub fn chi2_sf(x: f64, df: u64) -> Result<f64> {
    if df == 0 {
        return Err(PfcError::InvalidInput(
            "chi-square degrees of freedom must be at least 1".to_string(),
        ));
    }
    if !x.is_finite() || x < 0.0 {
        return Err(PfcError::InvalidInput(format!(
            "chi-square statistic must be finite and nonnegative, got {x}"
        )));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    let a = df as f64 / 2.0;
    let xs = x / 2.0;
    // log of the common prefactor x^a e^{-x} / Gamma(a).
    let log_pre = a * xs.ln() - xs - ln_gamma(a);
    if x < df as f64 {
        Ok((1.0 - lower_gamma_series(a, xs, log_pre)).clamp(0.0, 1.0))
    } else {
        Ok(upper_gamma_cf(a, xs, log_pre).clamp(0.0, 1.0))
    }
}

/// Regularized lower incomplete gamma by power series.
fn lower_gamma_series(a: f64, x: f64, log_pre: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut n = 1.0;
    while n < 1000.0 {
        term *= x / (a + n);
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
        n += 1.0;
    }
    sum * log_pre.exp()
}

/// Regularized upper incomplete gamma by modified Lentz continued fraction.
fn upper_gamma_cf(a: f64, x: f64, log_pre: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b.max(TINY);
    let mut h = d;
    let mut i = 1.0f64;
    while i < 1000.0 {
        let an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
        i += 1.0;
    }
    log_pre.exp() * h
}

/// Natural log of the gamma function, Lanczos approximation (g = 7, 9
/// terms), accurate to about 1e-13 relative over the positive axis.
fn ln_gamma(z: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // Reflection keeps the approximation on its accurate half-line.
        let pi = std::f64::consts::PI;
        return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
}
