//! Dimension selection and chi-square tests on the fitted model.
//!
//! Everything here is a function of the cached design spectra. The
//! sequential likelihood-ratio test compares each working dimension `w`
//! against the saturated model; the information criteria penalize the
//! profile likelihood by the analytic parameter count; the predictor tests
//! compare the full fit against a model in which a chosen block of
//! predictors carries no information about the response given the rest.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::DesignMatrices;
use crate::error::{FitWarning, PfcError};
use crate::linalg::{self, chi2_sf, eig_sym_desc, Subspace};
use crate::pfc::loglik_profile;
use crate::Result;

/// Information criterion flavor: both use penalty `h(n) * g(w)` with `g`
/// the parameter count; AIC takes `h = 2`, BIC `h = log n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Aic,
    Bic,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Aic => "aic",
            Criterion::Bic => "bic",
        })
    }
}

/// Outcome of a single chi-square test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestReport {
    /// What was tested: `dimension_lrt`, `predictor_drop`, or
    /// `covariance_structure`.
    pub kind: String,
    /// Likelihood-ratio statistic, clamped at zero (values in `[-1e-8, 0)`
    /// are roundoff; anything lower aborts as an internal error).
    pub statistic: f64,
    pub df: u64,
    pub p_value: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<FitWarning>,
}

impl TestReport {
    pub(crate) fn new(kind: &str, statistic: f64, df: u64) -> Result<Self> {
        if statistic < -1e-8 {
            return Err(PfcError::InternalInconsistency(format!(
                "{kind} statistic {statistic} is negative beyond roundoff"
            )));
        }
        let statistic = statistic.max(0.0);
        Ok(TestReport {
            kind: kind.to_string(),
            statistic,
            df,
            p_value: chi2_sf(statistic, df)?,
            warnings: Vec::new(),
        })
    }
}

/// One row of a dimension-selection table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimRow {
    pub w: usize,
    pub loglik: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub statistic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ic: Option<f64>,
    pub decision: String,
}

/// A dimension choice with the full per-`w` table that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimSelection {
    /// `lrt`, `aic`, or `bic`.
    pub method: String,
    pub chosen_d: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub per_w: Vec<DimRow>,
}

/// Sequential likelihood-ratio selection of the reduction dimension.
///
/// For each `w < min(p, r)` the statistic `2(L_sat - L_w)` is referred to a
/// chi-square with `(r - w)(p - w)` degrees of freedom; the chosen
/// dimension is the first `w` the data do not reject at level `alpha`, or
/// `min(p, r)` if every hypothesis is rejected.
pub fn select_d_lrt(des: &DesignMatrices, alpha: f64) -> Result<DimSelection> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PfcError::InvalidInput(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    let (p, r, tau) = (des.p(), des.r(), des.tau());
    let n = des.n() as f64;
    let mut rows = Vec::with_capacity(tau + 1);
    let mut chosen: Option<usize> = None;
    for w in 0..tau {
        let loglik = loglik_profile(des, w)?;
        let tail: f64 = des.corr_sq()[w..tau].iter().map(|r2| (1.0 - r2).ln()).sum();
        let df = ((r - w) * (p - w)) as u64;
        let report = TestReport::new("dimension_lrt", -n * tail, df)?;
        let accept = report.p_value > alpha;
        if accept && chosen.is_none() {
            chosen = Some(w);
        }
        rows.push(DimRow {
            w,
            loglik,
            statistic: Some(report.statistic),
            df: Some(df),
            p_value: Some(report.p_value),
            ic: None,
            decision: if accept { "accept" } else { "reject" }.to_string(),
        });
    }
    rows.push(DimRow {
        w: tau,
        loglik: loglik_profile(des, tau)?,
        statistic: None,
        df: None,
        p_value: None,
        ic: None,
        decision: "saturated".to_string(),
    });
    Ok(DimSelection {
        method: "lrt".to_string(),
        chosen_d: chosen.unwrap_or(tau),
        alpha: Some(alpha),
        per_w: rows,
    })
}

/// Parameter count of the model at working dimension `w`: mean vector,
/// subspace coordinates, regression coefficients, and the symmetric error
/// covariance.
fn param_count(p: usize, r: usize, w: usize) -> usize {
    p + w * (p - w) + r * w + p * (p + 1) / 2
}

/// Information-criterion selection of the reduction dimension: minimize
/// `-2 L_w + h(n) g(w)` over `w = 0..=min(p, r)`, ties to the smallest `w`.
pub fn select_d_ic(des: &DesignMatrices, criterion: Criterion) -> Result<DimSelection> {
    let (p, r, tau) = (des.p(), des.r(), des.tau());
    let n = des.n() as f64;
    let h = match criterion {
        Criterion::Aic => 2.0,
        Criterion::Bic => n.ln(),
    };
    let mut rows = Vec::with_capacity(tau + 1);
    let mut best: Option<(usize, f64)> = None;
    for w in 0..=tau {
        let loglik = loglik_profile(des, w)?;
        let ic = -2.0 * loglik + h * param_count(p, r, w) as f64;
        if best.map_or(true, |(_, b)| ic < b) {
            best = Some((w, ic));
        }
        rows.push(DimRow {
            w,
            loglik,
            statistic: None,
            df: None,
            p_value: None,
            ic: Some(ic),
            decision: String::new(),
        });
    }
    let (chosen, _) = best.expect("at least one w");
    rows[chosen].decision = "min".to_string();
    Ok(DimSelection {
        method: criterion.to_string(),
        chosen_d: chosen,
        alpha: None,
        per_w: rows,
    })
}

/// Result of testing whether a block of predictors can be dropped.
#[derive(Debug, Clone)]
pub struct PredictorTest {
    pub report: TestReport,
    /// The same statistic assembled from canonical correlations and Schur
    /// complements instead of likelihood values; the two agree to roundoff
    /// and disagreement flags a bug.
    pub statistic_corr_form: f64,
    pub loglik_full: f64,
    pub loglik_restricted: f64,
    /// Estimated reduction under the restriction: rows of excluded
    /// predictors are exactly zero.
    pub restricted_subspace: Subspace,
    /// The active (retained) predictor indices, as given.
    pub active: Vec<usize>,
    /// Dimension at which the comparison was made.
    pub working_d: usize,
}

/// Symmetric permutation `out[i][j] = m[perm[i]][perm[j]]`.
fn permute_sym(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(perm.len(), perm.len(), |i, j| m[(perm[i], perm[j])])
}

/// Log-determinant of a symmetric positive definite matrix via its
/// spectrum.
fn sym_logdet(a: &DMatrix<f64>, what: &str) -> Result<f64> {
    let eig = eig_sym_desc(a)?;
    let lead = eig.values[0].max(0.0);
    let min = *eig.values.last().expect("nonempty");
    if min <= linalg::RANK_TOL * lead || min <= 0.0 {
        return Err(PfcError::SingularMatrix(format!(
            "{what} has eigenvalue {min:.6e}"
        )));
    }
    Ok(eig.values.iter().map(|v| v.ln()).sum())
}

/// `A22 - A21 A11^{-1} A12` for the leading `p1 x p1` block split.
fn schur_complement(a: &DMatrix<f64>, p1: usize) -> Result<DMatrix<f64>> {
    let p = a.nrows();
    let p2 = p - p1;
    let a11 = a.view((0, 0), (p1, p1)).into_owned();
    let a12 = a.view((0, p1), (p1, p2)).into_owned();
    let a22 = a.view((p1, p1), (p2, p2)).into_owned();
    let chol = a11
        .cholesky()
        .ok_or_else(|| PfcError::SingularMatrix("leading block is not positive definite".into()))?;
    let solved = chol.solve(&a12);
    let mut out = a22 - a12.transpose() * solved;
    for i in 0..p2 {
        for j in (i + 1)..p2 {
            let v = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Spectrum of `w_half * m * w_half` clamped to the rank bound, plus the
/// eigenvectors; the workhorse for blockwise whitened spectra.
fn whitened_spectrum(
    w_half: &DMatrix<f64>,
    m: &DMatrix<f64>,
    tau: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let mut prod = w_half * m * w_half;
    for i in 0..prod.nrows() {
        for j in (i + 1)..prod.ncols() {
            let v = 0.5 * (prod[(i, j)] + prod[(j, i)]);
            prod[(i, j)] = v;
            prod[(j, i)] = v;
        }
    }
    let eig = eig_sym_desc(&prod)?;
    let mut values = eig.values;
    for (i, v) in values.iter_mut().enumerate() {
        *v = v.max(0.0);
        if i >= tau {
            *v = 0.0;
        }
    }
    Ok((values, eig.vectors))
}

/// Tests whether the predictors outside `active` can be dropped: compares
/// the full fit at dimension `d` against the model in which only the
/// active block carries response information, via a chi-square with
/// `d * (p - p1)` degrees of freedom.
///
/// `active` lists retained predictor indices (0-based, any order, no
/// duplicates) and must be a nonempty proper subset; `d` must satisfy
/// `1 <= d <= min(r, p1)`. Internally the coordinates are permuted so the
/// active block leads, the partitioned formulas run, and the restricted
/// subspace is permuted back — excluded rows are exactly zero.
pub fn test_predictors(des: &DesignMatrices, d: usize, active: &[usize]) -> Result<PredictorTest> {
    let p = des.p();
    let r = des.r();
    let n = des.n() as f64;
    let p1 = active.len();
    if p1 == 0 || p1 >= p {
        return Err(PfcError::InvalidInput(format!(
            "active set must be a nonempty proper subset of 0..{p}"
        )));
    }
    let mut seen = vec![false; p];
    for &j in active {
        if j >= p {
            return Err(PfcError::InvalidInput(format!(
                "active index {j} out of range 0..{p}"
            )));
        }
        if seen[j] {
            return Err(PfcError::InvalidInput(format!("duplicate active index {j}")));
        }
        seen[j] = true;
    }
    let tau1 = r.min(p1);
    if d == 0 || d > tau1 {
        return Err(PfcError::InvalidInput(format!(
            "dimension d={d} out of range 1..={tau1} for {p1} active predictors"
        )));
    }
    let p2 = p - p1;

    let mut perm: Vec<usize> = active.to_vec();
    for (j, &used) in seen.iter().enumerate() {
        if !used {
            perm.push(j);
        }
    }
    let sig = permute_sym(des.sigma(), &perm);
    let sig_fit = permute_sym(des.sigma_fit(), &perm);
    let sig_res = permute_sym(des.sigma_res(), &perm);

    let s11_res = sig_res.view((0, 0), (p1, p1)).into_owned();
    let s11_fit = sig_fit.view((0, 0), (p1, p1)).into_owned();
    let s11 = sig.view((0, 0), (p1, p1)).into_owned();

    let res_w = linalg::sym_power(&s11_res, -0.5)?;
    let (lambda1, vecs1) = whitened_spectrum(&res_w, &s11_fit, tau1)?;

    let sc = schur_complement(&sig, p1)?;
    let logdet_sc = sym_logdet(&sc, "conditional covariance of the dropped block")?;
    let logdet_s11_res = sym_logdet(&s11_res, "active-block residual covariance")?;

    // Restricted maximized log-likelihood: active-block spectrum term plus
    // the conditional covariance of the dropped block.
    let two_pi = (2.0 * std::f64::consts::PI).ln();
    let tail1: f64 = lambda1[d..tau1].iter().map(|l| (1.0 + l).ln()).sum();
    let loglik_restricted = -0.5 * n * (p as f64 * two_pi + p as f64)
        - 0.5 * n * (logdet_s11_res + logdet_sc)
        - 0.5 * n * tail1;
    let loglik_full = loglik_profile(des, d)?;
    let mut report = TestReport::new(
        "predictor_drop",
        2.0 * (loglik_full - loglik_restricted),
        (d * p2) as u64,
    )?;

    // Cross-check route: Schur complements of total and residual covariance
    // plus the two canonical-correlation spectra.
    let sc_res = schur_complement(&sig_res, p1)?;
    let logdet_sc_res = sym_logdet(&sc_res, "residual conditional covariance")?;
    let sig_w = linalg::sym_power(&s11, -0.5)?;
    let (t_sq_raw, _) = whitened_spectrum(&sig_w, &s11_fit, tau1)?;
    let t_sq: Vec<f64> = t_sq_raw.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let tau = des.tau();
    let full_tail: f64 = des.corr_sq()[d..tau].iter().map(|r2| (1.0 - r2).ln()).sum();
    let block_tail: f64 = t_sq[d..tau1].iter().map(|t2| (1.0 - t2).ln()).sum();
    let statistic_corr_form =
        n * (logdet_sc - logdet_sc_res) + n * full_tail - n * block_tail;

    // Restricted subspace: whitened leading block, zero rows elsewhere,
    // permuted back to the original predictor order.
    let block = Subspace::from_span(&(&res_w * vecs1.columns(0, d)).into_owned())?;
    let mut basis = DMatrix::zeros(p, d);
    for i in 0..p1 {
        for j in 0..d {
            basis[(perm[i], j)] = block.basis()[(i, j)];
        }
    }
    let restricted_subspace = Subspace::new(basis)?;

    if let Some(w) = degenerate_block_warning(&lambda1, d, tau1) {
        report.warnings.push(w);
    }

    Ok(PredictorTest {
        report,
        statistic_corr_form,
        loglik_full,
        loglik_restricted,
        restricted_subspace,
        active: active.to_vec(),
        working_d: d,
    })
}

fn degenerate_block_warning(values: &[f64], d: usize, tau: usize) -> Option<FitWarning> {
    let lead = values.first().copied().unwrap_or(0.0);
    if d < tau {
        let gap = values[d - 1] - values[d];
        if gap < linalg::GAP_TOL * lead.max(1e-300) {
            return Some(FitWarning::DegenerateSpectrum {
                detail: format!(
                    "active-block eigenvalues {d} and {} are tied (gap {gap:.3e})",
                    d + 1
                ),
            });
        }
    }
    None
}

/// [`test_predictors`] at the largest usable working dimension
/// `w = min(r, p1)`, which requires no commitment to a reduction dimension:
/// the active-block spectrum term drops out entirely.
pub fn test_predictors_maxw(des: &DesignMatrices, active: &[usize]) -> Result<PredictorTest> {
    let p1 = active.len();
    let w = des.r().min(p1);
    if w == 0 {
        return Err(PfcError::InvalidInput(
            "active set must be nonempty".to_string(),
        ));
    }
    test_predictors(des, w, active)
}

/// One removal step of the backward elimination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EliminationRound {
    pub removed: usize,
    pub removed_name: String,
    pub p_value: f64,
}

/// Backward predictor elimination trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EliminationTrace {
    /// Retained predictor indices, ascending.
    pub retained: Vec<usize>,
    pub rounds: Vec<EliminationRound>,
}

/// Greedy backward elimination at fixed dimension `d`: each round drops the
/// predictor whose removal test has the largest p-value, as long as that
/// p-value exceeds `alpha` and enough predictors remain to support `d`.
pub fn backward_elimination(
    des: &DesignMatrices,
    d: usize,
    alpha: f64,
) -> Result<EliminationTrace> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PfcError::InvalidInput(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    let p = des.p();
    if d == 0 || d > des.tau() {
        return Err(PfcError::InvalidInput(format!(
            "dimension d={d} out of range 1..={}",
            des.tau()
        )));
    }
    let mut active: Vec<usize> = (0..p).collect();
    let mut rounds = Vec::new();
    loop {
        if active.len() <= 1 || active.len() - 1 < d {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for (slot, &j) in active.iter().enumerate() {
            let candidate: Vec<usize> = active
                .iter()
                .enumerate()
                .filter(|(s, _)| *s != slot)
                .map(|(_, &v)| v)
                .collect();
            let test = test_predictors(des, d, &candidate)?;
            if best.map_or(true, |(_, bp)| test.report.p_value > bp) {
                best = Some((j, test.report.p_value));
            }
        }
        match best {
            Some((j, p_value)) if p_value > alpha => {
                active.retain(|&v| v != j);
                rounds.push(EliminationRound {
                    removed: j,
                    removed_name: des.predictor_names()[j].clone(),
                    p_value,
                });
            }
            _ => break,
        }
    }
    Ok(EliminationTrace {
        retained: active,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, BasisSpec, Dataset};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn signal_dataset(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(n, p);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let yi: f64 = rng.gen_range(-2.0..2.0);
            for j in 0..p {
                let load = if j < 3 { 1.0 } else { 0.0 };
                x[(i, j)] = load * yi + 0.6 * normal(&mut rng);
            }
            y.push(yi);
        }
        Dataset::from_continuous(x, y).unwrap()
    }

    fn noise_dataset(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| normal(&mut rng));
        let y: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        Dataset::from_continuous(x, y).unwrap()
    }

    #[test]
    fn lrt_degrees_of_freedom_match_parameter_counts() {
        // df at working dimension w must equal the analytic difference of
        // model dimensions, for r on both sides of p.
        for (p, r) in [(5usize, 3usize), (3, 5), (4, 4), (6, 1)] {
            let tau = p.min(r);
            for w in 0..tau {
                let diff = param_count(p, r, tau) - param_count(p, r, w);
                assert_eq!(diff, (r - w) * (p - w), "p={p} r={r} w={w}");
            }
        }
        // Worked example: p = 5, r = 3, w = 1.
        assert_eq!((3 - 1) * (5 - 1), 8);
    }

    #[test]
    fn predictor_df_matches_parameter_counts() {
        let restricted = |p: usize, p1: usize, r: usize, d: usize| {
            p + d * (p1 - d) + r * d + p * (p + 1) / 2
        };
        for (p, p1, r, d) in [(6usize, 4usize, 3usize, 2usize), (10, 7, 1, 1), (5, 2, 4, 2)] {
            let diff = param_count(p, r, d) - restricted(p, p1, r, d);
            assert_eq!(diff, d * (p - p1), "p={p} p1={p1} d={d}");
        }
    }

    #[test]
    fn lrt_table_shape_and_choice() {
        let data = signal_dataset(300, 5, 1);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 2 }).unwrap();
        let sel = select_d_lrt(&des, 0.05).unwrap();
        assert_eq!(sel.per_w.len(), des.tau() + 1);
        // Strong one-dimensional signal: w=0 rejected, w=1 accepted.
        assert_eq!(sel.per_w[0].decision, "reject");
        assert_eq!(sel.chosen_d, 1);
        for row in &sel.per_w {
            if let Some(s) = row.statistic {
                assert!(s >= 0.0);
            }
            if let (Some(pv), Some(_)) = (row.p_value, row.df) {
                assert!((0.0..=1.0).contains(&pv));
            }
        }
        // Statistics are consistent with the profile likelihoods.
        let sat = sel.per_w.last().unwrap().loglik;
        for row in &sel.per_w[..des.tau()] {
            let want = 2.0 * (sat - row.loglik);
            assert_relative_eq!(row.statistic.unwrap(), want, epsilon = 1e-7);
        }
    }

    #[test]
    fn lrt_choice_shrinks_with_alpha() {
        // Raising alpha makes rejection easier, so the chosen dimension is
        // nondecreasing in alpha.
        let data = signal_dataset(250, 4, 7);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 3 }).unwrap();
        let mut last = 0usize;
        for alpha in [0.001, 0.01, 0.05, 0.2, 0.5] {
            let sel = select_d_lrt(&des, alpha).unwrap();
            assert!(sel.chosen_d >= last);
            last = sel.chosen_d;
        }
    }

    #[test]
    fn ic_prefers_true_dimension_with_signal() {
        let data = signal_dataset(400, 5, 3);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 2 }).unwrap();
        for crit in [Criterion::Aic, Criterion::Bic] {
            let sel = select_d_ic(&des, crit).unwrap();
            assert_eq!(sel.chosen_d, 1, "{crit} chose {}", sel.chosen_d);
            assert_eq!(sel.per_w.len(), des.tau() + 1);
            let min_ic = sel
                .per_w
                .iter()
                .map(|r| r.ic.unwrap())
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(sel.per_w[sel.chosen_d].ic.unwrap(), min_ic);
        }
    }

    #[test]
    fn null_lrt_keeps_dimension_zero_at_about_one_minus_alpha() {
        // Pure noise: the first test accepts w = 0 with probability close
        // to 1 - alpha.
        let reps = 400;
        let mut kept = 0usize;
        for rep in 0..reps {
            let data = noise_dataset(200, 3, 1000 + rep as u64);
            let des = build_design(&data, &BasisSpec::Polynomial { degree: 2 }).unwrap();
            let sel = select_d_lrt(&des, 0.05).unwrap();
            if sel.chosen_d == 0 {
                kept += 1;
            }
        }
        let frac = kept as f64 / reps as f64;
        assert!(
            (frac - 0.95).abs() < 0.035,
            "null acceptance rate {frac} far from 0.95"
        );
    }

    #[test]
    fn predictor_test_dual_forms_agree() {
        for seed in [2u64, 9, 31] {
            let data = signal_dataset(250, 6, seed);
            let des = build_design(&data, &BasisSpec::Polynomial { degree: 2 }).unwrap();
            let test = test_predictors(&des, 1, &[0, 1, 2, 4]).unwrap();
            assert_relative_eq!(
                test.report.statistic,
                test.statistic_corr_form,
                max_relative = 1e-8,
                epsilon = 1e-8
            );
            assert!(test.loglik_full >= test.loglik_restricted - 1e-8);
            assert_eq!(test.report.df, 2); // d * p2 = 1 * 2
        }
    }

    #[test]
    fn predictor_test_zeroes_dropped_rows_exactly() {
        let data = signal_dataset(220, 5, 12);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 2 }).unwrap();
        let active = [4usize, 0, 2];
        let test = test_predictors(&des, 1, &active).unwrap();
        let basis = test.restricted_subspace.basis();
        for dropped in [1usize, 3] {
            for j in 0..basis.ncols() {
                assert_eq!(basis[(dropped, j)], 0.0);
            }
        }
        // Active rows carry the mass.
        let norm: f64 = active.iter().map(|&i| basis[(i, 0)].powi(2)).sum();
        assert_relative_eq!(norm, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn predictor_test_detects_informative_block() {
        // Dropping informative predictors must always reject; dropping a
        // pure-noise block gives uniform p-values, so check their median.
        let mut noise_ps = Vec::new();
        for seed in 0..9u64 {
            let data = signal_dataset(300, 6, seed);
            let des = build_design(&data, &BasisSpec::Polynomial { degree: 1 }).unwrap();
            // Predictors 0..3 carry signal; active = {3,4,5} drops them.
            let informative_drop = test_predictors(&des, 1, &[3, 4, 5]).unwrap();
            assert!(informative_drop.report.p_value < 1e-6, "seed {seed}");
            // active = {0,1,2} drops the noise block.
            noise_ps.push(test_predictors(&des, 1, &[0, 1, 2]).unwrap().report.p_value);
        }
        noise_ps.sort_by(f64::total_cmp);
        assert!(
            noise_ps[noise_ps.len() / 2] > 0.1,
            "median null p-value {:?} too small",
            noise_ps
        );
    }

    #[test]
    fn maxw_equals_capped_dimension() {
        let data = signal_dataset(260, 5, 8);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 2 }).unwrap();
        let active = [0usize, 1, 2];
        let a = test_predictors_maxw(&des, &active).unwrap();
        let b = test_predictors(&des, 2, &active).unwrap(); // min(r, p1) = 2
        assert_relative_eq!(a.report.statistic, b.report.statistic);
        assert_eq!(a.report.df, b.report.df);
        assert_eq!(a.working_d, 2);
    }

    #[test]
    fn predictor_test_validation() {
        let data = signal_dataset(100, 4, 3);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 2 }).unwrap();
        assert!(test_predictors(&des, 1, &[]).is_err());
        assert!(test_predictors(&des, 1, &[0, 1, 2, 3]).is_err());
        assert!(test_predictors(&des, 1, &[0, 0]).is_err());
        assert!(test_predictors(&des, 1, &[9]).is_err());
        assert!(test_predictors(&des, 3, &[0, 1]).is_err()); // d > min(r, p1)
    }

    #[test]
    fn backward_elimination_keeps_signal_block() {
        let data = signal_dataset(400, 6, 21);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 1 }).unwrap();
        let trace = backward_elimination(&des, 1, 0.05).unwrap();
        // The three informative predictors must survive.
        for j in 0..3 {
            assert!(
                trace.retained.contains(&j),
                "informative predictor {j} eliminated; retained {:?}",
                trace.retained
            );
        }
        // Rounds removed only noise predictors, in decreasing usefulness.
        for round in &trace.rounds {
            assert!(round.removed >= 3);
            assert!(round.p_value > 0.05);
        }
    }

    #[test]
    fn alpha_validation() {
        let data = signal_dataset(100, 3, 2);
        let des = build_design(&data, &BasisSpec::Polynomial { degree: 1 }).unwrap();
        assert!(select_d_lrt(&des, 0.0).is_err());
        assert!(select_d_lrt(&des, 1.0).is_err());
        assert!(backward_elimination(&des, 1, -0.1).is_err());
    }
}
