//! Seeded data generators and replicated Monte Carlo studies.
//!
//! Each generator draws from the inverse-regression model `X_y = Gamma
//! nu_y + eps` with a known central subspace, so studies can score fits
//! against the truth. Replications expand a single master seed into
//! independent counter-indexed streams: stream 0 covers one-time setup
//! draws (such as a covariance shared by every replication), stream `k+1`
//! covers replication `k`. Results are therefore bit-identical for a given
//! seed regardless of how many worker threads run the replications.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_design, BasisSpec, Dataset};
use crate::error::PfcError;
use crate::inference::{select_d_ic, select_d_lrt, test_predictors, Criterion};
use crate::linalg::{largest_principal_angle, Subspace};
use crate::pfc::fit_pfc;
use crate::structured::{test_structure, DeltaStructure, FixedPointOpts};
use crate::Result;

/// The target of estimation for a generator: the central subspace and its
/// dimension. Custom generators with no signal have no subspace.
#[derive(Debug, Clone)]
pub struct Truth {
    pub subspace: Option<Subspace>,
    pub d: usize,
}

/// The built-in simulation designs.
#[derive(Debug, Clone)]
pub enum GeneratorKind {
    /// One strong direction with isotropic noise and an exponential mean
    /// curve: `Y ~ U(0, 4)`, `nu_y = exp(y)`, `Gamma = 1/sqrt(p)`,
    /// `Delta = I`. Default `p = 20`.
    Fig1ExpNu { p: usize },
    /// Two directions, `nu_y = (y, |y|)`, `Y ~ N(0, sigma_y^2)`, loadings
    /// `(1,1,-1,-1,0,...)/2` and `(1,0,1,0,1,0,...)/sqrt(3)`, and a dense
    /// covariance `A^T A` with standard normal `A` drawn once per
    /// `(p, seed)`. Requires `p >= 5`.
    Sec5TwoDim { p: usize, sigma_y: f64 },
    /// Ten predictors, one direction, built so that given the first seven
    /// predictors the last three carry no information: the reduction's
    /// last three coordinates are exactly zero. Noise covariance `A^T A`
    /// drawn once per seed.
    Sec6NullTest { sigma_y: f64 },
    /// One direction with `Gamma = 1/sqrt(p)`, `Y ~ N(0, 1)`, and diagonal
    /// noise covariance with entry `(i, i)` equal to `10^(i-1)`; `r` is
    /// the polynomial degree studies fit to it.
    Sec8DiagDelta { p: usize, r: usize },
    /// User-specified loadings, noise covariance, and monomial mean
    /// functions `nu_j(y) = y^powers[j]`; an empty loading matrix gives
    /// pure noise.
    Custom {
        gamma: DMatrix<f64>,
        delta: DMatrix<f64>,
        powers: Vec<u32>,
        sigma_y: f64,
    },
}

/// A fully specified data source: design, sample size, and master seed.
#[derive(Debug, Clone)]
pub struct Generator {
    pub kind: GeneratorKind,
    pub n: usize,
    pub seed: u64,
}

impl Generator {
    pub fn p(&self) -> usize {
        match &self.kind {
            GeneratorKind::Fig1ExpNu { p } => *p,
            GeneratorKind::Sec5TwoDim { p, .. } => *p,
            GeneratorKind::Sec6NullTest { .. } => 10,
            GeneratorKind::Sec8DiagDelta { p, .. } => *p,
            GeneratorKind::Custom { gamma, .. } => gamma.nrows(),
        }
    }

    /// Same design at a different sample size.
    pub fn with_n(&self, n: usize) -> Generator {
        Generator {
            kind: self.kind.clone(),
            n,
            seed: self.seed,
        }
    }

    /// Same design at a different ambient dimension, where that is a free
    /// parameter.
    pub fn with_p(&self, p: usize) -> Result<Generator> {
        let kind = match &self.kind {
            GeneratorKind::Fig1ExpNu { .. } => GeneratorKind::Fig1ExpNu { p },
            GeneratorKind::Sec5TwoDim { sigma_y, .. } => GeneratorKind::Sec5TwoDim {
                p,
                sigma_y: *sigma_y,
            },
            GeneratorKind::Sec8DiagDelta { r, .. } => GeneratorKind::Sec8DiagDelta { p, r: *r },
            GeneratorKind::Sec6NullTest { .. } | GeneratorKind::Custom { .. } => {
                return Err(PfcError::InvalidInput(
                    "this generator has a fixed ambient dimension".into(),
                ))
            }
        };
        Ok(Generator {
            kind,
            n: self.n,
            seed: self.seed,
        })
    }

    /// Short human-readable tag used in result metadata.
    pub fn describe(&self) -> String {
        match &self.kind {
            GeneratorKind::Fig1ExpNu { p } => format!("fig1_exp_nu(n={}, p={p})", self.n),
            GeneratorKind::Sec5TwoDim { p, sigma_y } => {
                format!("sec5_twodim(n={}, p={p}, sigma_y={sigma_y})", self.n)
            }
            GeneratorKind::Sec6NullTest { sigma_y } => {
                format!("sec6_nulltest(n={}, sigma_y={sigma_y})", self.n)
            }
            GeneratorKind::Sec8DiagDelta { p, r } => {
                format!("sec8_diagdelta(n={}, p={p}, r={r})", self.n)
            }
            GeneratorKind::Custom { gamma, .. } => format!(
                "custom(n={}, p={}, signal_rank={})",
                self.n,
                gamma.nrows(),
                gamma.ncols()
            ),
        }
    }
}

/// How the scalar response is drawn.
enum YKind {
    Uniform04,
    Normal(f64),
}

/// The mean curve `nu(y)`.
enum NuKind {
    ExpY,
    YAbsY,
    Y,
    Powers(Vec<u32>),
}

impl NuKind {
    fn eval(&self, y: f64) -> DVector<f64> {
        match self {
            NuKind::ExpY => DVector::from_vec(vec![y.exp()]),
            NuKind::YAbsY => DVector::from_vec(vec![y, y.abs()]),
            NuKind::Y => DVector::from_vec(vec![y]),
            NuKind::Powers(ks) => {
                DVector::from_iterator(ks.len(), ks.iter().map(|&k| y.powi(k as i32)))
            }
        }
    }
}

/// Resolved generator: loadings, a row-convention noise factor
/// (`eps = M^T z` for `z ~ N(0, I)`, so `cov = M^T M`), samplers, and the
/// truth. Setup draws, if any, came from stream 0 of the master seed.
struct Blueprint {
    p: usize,
    gamma: DMatrix<f64>,
    factor: DMatrix<f64>,
    y_kind: YKind,
    nu: NuKind,
    truth: Truth,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Row-major fill with independent standard normals.
fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = standard_normal(rng);
        }
    }
    m
}

fn span_of(m: &DMatrix<f64>) -> Result<Subspace> {
    Subspace::from_span(m)
}

impl Blueprint {
    fn build(gen: &Generator) -> Result<Self> {
        let mut setup_rng = ChaCha8Rng::seed_from_u64(gen.seed);
        setup_rng.set_stream(0);
        match &gen.kind {
            GeneratorKind::Fig1ExpNu { p } => {
                let p = *p;
                if p < 2 {
                    return Err(PfcError::InvalidInput("need p >= 2".into()));
                }
                let gamma = DMatrix::from_element(p, 1, 1.0 / (p as f64).sqrt());
                let truth = Truth {
                    subspace: Some(span_of(&gamma)?),
                    d: 1,
                };
                Ok(Blueprint {
                    p,
                    gamma,
                    factor: DMatrix::identity(p, p),
                    y_kind: YKind::Uniform04,
                    nu: NuKind::ExpY,
                    truth,
                })
            }
            GeneratorKind::Sec5TwoDim { p, sigma_y } => {
                let p = *p;
                if p < 5 {
                    return Err(PfcError::InvalidInput(
                        "the two-direction design needs p >= 5".into(),
                    ));
                }
                if !(*sigma_y > 0.0) {
                    return Err(PfcError::InvalidInput("sigma_y must be positive".into()));
                }
                let mut gamma = DMatrix::zeros(p, 2);
                for (i, v) in [1.0, 1.0, -1.0, -1.0].iter().enumerate() {
                    gamma[(i, 0)] = v / 2.0;
                }
                for i in [0usize, 2, 4] {
                    gamma[(i, 1)] = 1.0 / 3.0_f64.sqrt();
                }
                let a = normal_matrix(p, p, &mut setup_rng);
                let delta = a.transpose() * &a;
                let chol = delta.clone().cholesky().ok_or_else(|| {
                    PfcError::NotPSD("drawn noise covariance failed factorization".into())
                })?;
                let dig = chol.solve(&gamma);
                let truth = Truth {
                    subspace: Some(span_of(&dig)?),
                    d: 2,
                };
                Ok(Blueprint {
                    p,
                    gamma,
                    factor: a,
                    y_kind: YKind::Normal(*sigma_y),
                    nu: NuKind::YAbsY,
                    truth,
                })
            }
            GeneratorKind::Sec6NullTest { sigma_y } => {
                if !(*sigma_y > 0.0) {
                    return Err(PfcError::InvalidInput("sigma_y must be positive".into()));
                }
                let (p, p1) = (10usize, 7usize);
                let a = normal_matrix(p, p, &mut setup_rng);
                let delta = a.transpose() * &a;
                let sinv = delta
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| PfcError::NotPSD("drawn noise covariance is singular".into()))?;
                // Loadings on the last three coordinates chosen so the
                // inverse-covariance image of the loading vector vanishes
                // there: given the leading block, the trailing predictors
                // carry nothing.
                let g1 = DVector::from_element(p1, 1.0);
                let s21 = sinv.view((p1, 0), (p - p1, p1)).into_owned();
                let s22 = sinv.view((p1, p1), (p - p1, p - p1)).into_owned();
                let g2 = -s22
                    .cholesky()
                    .ok_or_else(|| PfcError::NotPSD("inverse block not positive definite".into()))?
                    .solve(&(&s21 * &g1));
                let mut gamma = DMatrix::zeros(p, 1);
                for i in 0..p1 {
                    gamma[(i, 0)] = g1[i];
                }
                for i in p1..p {
                    gamma[(i, 0)] = g2[i - p1];
                }
                let norm = gamma.norm();
                gamma /= norm;
                let truth = Truth {
                    subspace: Some(span_of(&(&sinv * &gamma))?),
                    d: 1,
                };
                Ok(Blueprint {
                    p,
                    gamma,
                    factor: a,
                    y_kind: YKind::Normal(*sigma_y),
                    nu: NuKind::Y,
                    truth,
                })
            }
            GeneratorKind::Sec8DiagDelta { p, r } => {
                let (p, r) = (*p, *r);
                if p < 2 || r == 0 {
                    return Err(PfcError::InvalidInput("need p >= 2 and r >= 1".into()));
                }
                let gamma = DMatrix::from_element(p, 1, 1.0 / (p as f64).sqrt());
                let mut factor = DMatrix::zeros(p, p);
                let mut dig = DMatrix::zeros(p, 1);
                for i in 0..p {
                    let v = 10.0_f64.powi(i as i32);
                    factor[(i, i)] = v.sqrt();
                    dig[(i, 0)] = gamma[(i, 0)] / v;
                }
                let truth = Truth {
                    subspace: Some(span_of(&dig)?),
                    d: 1,
                };
                Ok(Blueprint {
                    p,
                    gamma,
                    factor,
                    y_kind: YKind::Normal(1.0),
                    nu: NuKind::Y,
                    truth,
                })
            }
            GeneratorKind::Custom {
                gamma,
                delta,
                powers,
                sigma_y,
            } => {
                let p = gamma.nrows();
                if p < 2 || delta.nrows() != p || delta.ncols() != p {
                    return Err(PfcError::InvalidInput(
                        "loading and covariance dimensions disagree".into(),
                    ));
                }
                if powers.len() != gamma.ncols() {
                    return Err(PfcError::InvalidInput(format!(
                        "{} powers for {} loading columns",
                        powers.len(),
                        gamma.ncols()
                    )));
                }
                if !(*sigma_y > 0.0) {
                    return Err(PfcError::InvalidInput("sigma_y must be positive".into()));
                }
                let chol = delta.clone().cholesky().ok_or_else(|| {
                    PfcError::NotPSD("custom noise covariance is not positive definite".into())
                })?;
                let truth = if gamma.ncols() == 0 {
                    Truth {
                        subspace: None,
                        d: 0,
                    }
                } else {
                    let dig = chol.solve(gamma);
                    let sub = span_of(&dig)?;
                    let d = sub.dim();
                    Truth {
                        subspace: Some(sub),
                        d,
                    }
                };
                Ok(Blueprint {
                    p,
                    gamma: gamma.clone(),
                    factor: chol.l().transpose(),
                    y_kind: YKind::Normal(*sigma_y),
                    nu: NuKind::Powers(powers.clone()),
                    truth,
                })
            }
        }
    }

    /// One dataset of `n` rows from the given stream of the master seed.
    fn sample(&self, n: usize, seed: u64, stream: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut x = DMatrix::zeros(n, self.p);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let yi = match self.y_kind {
                YKind::Uniform04 => rng.gen_range(0.0..4.0),
                YKind::Normal(s) => s * standard_normal(&mut rng),
            };
            let mean = &self.gamma * self.nu.eval(yi);
            let z = DVector::from_iterator(self.p, (0..self.p).map(|_| standard_normal(&mut rng)));
            let eps = self.factor.transpose() * z;
            for j in 0..self.p {
                x[(i, j)] = mean[j] + eps[j];
            }
            y.push(yi);
        }
        Dataset::from_continuous(x, y)
    }
}

/// Draws one dataset from the generator (replication stream 1) along with
/// the estimation target. Calling twice with the same generator returns
/// identical data.
pub fn generate(gen: &Generator) -> Result<(Dataset, Truth)> {
    let bp = Blueprint::build(gen)?;
    let data = bp.sample(gen.n, gen.seed, 1)?;
    Ok((data, bp.truth))
}

/// One fitted arm of the angle study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleArm {
    /// Polynomial basis `y..y^k`.
    Poly(usize),
    /// Single column `exp(y)` — the curve the first generator actually
    /// uses.
    ExpResponse,
}

impl AngleArm {
    pub fn label(&self) -> String {
        match self {
            AngleArm::Poly(k) => format!("poly{k}"),
            AngleArm::ExpResponse => "exp".to_string(),
        }
    }

    fn basis(&self, y: &[f64]) -> BasisSpec {
        match self {
            AngleArm::Poly(k) => BasisSpec::Polynomial { degree: *k },
            AngleArm::ExpResponse => {
                let col: Vec<f64> = y.iter().map(|v| v.exp()).collect();
                BasisSpec::Custom(standardized_columns(&[col], y.len()))
            }
        }
    }
}

/// Basis used when fitting in the dimension studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitBasis {
    /// `y..y^degree`.
    Poly { degree: usize },
    /// `y, |y|, y^3, ..., y^max_degree` (requires `max_degree >= 3`).
    AbsPoly { max_degree: usize },
}

impl FitBasis {
    pub fn label(&self) -> String {
        match self {
            FitBasis::Poly { degree } => format!("poly{degree}"),
            FitBasis::AbsPoly { max_degree } => format!("abs{max_degree}"),
        }
    }

    fn spec(&self, y: &[f64]) -> Result<BasisSpec> {
        match self {
            FitBasis::Poly { degree } => Ok(BasisSpec::Polynomial { degree: *degree }),
            FitBasis::AbsPoly { max_degree } => {
                if *max_degree < 3 {
                    return Err(PfcError::InvalidInput(
                        "the absolute-value basis needs max_degree >= 3".into(),
                    ));
                }
                let mut cols: Vec<Vec<f64>> = Vec::new();
                cols.push(y.to_vec());
                cols.push(y.iter().map(|v| v.abs()).collect());
                for k in 3..=*max_degree {
                    cols.push(y.iter().map(|v| v.powi(k as i32)).collect());
                }
                Ok(BasisSpec::Custom(standardized_columns(&cols, y.len())))
            }
        }
    }
}

/// Columns scaled to unit standard deviation for conditioning; the span is
/// unchanged.
fn standardized_columns(cols: &[Vec<f64>], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, cols.len());
    for (j, col) in cols.iter().enumerate() {
        let mean: f64 = col.iter().sum::<f64>() / n as f64;
        let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt().max(1e-300);
        for i in 0..n {
            m[(i, j)] = col[i] / sd;
        }
    }
    m
}

/// Dimension-selection procedures compared in the studies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DimMethod {
    Lrt { alpha: f64 },
    Aic,
    Bic,
}

impl DimMethod {
    pub fn label(&self) -> String {
        match self {
            DimMethod::Lrt { .. } => "lrt".to_string(),
            DimMethod::Aic => "aic".to_string(),
            DimMethod::Bic => "bic".to_string(),
        }
    }
}

/// Which quantity a study grid varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    SampleSize,
    Predictors,
}

/// Level studies: which null is exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelKind {
    /// Drop-the-inactive-block predictor test on the ten-predictor null
    /// design.
    Predictor,
    /// Diagonal-covariance test on the diagonal-noise design.
    Structure,
    /// Dimension likelihood-ratio test at the true dimension.
    LrtDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Angle,
    Dimension,
    Level,
}

/// One scored replication cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub cell: String,
    pub value: f64,
}

/// A replication cell that failed to fit; kept so denominators are
/// visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRep {
    pub rep: usize,
    pub cell: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub stat: String,
    pub value: f64,
}

/// Full outcome of a replicated study. The per-replication records are the
/// ground truth; the summary is always recomputable from them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: String,
    pub study: StudyKind,
    pub generator: String,
    pub seed: u64,
    pub reps: usize,
    pub true_d: usize,
    pub records: Vec<RepRecord>,
    pub excluded: Vec<ExcludedRep>,
    pub summary: Vec<SummaryRow>,
}

struct RepOutcome {
    records: Vec<RepRecord>,
    excluded: Vec<ExcludedRep>,
}

fn collect_reps<F>(reps: usize, f: F) -> (Vec<RepRecord>, Vec<ExcludedRep>)
where
    F: Fn(usize) -> RepOutcome + Sync + Send,
{
    let outcomes: Vec<RepOutcome> = (0..reps).into_par_iter().map(f).collect();
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for o in outcomes {
        records.extend(o.records);
        excluded.extend(o.excluded);
    }
    (records, excluded)
}

/// Cells in order of first appearance.
fn cell_order(records: &[RepRecord]) -> Vec<String> {
    let mut cells: Vec<String> = Vec::new();
    for r in records {
        if !cells.contains(&r.cell) {
            cells.push(r.cell.clone());
        }
    }
    cells
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Rebuilds the summary table from the stored records; the stored summary
/// always equals this.
pub fn recompute_summary(result: &ExperimentResult) -> Vec<SummaryRow> {
    summarize(result.study, result.true_d, &result.records)
}

fn summarize(study: StudyKind, true_d: usize, records: &[RepRecord]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for cell in cell_order(records) {
        let mut values: Vec<f64> = records
            .iter()
            .filter(|r| r.cell == cell)
            .map(|r| r.value)
            .collect();
        let count = values.len() as f64;
        let push = |rows: &mut Vec<SummaryRow>, stat: &str, value: f64| {
            rows.push(SummaryRow {
                cell: cell.clone(),
                stat: stat.to_string(),
                value,
            });
        };
        match study {
            StudyKind::Angle => {
                values.sort_by(f64::total_cmp);
                push(&mut rows, "median", percentile(&values, 0.5));
                push(&mut rows, "q1", percentile(&values, 0.25));
                push(&mut rows, "q3", percentile(&values, 0.75));
                push(&mut rows, "count", count);
            }
            StudyKind::Dimension => {
                let frac = |hi: usize| {
                    values
                        .iter()
                        .filter(|v| {
                            let d = v.round() as usize;
                            d >= true_d && d <= true_d + hi
                        })
                        .count() as f64
                        / count
                };
                push(&mut rows, "f_exact", frac(0));
                push(&mut rows, "f_within1", frac(1));
                push(&mut rows, "f_within2", frac(2));
                push(
                    &mut rows,
                    "mean",
                    values.iter().sum::<f64>() / count,
                );
                push(&mut rows, "count", count);
            }
            StudyKind::Level => {
                let rate = values.iter().sum::<f64>() / count;
                push(&mut rows, "rejection_rate", rate);
                push(
                    &mut rows,
                    "binomial_se",
                    (rate * (1.0 - rate) / count).sqrt(),
                );
                push(&mut rows, "count", count);
            }
        }
    }
    rows
}

/// Fits every arm to each replicated dataset and scores the largest
/// principal angle, in degrees, between the fitted and true subspaces.
pub fn run_angle_study(
    gen: &Generator,
    arms: &[AngleArm],
    reps: usize,
) -> Result<ExperimentResult> {
    if arms.is_empty() || reps == 0 {
        return Err(PfcError::InvalidInput("need at least one arm and one replication".into()));
    }
    let bp = Blueprint::build(gen)?;
    let truth = bp
        .truth
        .subspace
        .as_ref()
        .ok_or_else(|| PfcError::InvalidInput("generator has no subspace to score against".into()))?
        .clone();
    let d = bp.truth.d;

    let (records, excluded) = collect_reps(reps, |rep| {
        let mut out = RepOutcome {
            records: Vec::new(),
            excluded: Vec::new(),
        };
        let data = match bp.sample(gen.n, gen.seed, rep as u64 + 1) {
            Ok(d) => d,
            Err(e) => {
                for arm in arms {
                    out.excluded.push(ExcludedRep {
                        rep,
                        cell: arm.label(),
                        message: e.to_string(),
                    });
                }
                return out;
            }
        };
        let y = continuous_y(&data);
        for arm in arms {
            let attempt = build_design(&data, &arm.basis(&y))
                .and_then(|des| fit_pfc(&des, d))
                .and_then(|fit| fit.central_subspace())
                .and_then(|sub| largest_principal_angle(&sub, &truth));
            match attempt {
                Ok(angle) => out.records.push(RepRecord {
                    rep,
                    cell: arm.label(),
                    value: angle.to_degrees(),
                }),
                Err(e) => out.excluded.push(ExcludedRep {
                    rep,
                    cell: arm.label(),
                    message: e.to_string(),
                }),
            }
        }
        out
    });

    let summary = summarize(StudyKind::Angle, d, &records);
    Ok(ExperimentResult {
        experiment: "angle".to_string(),
        study: StudyKind::Angle,
        generator: gen.describe(),
        seed: gen.seed,
        reps,
        true_d: d,
        records,
        excluded,
        summary,
    })
}

/// Runs each selection method over a grid in `n` or `p` and scores the
/// chosen dimension per replication.
pub fn run_dim_study(
    gen: &Generator,
    methods: &[DimMethod],
    axis: GridAxis,
    grid: &[usize],
    fit_basis: FitBasis,
    reps: usize,
) -> Result<ExperimentResult> {
    if methods.is_empty() || grid.is_empty() || reps == 0 {
        return Err(PfcError::InvalidInput(
            "need at least one method, one grid point, and one replication".into(),
        ));
    }
    // One generator (and thus one set of setup draws) per grid cell.
    let mut cells: Vec<(String, Generator)> = Vec::with_capacity(grid.len());
    for &g in grid {
        let (label, cell_gen) = match axis {
            GridAxis::SampleSize => (format!("n={g}"), gen.with_n(g)),
            GridAxis::Predictors => (format!("p={g}"), gen.with_p(g)?),
        };
        cells.push((label, cell_gen));
    }
    let blueprints: Vec<(String, usize, Blueprint)> = cells
        .iter()
        .map(|(label, g)| Blueprint::build(g).map(|bp| (label.clone(), g.n, bp)))
        .collect::<Result<_>>()?;
    let true_d = blueprints[0].2.truth.d;

    let (records, excluded) = collect_reps(reps, |rep| {
        let mut out = RepOutcome {
            records: Vec::new(),
            excluded: Vec::new(),
        };
        for (idx, (label, n, bp)) in blueprints.iter().enumerate() {
            let stream = 1 + (rep * blueprints.len() + idx) as u64;
            let full_cells =
                |m: &DimMethod| format!("{label}|{}", m.label());
            let exclude_all = |out: &mut RepOutcome, msg: &str| {
                for m in methods {
                    out.excluded.push(ExcludedRep {
                        rep,
                        cell: full_cells(m),
                        message: msg.to_string(),
                    });
                }
            };
            let data = match bp.sample(*n, gen.seed, stream) {
                Ok(d) => d,
                Err(e) => {
                    exclude_all(&mut out, &e.to_string());
                    continue;
                }
            };
            let y = continuous_y(&data);
            let des = match fit_basis.spec(&y).and_then(|spec| build_design(&data, &spec)) {
                Ok(d) => d,
                Err(e) => {
                    exclude_all(&mut out, &e.to_string());
                    continue;
                }
            };
            for m in methods {
                let chosen = match m {
                    DimMethod::Lrt { alpha } => select_d_lrt(&des, *alpha),
                    DimMethod::Aic => select_d_ic(&des, Criterion::Aic),
                    DimMethod::Bic => select_d_ic(&des, Criterion::Bic),
                };
                match chosen {
                    Ok(sel) => out.records.push(RepRecord {
                        rep,
                        cell: full_cells(m),
                        value: sel.chosen_d as f64,
                    }),
                    Err(e) => out.excluded.push(ExcludedRep {
                        rep,
                        cell: full_cells(m),
                        message: e.to_string(),
                    }),
                }
            }
        }
        out
    });

    let summary = summarize(StudyKind::Dimension, true_d, &records);
    Ok(ExperimentResult {
        experiment: "dim".to_string(),
        study: StudyKind::Dimension,
        generator: gen.describe(),
        seed: gen.seed,
        reps,
        true_d,
        records,
        excluded,
        summary,
    })
}

fn continuous_y(data: &Dataset) -> Vec<f64> {
    match data.y() {
        crate::design::Response::Continuous(v) => v.clone(),
        crate::design::Response::Categorical(_) => unreachable!("simulated responses are numeric"),
    }
}

/// Empirical level of a nominal-`alpha` test across a sample-size grid;
/// records a reject flag per replication and cell.
pub fn run_level_study(
    kind: LevelKind,
    gen: &Generator,
    ns: &[usize],
    reps: usize,
    alpha: f64,
) -> Result<ExperimentResult> {
    if ns.is_empty() || reps == 0 {
        return Err(PfcError::InvalidInput(
            "need at least one sample size and one replication".into(),
        ));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PfcError::InvalidInput(format!(
            "alpha must be in (0, 1), got {alpha}"
        )));
    }
    match (kind, &gen.kind) {
        (LevelKind::Predictor, GeneratorKind::Sec6NullTest { .. }) => {}
        (LevelKind::Structure, GeneratorKind::Sec8DiagDelta { .. }) => {}
        (LevelKind::LrtDim, GeneratorKind::Sec5TwoDim { .. })
        | (LevelKind::LrtDim, GeneratorKind::Custom { .. }) => {}
        _ => {
            return Err(PfcError::InvalidInput(format!(
                "level study {kind:?} does not support generator {}",
                gen.describe()
            )))
        }
    }
    let bp = Blueprint::build(gen)?;
    let true_d = bp.truth.d;

    let (records, excluded) = collect_reps(reps, |rep| {
        let mut out = RepOutcome {
            records: Vec::new(),
            excluded: Vec::new(),
        };
        for (idx, &n) in ns.iter().enumerate() {
            let cell = format!("n={n}");
            let stream = 1 + (rep * ns.len() + idx) as u64;
            let attempt = bp
                .sample(n, gen.seed, stream)
                .and_then(|data| level_rejects(kind, gen, &bp, &data, alpha));
            match attempt {
                Ok(reject) => out.records.push(RepRecord {
                    rep,
                    cell,
                    value: if reject { 1.0 } else { 0.0 },
                }),
                Err(e) => out.excluded.push(ExcludedRep {
                    rep,
                    cell,
                    message: e.to_string(),
                }),
            }
        }
        out
    });

    let summary = summarize(StudyKind::Level, true_d, &records);
    Ok(ExperimentResult {
        experiment: "level".to_string(),
        study: StudyKind::Level,
        generator: gen.describe(),
        seed: gen.seed,
        reps,
        true_d,
        records,
        excluded,
        summary,
    })
}

fn level_rejects(
    kind: LevelKind,
    gen: &Generator,
    bp: &Blueprint,
    data: &Dataset,
    alpha: f64,
) -> Result<bool> {
    match kind {
        LevelKind::Predictor => {
            let des = build_design(data, &BasisSpec::Polynomial { degree: 1 })?;
            let active: Vec<usize> = (0..7).collect();
            let test = test_predictors(&des, 1, &active)?;
            Ok(test.report.p_value <= alpha)
        }
        LevelKind::Structure => {
            let r = match &gen.kind {
                GeneratorKind::Sec8DiagDelta { r, .. } => *r,
                _ => unreachable!("validated above"),
            };
            let des = build_design(data, &BasisSpec::Polynomial { degree: r })?;
            let w = des.tau();
            let report = test_structure(
                &des,
                &DeltaStructure::Diagonal,
                w,
                FixedPointOpts::default(),
            )?;
            Ok(report.p_value <= alpha)
        }
        LevelKind::LrtDim => {
            let y = continuous_y(data);
            let spec = match &gen.kind {
                GeneratorKind::Sec5TwoDim { .. } => {
                    FitBasis::AbsPoly { max_degree: 3 }.spec(&y)?
                }
                _ => BasisSpec::Polynomial { degree: 2 },
            };
            let des = build_design(data, &spec)?;
            let w = bp.truth.d;
            if w >= des.tau() {
                return Err(PfcError::InvalidInput(
                    "true dimension saturates the fitted basis; nothing to test".into(),
                ));
            }
            let sel = select_d_lrt(&des, alpha)?;
            let row = &sel.per_w[w];
            Ok(row.p_value.expect("tested row") <= alpha)
        }
    }
}

impl ExperimentResult {
    /// One CSV row per scored replication cell: `rep,cell,value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["rep", "cell", "value"])
            .map_err(csv_io)?;
        for r in &self.records {
            w.write_record([
                r.rep.to_string(),
                r.cell.clone(),
                format!("{}", r.value),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// JSON document with metadata, exclusions, and the summary table.
    pub fn write_json<W: Write>(&self, mut writer: W) -> Result<()> {
        let doc = serde_json::json!({
            "schema": "pfcred/1",
            "experiment": self.experiment,
            "study": self.study,
            "generator": self.generator,
            "seed": self.seed,
            "reps": self.reps,
            "true_d": self.true_d,
            "excluded": self.excluded,
            "summary": self.summary,
        });
        serde_json::to_writer_pretty(&mut writer, &doc)
            .map_err(|e| PfcError::Io(std::io::Error::new(std::io::ErrorKind::Other, e)))?;
        writer.write_all(b"\n")?;
        Ok(())
    }

    /// Writes `<experiment>_<seed>.csv` and `.json` under `dir`, returning
    /// the two paths.
    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("{}_{}", self.experiment, self.seed);
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        self.write_csv(std::fs::File::create(&csv_path)?)?;
        self.write_json(std::fs::File::create(&json_path)?)?;
        Ok((csv_path, json_path))
    }
}

fn csv_io(e: csv::Error) -> PfcError {
    PfcError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}
