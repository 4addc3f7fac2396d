//! Scalar linear mixed models with two nested random-effect levels (subject;
//! subject-and-side), arbitrary longitudinal design columns, unstructured or
//! diagonal covariances, profiled REML estimation, BLUPs and singularity
//! detection.
//!
//! The marginal model for one score column is
//! `y = X beta + Z_u u + Z_v v + eps` with `u ~ N(0, Q*)` per subject,
//! `v ~ N(0, R*)` per subject-and-side, and i.i.d. residuals `eps ~ N(0, s)`.
//! Estimation profiles `beta` and `s` out of the REML criterion and minimises
//! the resulting deviance over the log-Cholesky parameters of the relative
//! (s-scaled) covariance factors, exploiting the nested structure through a
//! per-subject block factorisation so cost is linear in the number of subjects.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::BasisError;
use crate::data::{CovariateTable, ObservationKey, Side};
use crate::fpca::ScoreTable;
use crate::model::LongitudinalBasis;
use crate::rng::seeded_rng;

#[derive(Debug, Error)]
pub enum LmmError {
    #[error("fixed-effect design is rank deficient")]
    RankDeficientX,
    #[error("design has no observations")]
    EmptyDesign,
    #[error("covariates missing for subject {0} side {1}")]
    MissingCovariates(String, Side),
    #[error("too few observations: n = {n} must exceed {p} fixed-effect columns + 1")]
    TooFewObservations { n: usize, p: usize },
    #[error("empty random-effect column subset for level {0}")]
    EmptyColumnSubset(&'static str),
    #[error("random-effect column index {0} out of range for a {1}-column basis")]
    ColumnOutOfRange(usize, usize),
    #[error(transparent)]
    Basis(#[from] BasisError),
}

/// Covariance structure of one random-effect level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovStructure {
    Unstructured,
    Diagonal,
}

/// Structure and design-column subset for one random-effect level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub structure: CovStructure,
    /// Indices into the columns of the level's longitudinal basis. An empty
    /// subset at the side level drops that level entirely.
    pub columns: Vec<usize>,
}

/// Covariance specification for the two nested random-effect levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovSpec {
    pub subject: LevelSpec,
    pub side: LevelSpec,
}

/// One subject's grouping information within a [`LongDesign`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectGroup {
    pub subject_id: String,
    /// Global row indices of this subject's observations.
    pub rows: Vec<usize>,
    /// Distinct sides observed for this subject, sorted.
    pub sides: Vec<Side>,
    /// For each local row, the index into `sides`.
    pub side_of_row: Vec<usize>,
}

/// Assembled response, fixed and random designs for one score column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongDesign {
    pub response: DVector<f64>,
    /// Fixed-effect design: D longitudinal-basis columns, then A covariates.
    pub x: DMatrix<f64>,
    /// Subject-level random design columns (n x D_u).
    pub zu: DMatrix<f64>,
    /// Subject-and-side-level random design columns (n x D_v).
    pub zv: DMatrix<f64>,
    pub subjects: Vec<SubjectGroup>,
    pub keys: Vec<ObservationKey>,
}

impl LongDesign {
    pub fn n(&self) -> usize {
        self.response.len()
    }
    pub fn du(&self) -> usize {
        self.zu.ncols()
    }
    pub fn dv(&self) -> usize {
        self.zv.ncols()
    }
}

/// Optimiser settings for [`fit_reml`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOpts {
    /// Absolute convergence tolerance on the profiled REML criterion.
    pub tol: f64,
    /// Maximum deviance evaluations per optimiser run.
    pub max_eval: usize,
    /// Random restarts in addition to the identity start.
    pub n_restarts: usize,
}

impl Default for FitOpts {
    fn default() -> Self {
        FitOpts {
            tol: 1e-8,
            max_eval: 10_000,
            n_restarts: 3,
        }
    }
}

/// REML fit of the scalar mixed model for one score column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLmmFit {
    pub beta: DVector<f64>,
    pub beta_cov: DMatrix<f64>,
    /// Subject-level covariance Q* (D_u x D_u, symmetric PSD).
    pub q_star: DMatrix<f64>,
    /// Subject-and-side-level covariance R* (D_v x D_v, symmetric PSD).
    pub r_star: DMatrix<f64>,
    /// Residual variance s > 0.
    pub s: f64,
    /// Per-subject BLUPs, aligned with `LongDesign::subjects`.
    pub blups_u: Vec<(String, DVector<f64>)>,
    /// Per-subject-and-side BLUPs.
    pub blups_v: Vec<(String, Side, DVector<f64>)>,
    pub reml_deviance: f64,
    pub singular: bool,
    pub converged: bool,
    pub n_eval: usize,
    /// Relative Cholesky factors at the optimum (lower triangular).
    pub lambda_u: DMatrix<f64>,
    pub lambda_v: DMatrix<f64>,
}

/// Residual and BLUP summaries for model criticism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    /// Pooled within-subject-and-side autocorrelations; `acf[0] == 1`.
    pub acf: Vec<f64>,
    /// Sorted conditional residuals for Q-Q export.
    pub resid_quantiles: Vec<f64>,
    /// Sorted subject-level BLUPs, one vector per random-effect column.
    pub blup_u_quantiles: Vec<Vec<f64>>,
    /// Sorted subject-and-side-level BLUPs, one vector per column.
    pub blup_v_quantiles: Vec<Vec<f64>>,
    /// Set when `max_lag` exceeded the shortest group and was truncated.
    pub lag_truncated: bool,
}

// ---------------------------------------------------------------------------
// Design assembly
// ---------------------------------------------------------------------------

/// Assemble the response, fixed design `[xi(T) | covariates]` and the two
/// random-effect designs for score column `k`.
pub fn build_design(
    scores: &ScoreTable,
    k: usize,
    covariates: &CovariateTable,
    long_basis: &LongitudinalBasis,
    covspec: &CovSpec,
) -> Result<LongDesign, LmmError> {
    let n = scores.keys.len();
    if n == 0 {
        return Err(LmmError::EmptyDesign);
    }
    let times: Vec<f64> = scores.keys.iter().map(|key| key.long_time).collect();
    let (fixed, subj, side) = long_basis.eval(&times)?;
    let d = fixed.ncols();
    let a = covariates.names.len();

    let mut x = DMatrix::zeros(n, d + a);
    x.view_mut((0, 0), (n, d)).copy_from(&fixed);
    for (i, key) in scores.keys.iter().enumerate() {
        let row = covariates
            .rows
            .get(&(key.subject_id.clone(), key.side))
            .ok_or_else(|| LmmError::MissingCovariates(key.subject_id.clone(), key.side))?;
        for (j, &v) in row.iter().enumerate() {
            x[(i, d + j)] = v;
        }
    }
    if x.clone().svd(false, false).rank(1e-10 * x.amax().max(1.0)) < x.ncols() {
        return Err(LmmError::RankDeficientX);
    }

    let zu = select_columns(&subj, &covspec.subject.columns, "subject", true)?;
    let zv = select_columns(&side, &covspec.side.columns, "side", false)?;

    let mut by_subject: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, key) in scores.keys.iter().enumerate() {
        by_subject.entry(&key.subject_id).or_default().push(i);
    }
    let subjects = by_subject
        .into_iter()
        .map(|(sid, rows)| {
            let mut sides: Vec<Side> = rows.iter().map(|&i| scores.keys[i].side).collect();
            sides.sort();
            sides.dedup();
            let side_of_row = rows
                .iter()
                .map(|&i| sides.iter().position(|&s| s == scores.keys[i].side).unwrap())
                .collect();
            SubjectGroup {
                subject_id: sid.to_string(),
                rows,
                sides,
                side_of_row,
            }
        })
        .collect();

    Ok(LongDesign {
        response: DVector::from_fn(n, |i, _| scores.scores[(i, k)]),
        x,
        zu,
        zv,
        subjects,
        keys: scores.keys.clone(),
    })
}

fn select_columns(
    design: &DMatrix<f64>,
    columns: &[usize],
    level: &'static str,
    required: bool,
) -> Result<DMatrix<f64>, LmmError> {
    if columns.is_empty() {
        if required {
            return Err(LmmError::EmptyColumnSubset(level));
        }
        return Ok(DMatrix::zeros(design.nrows(), 0));
    }
    for &c in columns {
        if c >= design.ncols() {
            return Err(LmmError::ColumnOutOfRange(c, design.ncols()));
        }
    }
    Ok(design.select_columns(columns.iter()))
}

// ---------------------------------------------------------------------------
// Profiled REML via per-subject block factorisation
// ---------------------------------------------------------------------------

fn n_params(d: usize, structure: CovStructure) -> usize {
    match structure {
        CovStructure::Unstructured => d * (d + 1) / 2,
        CovStructure::Diagonal => d,
    }
}

/// Lower-triangular relative Cholesky factor from log-Cholesky parameters:
/// diagonal entries are exponentiated, off-diagonals (unstructured only) are
/// taken as-is, filled row by row.
fn lambda_from_theta(theta: &[f64], d: usize, structure: CovStructure) -> DMatrix<f64> {
    let mut lam = DMatrix::zeros(d, d);
    match structure {
        CovStructure::Diagonal => {
            for i in 0..d {
                lam[(i, i)] = theta[i].clamp(-40.0, 40.0).exp();
            }
        }
        CovStructure::Unstructured => {
            let mut idx = 0;
            for i in 0..d {
                for j in 0..=i {
                    lam[(i, j)] = if i == j {
                        theta[idx].clamp(-40.0, 40.0).exp()
                    } else {
                        theta[idx]
                    };
                    idx += 1;
                }
            }
        }
    }
    lam
}

/// Per-subject matrices gathered once before optimisation.
struct SubjectData {
    x: DMatrix<f64>,
    y: DVector<f64>,
    zu: DMatrix<f64>,
    zv: DMatrix<f64>,
    side_of_row: Vec<usize>,
    n_sides: usize,
}

fn gather_subjects(design: &LongDesign) -> Vec<SubjectData> {
    design
        .subjects
        .iter()
        .map(|g| {
            let ni = g.rows.len();
            SubjectData {
                x: DMatrix::from_fn(ni, design.x.ncols(), |r, c| design.x[(g.rows[r], c)]),
                y: DVector::from_fn(ni, |r, _| design.response[g.rows[r]]),
                zu: DMatrix::from_fn(ni, design.du(), |r, c| design.zu[(g.rows[r], c)]),
                zv: DMatrix::from_fn(ni, design.dv(), |r, c| design.zv[(g.rows[r], c)]),
                side_of_row: g.side_of_row.clone(),
                n_sides: g.sides.len(),
            }
        })
        .collect()
}

struct ProfiledSolve {
    deviance: f64,
    beta: DVector<f64>,
    /// Lower Cholesky factor of R_X^T R_X (the profiled fixed-effect system).
    lx: DMatrix<f64>,
    s: f64,
    /// Per-subject (L_i, c_{z,i}, C_{zx,i}) from the block elimination.
    blocks: Vec<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)>,
}

/// Evaluate the profiled REML deviance at one candidate, optionally keeping
/// the per-subject factors needed for BLUPs and standard errors.
fn profiled_solve(
    subjects: &[SubjectData],
    xtx: &DMatrix<f64>,
    xty: &DVector<f64>,
    yty: f64,
    n: usize,
    p: usize,
    lam_u: &DMatrix<f64>,
    lam_v: &DMatrix<f64>,
    keep: bool,
) -> Option<ProfiledSolve> {
    if lam_u.iter().chain(lam_v.iter()).any(|v| !v.is_finite() || v.abs() > 1e10) {
        return None;
    }
    let du = lam_u.nrows();
    let dv = lam_v.nrows();
    let mut logdet = 0.0;
    let mut cz_norm2 = 0.0;
    let mut rtr_x = xtx.clone();
    let mut rhs_x = xty.clone();
    let mut blocks = Vec::new();
    for sd in subjects {
        let ni = sd.y.len();
        let q = du + sd.n_sides * dv;
        let mut a = DMatrix::zeros(ni, q);
        if du > 0 {
            a.view_mut((0, 0), (ni, du)).copy_from(&(&sd.zu * lam_u));
        }
        if dv > 0 {
            let zvl = &sd.zv * lam_v;
            for r in 0..ni {
                let s = sd.side_of_row[r];
                for c in 0..dv {
                    a[(r, du + s * dv + c)] = zvl[(r, c)];
                }
            }
        }
        let mut m = a.transpose() * &a;
        for i in 0..q {
            m[(i, i)] += 1.0;
        }
        let chol = nalgebra::linalg::Cholesky::new(m)?;
        let l = chol.l();
        for i in 0..q {
            logdet += l[(i, i)].ln();
        }
        let cz = l.solve_lower_triangular(&(a.transpose() * &sd.y))?;
        let czx = l.solve_lower_triangular(&(a.transpose() * &sd.x))?;
        cz_norm2 += cz.norm_squared();
        rtr_x -= czx.transpose() * &czx;
        rhs_x -= czx.transpose() * &cz;
        if keep {
            blocks.push((l, cz, czx));
        }
    }
    let chol_x = nalgebra::linalg::Cholesky::new(rtr_x)?;
    let lx = chol_x.l();
    let logdet_x: f64 = (0..p).map(|i| lx[(i, i)].ln()).sum();
    let cx = lx.solve_lower_triangular(&rhs_x)?;
    let r2 = (yty - cz_norm2 - cx.norm_squared()).max(1e-300);
    let nmp = (n - p) as f64;
    // The log det(X^T X) offset makes the criterion invariant to rescaling
    // fixed-effect columns; it is constant in the variance parameters.
    let logdet_xtx: f64 = {
        let lx0 = nalgebra::linalg::Cholesky::new(xtx.clone())?;
        let l0 = lx0.l();
        (0..p).map(|i| l0[(i, i)].ln()).sum()
    };
    let deviance = 2.0 * logdet + 2.0 * (logdet_x - logdet_xtx)
        + nmp * (1.0 + (2.0 * PI * r2 / nmp).ln());
    if !deviance.is_finite() {
        return None;
    }
    let beta = lx.tr_solve_lower_triangular(&cx)?;
    Some(ProfiledSolve {
        deviance,
        beta,
        lx,
        s: r2 / nmp,
        blocks,
    })
}

/// Profiled REML deviance at an arbitrary log-Cholesky parameter vector.
/// Exposed for optimiser sanity checks; returns `+inf` on numerical failure.
pub fn reml_deviance_at(design: &LongDesign, covspec: &CovSpec, theta: &[f64]) -> f64 {
    let subjects = gather_subjects(design);
    let (n, p) = (design.n(), design.x.ncols());
    let xtx = design.x.transpose() * &design.x;
    let xty = design.x.transpose() * &design.response;
    let yty = design.response.norm_squared();
    let pu = n_params(design.du(), covspec.subject.structure);
    let lam_u = lambda_from_theta(&theta[..pu], design.du(), covspec.subject.structure);
    let lam_v = lambda_from_theta(&theta[pu..], design.dv(), covspec.side.structure);
    profiled_solve(&subjects, &xtx, &xty, yty, n, p, &lam_u, &lam_v, false)
        .map_or(f64::INFINITY, |s| s.deviance)
}

/// Fit the two-level mixed model by profiled REML. The optimiser is a
/// deterministic Nelder-Mead on the log-Cholesky parameters, run from the
/// identity start and `n_restarts` seeded random starts; the best optimum is
/// returned, so reruns are bit-identical.
pub fn fit_reml(
    design: &LongDesign,
    covspec: &CovSpec,
    opts: &FitOpts,
) -> Result<ScoreLmmFit, LmmError> {
    let n = design.n();
    let p = design.x.ncols();
    if n == 0 {
        return Err(LmmError::EmptyDesign);
    }
    if n <= p + 1 {
        return Err(LmmError::TooFewObservations { n, p });
    }
    let subjects = gather_subjects(design);
    let xtx = design.x.transpose() * &design.x;
    let xty = design.x.transpose() * &design.response;
    let yty = design.response.norm_squared();
    let (du, dv) = (design.du(), design.dv());
    let pu = n_params(du, covspec.subject.structure);
    let pv = n_params(dv, covspec.side.structure);
    let dim = pu + pv;

    let objective = |theta: &DVector<f64>| -> f64 {
        let lam_u = lambda_from_theta(&theta.as_slice()[..pu], du, covspec.subject.structure);
        let lam_v = lambda_from_theta(&theta.as_slice()[pu..], dv, covspec.side.structure);
        profiled_solve(&subjects, &xtx, &xty, yty, n, p, &lam_u, &lam_v, false)
            .map_or(f64::INFINITY, |s| s.deviance)
    };

    let mut best: Option<(f64, DVector<f64>, bool)> = None;
    let mut total_eval = 0;
    for restart in 0..=opts.n_restarts {
        let start = if restart == 0 {
            DVector::zeros(dim)
        } else {
            let mut rng = seeded_rng(restart as u64, &[b"lmm-restart"]);
            DVector::from_fn(dim, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
        };
        let run = nelder_mead(&objective, &start, 0.5, opts.tol, opts.max_eval);
        total_eval += run.n_eval;
        let better = match &best {
            None => true,
            Some((f, _, _)) => run.fval < *f,
        };
        if better {
            best = Some((run.fval, run.x, run.converged));
        }
    }
    let (fval, theta, converged) = best.expect("at least one optimiser run");

    let lam_u = lambda_from_theta(&theta.as_slice()[..pu], du, covspec.subject.structure);
    let lam_v = lambda_from_theta(&theta.as_slice()[pu..], dv, covspec.side.structure);
    let solve = profiled_solve(&subjects, &xtx, &xty, yty, n, p, &lam_u, &lam_v, true)
        .expect("profiled system solvable at the optimum");

    let s = solve.s;
    let beta_cov = {
        // (R_X^T R_X)^{-1} scaled by the residual variance.
        let inv = nalgebra::linalg::Cholesky::new(solve.lx.clone() * solve.lx.transpose())
            .expect("profiled fixed-effect system positive definite")
            .inverse();
        inv * s
    };
    let (blups_u, blups_v) = blups_from_solve(design, &solve, &lam_u, &lam_v);

    let singular_tol = 1e-4;
    let singular = (0..du).any(|i| lam_u[(i, i)] < singular_tol)
        || (0..dv).any(|i| lam_v[(i, i)] < singular_tol);

    Ok(ScoreLmmFit {
        beta: solve.beta,
        beta_cov,
        q_star: &lam_u * lam_u.transpose() * s,
        r_star: &lam_v * lam_v.transpose() * s,
        s,
        blups_u,
        blups_v,
        reml_deviance: fval,
        singular,
        converged,
        n_eval: total_eval,
        lambda_u: lam_u,
        lambda_v: lam_v,
    })
}

/// Conditional modes from the penalised least-squares solve: spherical modes
/// `b_i = L_i^{-T}(c_{z,i} - C_{zx,i} beta)` mapped through the relative
/// factors. Rows whose relative standard deviation has collapsed are zeroed
/// so degenerate levels predict exactly no effect.
fn blups_from_solve(
    design: &LongDesign,
    solve: &ProfiledSolve,
    lam_u: &DMatrix<f64>,
    lam_v: &DMatrix<f64>,
) -> (Vec<(String, DVector<f64>)>, Vec<(String, Side, DVector<f64>)>) {
    let (du, dv) = (design.du(), design.dv());
    let mut lam_u = lam_u.clone();
    let mut lam_v = lam_v.clone();
    for i in 0..du {
        if lam_u[(i, i)] < 1e-8 {
            lam_u.row_mut(i).fill(0.0);
        }
    }
    for i in 0..dv {
        if lam_v[(i, i)] < 1e-8 {
            lam_v.row_mut(i).fill(0.0);
        }
    }
    let mut blups_u = Vec::new();
    let mut blups_v = Vec::new();
    for (g, (l, cz, czx)) in design.subjects.iter().zip(&solve.blocks) {
        let b = l
            .tr_solve_lower_triangular(&(cz - czx * &solve.beta))
            .expect("block factor invertible");
        blups_u.push((g.subject_id.clone(), &lam_u * b.rows(0, du)));
        for (si, &side) in g.sides.iter().enumerate() {
            blups_v.push((
                g.subject_id.clone(),
                side,
                &lam_v * b.rows(du + si * dv, dv),
            ));
        }
    }
    (blups_u, blups_v)
}

/// Recompute the conditional modes of the random effects at the fitted
/// variance parameters.
pub fn compute_blups(
    fit: &ScoreLmmFit,
    design: &LongDesign,
    covspec: &CovSpec,
) -> (Vec<(String, DVector<f64>)>, Vec<(String, Side, DVector<f64>)>) {
    let subjects = gather_subjects(design);
    let (n, p) = (design.n(), design.x.ncols());
    let xtx = design.x.transpose() * &design.x;
    let xty = design.x.transpose() * &design.response;
    let yty = design.response.norm_squared();
    let _ = covspec;
    let solve = profiled_solve(
        &subjects,
        &xtx,
        &xty,
        yty,
        n,
        p,
        &fit.lambda_u,
        &fit.lambda_v,
        true,
    )
    .expect("profiled system solvable at fitted parameters");
    blups_from_solve(design, &solve, &fit.lambda_u, &fit.lambda_v)
}

// ---------------------------------------------------------------------------
// Residual diagnostics
// ---------------------------------------------------------------------------

/// Conditional residuals `y - X beta - Z_u u - Z_v v`, pooled within-group
/// autocorrelations, and sorted quantiles of residuals and BLUPs.
pub fn residual_diagnostics(
    fit: &ScoreLmmFit,
    design: &LongDesign,
    max_lag: usize,
) -> ResidualDiagnostics {
    let n = design.n();
    let (du, dv) = (design.du(), design.dv());
    let mut resid = &design.response - &design.x * &fit.beta;
    let mut v_lookup: BTreeMap<(&str, Side), &DVector<f64>> = BTreeMap::new();
    for (sid, side, v) in &fit.blups_v {
        v_lookup.insert((sid.as_str(), *side), v);
    }
    for (g, (_, u)) in design.subjects.iter().zip(&fit.blups_u) {
        for (local, &row) in g.rows.iter().enumerate() {
            for c in 0..du {
                resid[row] -= design.zu[(row, c)] * u[c];
            }
            if dv > 0 {
                let side = g.sides[g.side_of_row[local]];
                if let Some(v) = v_lookup.get(&(g.subject_id.as_str(), side)) {
                    for c in 0..dv {
                        resid[row] -= design.zv[(row, c)] * v[c];
                    }
                }
            }
        }
    }

    // Order each subject-side sequence by stride index.
    let mut groups: BTreeMap<(&str, Side), Vec<(u32, usize)>> = BTreeMap::new();
    for (i, key) in design.keys.iter().enumerate() {
        groups
            .entry((key.subject_id.as_str(), key.side))
            .or_default()
            .push((key.stride_index, i));
    }
    let mut sequences: Vec<Vec<usize>> = Vec::new();
    for seq in groups.values_mut() {
        seq.sort();
        sequences.push(seq.iter().map(|&(_, i)| i).collect());
    }
    let shortest = sequences.iter().map(Vec::len).min().unwrap_or(0);
    let mut lag_truncated = false;
    let mut lags = max_lag;
    if shortest > 0 && max_lag >= shortest {
        lags = shortest - 1;
        lag_truncated = true;
    }
    let mean = resid.iter().sum::<f64>() / n as f64;
    let denom: f64 = resid.iter().map(|r| (r - mean).powi(2)).sum();
    let mut acf = vec![1.0];
    for lag in 1..=lags {
        let mut num = 0.0;
        for seq in &sequences {
            for t in 0..seq.len().saturating_sub(lag) {
                num += (resid[seq[t]] - mean) * (resid[seq[t + lag]] - mean);
            }
        }
        acf.push(if denom > 0.0 { num / denom } else { 0.0 });
    }

    let mut resid_quantiles: Vec<f64> = resid.iter().copied().collect();
    resid_quantiles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sorted_col = |vals: Vec<f64>| {
        let mut v = vals;
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    };
    let blup_u_quantiles = (0..du)
        .map(|c| sorted_col(fit.blups_u.iter().map(|(_, u)| u[c]).collect()))
        .collect();
    let blup_v_quantiles = (0..dv)
        .map(|c| sorted_col(fit.blups_v.iter().map(|(_, _, v)| v[c]).collect()))
        .collect();

    ResidualDiagnostics {
        acf,
        resid_quantiles,
        blup_u_quantiles,
        blup_v_quantiles,
        lag_truncated,
    }
}

/// `true` iff any diagonal entry of the relative Cholesky factors is below
/// `tol` (default 1e-4), i.e. a variance component collapsed to the boundary.
pub fn detect_singular(fit: &ScoreLmmFit, tol: f64) -> bool {
    (0..fit.lambda_u.nrows()).any(|i| fit.lambda_u[(i, i)] < tol)
        || (0..fit.lambda_v.nrows()).any(|i| fit.lambda_v[(i, i)] < tol)
}

// ---------------------------------------------------------------------------
// Deterministic Nelder-Mead
// ---------------------------------------------------------------------------

struct NmResult {
    x: DVector<f64>,
    fval: f64,
    n_eval: usize,
    converged: bool,
}

/// Standard Nelder-Mead (reflection 1, expansion 2, contraction 1/2, shrink
/// 1/2) with deterministic tie-breaking. Converges when the simplex function
/// spread falls below `tol`.
fn nelder_mead<F: Fn(&DVector<f64>) -> f64>(
    f: &F,
    x0: &DVector<f64>,
    step: f64,
    tol: f64,
    max_eval: usize,
) -> NmResult {
    let dim = x0.len();
    if dim == 0 {
        return NmResult {
            x: x0.clone(),
            fval: f(x0),
            n_eval: 1,
            converged: true,
        };
    }
    let n_eval = std::cell::Cell::new(0usize);
    let eval = |x: &DVector<f64>| {
        n_eval.set(n_eval.get() + 1);
        f(x)
    };
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.clone(), eval(x0)));
    for i in 0..dim {
        let mut v = x0.clone();
        v[i] += step;
        let fv = eval(&v);
        simplex.push((v, fv));
    }
    loop {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        let spread = simplex[dim].1 - simplex[0].1;
        let xspread = simplex
            .iter()
            .map(|(v, _)| (v - &simplex[0].0).amax())
            .fold(0.0, f64::max);
        if (spread.abs() < tol && xspread < 1e-6) || xspread < 1e-12 {
            return NmResult {
                x: simplex[0].0.clone(),
                fval: simplex[0].1,
                n_eval: n_eval.get(),
                converged: true,
            };
        }
        if n_eval.get() >= max_eval {
            return NmResult {
                x: simplex[0].0.clone(),
                fval: simplex[0].1,
                n_eval: n_eval.get(),
                converged: false,
            };
        }
        let mut centroid = DVector::zeros(dim);
        for (v, _) in simplex.iter().take(dim) {
            centroid += v;
        }
        centroid /= dim as f64;
        let worst = simplex[dim].clone();
        let reflect = &centroid + (&centroid - &worst.0);
        let f_r = eval(&reflect);
        if f_r < simplex[0].1 {
            let expand = &centroid + (&centroid - &worst.0) * 2.0;
            let f_e = eval(&expand);
            simplex[dim] = if f_e < f_r { (expand, f_e) } else { (reflect, f_r) };
        } else if f_r < simplex[dim - 1].1 {
            simplex[dim] = (reflect, f_r);
        } else {
            let contracted = if f_r < worst.1 {
                let outside = &centroid + (&reflect - &centroid) * 0.5;
                let f_c = eval(&outside);
                (f_c <= f_r).then_some((outside, f_c))
            } else {
                let inside = &centroid - (&centroid - &worst.0) * 0.5;
                let f_c = eval(&inside);
                (f_c < worst.1).then_some((inside, f_c))
            };
            match contracted {
                Some(vc) => simplex[dim] = vc,
                None => {
                    // Shrink toward the best vertex.
                    let best = simplex[0].0.clone();
                    for entry in simplex.iter_mut().skip(1) {
                        entry.0 = &best + (&entry.0 - &best) * 0.5;
                        entry.1 = eval(&entry.0);
                    }
                }
            }
        }
    }
}
