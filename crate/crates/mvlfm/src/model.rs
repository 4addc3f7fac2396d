//! Full multivariate multilevel longitudinal functional model: orchestrates
//! the FPCA stage and the per-score mixed models, and reassembles them into
//! fixed-effect curves with uncertainty bands, intercept and covariance
//! surfaces, BLUP trajectories, predictions and change summaries.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{grid_interp_basis, BasisError, DesignSolver, UnivariateBasis};
use crate::data::{
    CovariateTable, DataError, MvCurve, MvLongDataset, ObservationKey, Side,
};
use crate::fpca::{
    estimate_mlfpca_basis, fit_mvfpca, project_scores, score_trajectories, FpcaError,
    MvFpcaModel, ScoreTable, Truncation,
};
use crate::lmm::{
    build_design, fit_reml, CovSpec, CovStructure, FitOpts, LevelSpec, LmmError, ScoreLmmFit,
};
use crate::rng::seeded_rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fpca(#[from] FpcaError),
    #[error(transparent)]
    Lmm(#[from] LmmError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("subject {0} not in the training set")]
    UnknownSubject(String),
    #[error("side {1} not observed for subject {0}")]
    UnknownSide(String, Side),
    #[error("expected {expected} covariate values, got {got}")]
    CovariateMismatch { expected: usize, got: usize },
    #[error("all {0} bootstrap replicates failed to fit")]
    AllReplicatesFailed(usize),
}

/// How the random-effect design columns over `T` are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RandomBasisSource {
    /// Use the `subject`/`side` bases as given, identically for every score.
    Shared,
    /// Estimate score-specific two-level bases from detrended score
    /// trajectories by method of moments, with diagonal covariances.
    EstimatedMlFpca { pve: f64, t_grid_size: usize },
}

/// Bases over longitudinal time `T` used by the per-score mixed models: the
/// fixed-effect columns and the column sources for the subject-level and
/// subject-and-side-level random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalBasis {
    pub fixed: UnivariateBasis,
    pub subject: UnivariateBasis,
    pub side: UnivariateBasis,
    pub random_source: RandomBasisSource,
}

impl LongitudinalBasis {
    /// The common case where random effects reuse the fixed-effect basis.
    pub fn shared(basis: UnivariateBasis) -> Self {
        LongitudinalBasis {
            fixed: basis.clone(),
            subject: basis.clone(),
            side: basis,
            random_source: RandomBasisSource::Shared,
        }
    }

    /// Evaluate the three designs at the observed longitudinal times.
    pub fn eval(
        &self,
        times: &[f64],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), BasisError> {
        Ok((
            self.fixed.eval(times)?,
            self.subject.eval(times)?,
            self.side.eval(times)?,
        ))
    }
}

/// Resolved per-score random-effect bases and covariance specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedLevels {
    pub subject_basis: UnivariateBasis,
    pub side_basis: UnivariateBasis,
    pub covspec: CovSpec,
}

/// The fully assembled model fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MvLfmmFit {
    pub fpca: MvFpcaModel,
    pub long_basis: LongitudinalBasis,
    /// Per-score resolved level bases and covariance structures (length K).
    pub levels: Vec<ResolvedLevels>,
    pub fits: Vec<ScoreLmmFit>,
    pub covariate_names: Vec<String>,
    /// Per-score trajectory noise variances when the ml-FPCA path was used.
    pub mlfpca_noise: Option<Vec<f64>>,
    pub n_singular: usize,
}

impl MvLfmmFit {
    pub fn k(&self) -> usize {
        self.fits.len()
    }
    pub fn n_dims(&self) -> usize {
        self.fpca.dim_names.len()
    }
    pub fn grid(&self) -> &[f64] {
        &self.fpca.mean.grid
    }
    /// Number of longitudinal fixed-effect columns D.
    pub fn n_fixed_long(&self) -> usize {
        self.long_basis.fixed.n_basis()
    }
}

/// A per-dimension curve estimate with pointwise variances (both P x G).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveWithVariance {
    pub estimate: DMatrix<f64>,
    pub variance: DMatrix<f64>,
}

/// Pointwise and simultaneous confidence bands around a curve (all P x G).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub lower_pw: DMatrix<f64>,
    pub upper_pw: DMatrix<f64>,
    pub lower_sim: DMatrix<f64>,
    pub upper_sim: DMatrix<f64>,
}

/// Bootstrap output: per covariate, the kept replicate curves (each P x G).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimates: Vec<Vec<DMatrix<f64>>>,
    pub n_failed: usize,
}

/// Random-effect level selector for covariance surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovLevel {
    Subject,
    SubjectSide,
    Error,
}

/// Longitudinal change summaries of one subject-side fitted profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangeMetrics {
    /// Mean integrated squared first derivative with respect to `T`.
    pub isd: f64,
    /// Root mean squared difference between the `T = 1` and `T = 0` profiles.
    pub overall_change: f64,
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

/// Fit the full model: center and expand the curves, extract FPCA scores,
/// then fit one two-level mixed model per retained score. Singular score
/// fits are kept and counted, never treated as errors.
pub fn fit_model(
    train: &MvLongDataset,
    func_basis: &UnivariateBasis,
    long_basis: &LongitudinalBasis,
    covspec: &CovSpec,
    truncation: Truncation,
    opts: &FitOpts,
) -> Result<MvLfmmFit, ModelError> {
    train.validate()?;
    let (fpca, scores) = fit_mvfpca(train, func_basis, truncation)?;
    fit_score_models(train, fpca, &scores, long_basis, covspec, opts)
}

/// The score-model stage of [`fit_model`], reusing an already computed FPCA
/// decomposition and score table (for example when several model variants
/// share one expansion).
pub fn fit_score_models(
    train: &MvLongDataset,
    fpca: MvFpcaModel,
    scores: &ScoreTable,
    long_basis: &LongitudinalBasis,
    covspec: &CovSpec,
    opts: &FitOpts,
) -> Result<MvLfmmFit, ModelError> {
    let kk = fpca.k();

    let (levels, mlfpca_noise) = match &long_basis.random_source {
        RandomBasisSource::Shared => (
            vec![
                ResolvedLevels {
                    subject_basis: long_basis.subject.clone(),
                    side_basis: long_basis.side.clone(),
                    covspec: covspec.clone(),
                };
                kk
            ],
            None,
        ),
        RandomBasisSource::EstimatedMlFpca { pve, t_grid_size } => {
            let (levels, noise) =
                estimate_per_score_levels(scores, &train.covariates, long_basis, *pve, *t_grid_size)?;
            (levels, Some(noise))
        }
    };

    let fits: Vec<ScoreLmmFit> = (0..kk)
        .into_par_iter()
        .map(|k| {
            let lb = LongitudinalBasis {
                fixed: long_basis.fixed.clone(),
                subject: levels[k].subject_basis.clone(),
                side: levels[k].side_basis.clone(),
                random_source: RandomBasisSource::Shared,
            };
            let design = build_design(scores, k, &train.covariates, &lb, &levels[k].covspec)?;
            fit_reml(&design, &levels[k].covspec, opts).map_err(ModelError::from)
        })
        .collect::<Result<_, _>>()?;

    let n_singular = fits.iter().filter(|f| f.singular).count();
    Ok(MvLfmmFit {
        fpca,
        long_basis: long_basis.clone(),
        levels,
        fits,
        covariate_names: train.covariates.names.clone(),
        mlfpca_noise,
        n_singular,
    })
}

/// Detrend each score column by OLS on the fixed design, then estimate
/// score-specific two-level bases from the residual trajectories.
fn estimate_per_score_levels(
    scores: &ScoreTable,
    covariates: &CovariateTable,
    long_basis: &LongitudinalBasis,
    pve: f64,
    t_grid_size: usize,
) -> Result<(Vec<ResolvedLevels>, Vec<f64>), ModelError> {
    // Reuse the design assembly for the fixed part only.
    let trivial = CovSpec {
        subject: LevelSpec {
            structure: CovStructure::Diagonal,
            columns: vec![0],
        },
        side: LevelSpec {
            structure: CovStructure::Diagonal,
            columns: vec![0],
        },
    };
    let probe = build_design(scores, 0, covariates, long_basis, &trivial)?;
    let solver = DesignSolver::new(probe.x.clone())?;
    let mut levels = Vec::new();
    let mut noise = Vec::new();
    for k in 0..scores.scores.ncols() {
        let y = DVector::from_fn(scores.keys.len(), |i, _| scores.scores[(i, k)]);
        let beta = solver.solve(&y);
        let resid = &y - &probe.x * beta;
        let trajectories = score_trajectories(&scores.keys, &resid);
        let mlb = estimate_mlfpca_basis(&trajectories, pve, t_grid_size);
        let subject_basis = grid_interp_basis(mlb.t_grid.clone(), mlb.subject_funcs.clone());
        let side_basis = grid_interp_basis(mlb.t_grid.clone(), mlb.side_funcs.clone());
        let covspec = CovSpec {
            subject: LevelSpec {
                structure: CovStructure::Unstructured,
                columns: (0..subject_basis.n_basis()).collect(),
            },
            side: LevelSpec {
                structure: CovStructure::Unstructured,
                columns: (0..side_basis.n_basis()).collect(),
            },
        };
        levels.push(ResolvedLevels {
            subject_basis,
            side_basis,
            covspec,
        });
        noise.push(mlb.noise_var);
    }
    Ok((levels, noise))
}

// ---------------------------------------------------------------------------
// Fixed-effect curves and surfaces
// ---------------------------------------------------------------------------

/// Eigenfunction values on the model grid for score `k` (P x G).
fn psi(fit: &MvLfmmFit, k: usize) -> DMatrix<f64> {
    fit.fpca.eigenfunction(k, fit.grid())
}

/// The functional effect of covariate `a` on the model grid:
/// `beta_a(t) = sum_k beta*_{a,k} psi_k(t)`, with pointwise variances
/// combining the per-score sampling variances independently across k.
pub fn fixed_effect_curve(fit: &MvLfmmFit, a: usize) -> CurveWithVariance {
    let p = fit.n_dims();
    let g = fit.grid().len();
    let d = fit.n_fixed_long();
    let mut estimate = DMatrix::zeros(p, g);
    let mut variance = DMatrix::zeros(p, g);
    for k in 0..fit.k() {
        let pk = psi(fit, k);
        let b = fit.fits[k].beta[d + a];
        let var = fit.fits[k].beta_cov[(d + a, d + a)];
        for r in 0..p {
            for c in 0..g {
                estimate[(r, c)] += b * pk[(r, c)];
                variance[(r, c)] += var * pk[(r, c)] * pk[(r, c)];
            }
        }
    }
    CurveWithVariance { estimate, variance }
}

/// The functional intercept `beta_0(t, T) = sum_k sum_d beta*_{0,k,d}
/// xi_d(T) psi_k(t)` on the product grid, one |t| x |T| surface per
/// dimension. The overall mean function is not included.
pub fn intercept_surface(
    fit: &MvLfmmFit,
    t_grid: &[f64],
    big_t_grid: &[f64],
) -> Result<Vec<DMatrix<f64>>, ModelError> {
    let p = fit.n_dims();
    let d = fit.n_fixed_long();
    let xi = fit.long_basis.fixed.eval(big_t_grid)?;
    let mut out = vec![DMatrix::zeros(t_grid.len(), big_t_grid.len()); p];
    for k in 0..fit.k() {
        let pk = fit.fpca.eigenfunction(k, t_grid);
        // xi(T) . beta*_{0,k,.} for every T on the grid.
        let weights: Vec<f64> = (0..big_t_grid.len())
            .map(|j| (0..d).map(|dd| xi[(j, dd)] * fit.fits[k].beta[dd]).sum())
            .collect();
        for (dim, surface) in out.iter_mut().enumerate() {
            for r in 0..t_grid.len() {
                for (c, &w) in weights.iter().enumerate() {
                    surface[(r, c)] += pk[(dim, r)] * w;
                }
            }
        }
    }
    Ok(out)
}

/// For each longitudinal fixed column d, the curve `sum_k beta*_{0,k,d}
/// psi_k(t)` on the model grid with pointwise variances.
pub fn longitudinal_coefficient_curves(fit: &MvLfmmFit) -> Vec<CurveWithVariance> {
    let p = fit.n_dims();
    let g = fit.grid().len();
    (0..fit.n_fixed_long())
        .map(|d| {
            let mut estimate = DMatrix::zeros(p, g);
            let mut variance = DMatrix::zeros(p, g);
            for k in 0..fit.k() {
                let pk = psi(fit, k);
                let b = fit.fits[k].beta[d];
                let var = fit.fits[k].beta_cov[(d, d)];
                for r in 0..p {
                    for c in 0..g {
                        estimate[(r, c)] += b * pk[(r, c)];
                        variance[(r, c)] += var * pk[(r, c)] * pk[(r, c)];
                    }
                }
            }
            CurveWithVariance { estimate, variance }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

/// Nonparametric bootstrap of the covariate effect curves: each replicate
/// resamples subjects with replacement (keeping all their strides on both
/// sides), re-projects onto the full-data FPCA basis, and refits the score
/// models. Replicates are independent, seeded, and run in parallel.
pub fn bootstrap_fixed_effects(
    train: &MvLongDataset,
    fit: &MvLfmmFit,
    b: usize,
    seed: u64,
    opts: &FitOpts,
) -> Result<BootstrapResult, ModelError> {
    let subject_ids = train.subject_ids();
    let n_cov = fit.covariate_names.len();
    let replicates: Vec<Option<Vec<DMatrix<f64>>>> = (0..b)
        .into_par_iter()
        .map(|rep| {
            let mut rng = seeded_rng(seed, &[b"bootstrap", &(rep as u64).to_le_bytes()]);
            let draw: Vec<&String> = (0..subject_ids.len())
                .map(|_| &subject_ids[rng.gen_range(0..subject_ids.len())])
                .collect();
            let resampled = resample_subjects(train, &draw);
            bootstrap_replicate(&resampled, fit, opts).ok()
        })
        .collect();
    let mut estimates: Vec<Vec<DMatrix<f64>>> = vec![Vec::new(); n_cov];
    let mut n_failed = 0;
    for rep in replicates {
        match rep {
            Some(curves) => {
                for (a, curve) in curves.into_iter().enumerate() {
                    estimates[a].push(curve);
                }
            }
            None => n_failed += 1,
        }
    }
    if n_failed == b {
        return Err(ModelError::AllReplicatesFailed(b));
    }
    Ok(BootstrapResult {
        estimates,
        n_failed,
    })
}

/// New dataset with the drawn subjects; repeated draws get distinct ids so
/// the grouping structure treats them as separate subjects.
fn resample_subjects(train: &MvLongDataset, draw: &[&String]) -> MvLongDataset {
    let mut curves = Vec::new();
    let mut keys = Vec::new();
    let mut cov_rows = std::collections::BTreeMap::new();
    for (occurrence, sid) in draw.iter().enumerate() {
        let new_id = format!("{sid}#{occurrence}");
        for (i, key) in train.keys.iter().enumerate() {
            if &key.subject_id == *sid {
                curves.push(train.curves[i].clone());
                keys.push(ObservationKey {
                    subject_id: new_id.clone(),
                    ..key.clone()
                });
            }
        }
        for ((rs, side), vals) in &train.covariates.rows {
            if rs == *sid {
                cov_rows.insert((new_id.clone(), *side), vals.clone());
            }
        }
    }
    MvLongDataset {
        grid: train.grid.clone(),
        dim_names: train.dim_names.clone(),
        curves,
        keys,
        covariates: CovariateTable {
            names: train.covariates.names.clone(),
            rows: cov_rows,
        },
    }
}

/// Project a resampled dataset onto the full-data basis and refit the score
/// models, returning the covariate effect curves.
fn bootstrap_replicate(
    data: &MvLongDataset,
    fit: &MvLfmmFit,
    opts: &FitOpts,
) -> Result<Vec<DMatrix<f64>>, ModelError> {
    let scores = project_scores(data, &fit.fpca)?;
    let refits: Vec<ScoreLmmFit> = (0..fit.k())
        .map(|k| {
            let lb = LongitudinalBasis {
                fixed: fit.long_basis.fixed.clone(),
                subject: fit.levels[k].subject_basis.clone(),
                side: fit.levels[k].side_basis.clone(),
                random_source: RandomBasisSource::Shared,
            };
            let design = build_design(&scores, k, &data.covariates, &lb, &fit.levels[k].covspec)?;
            fit_reml(&design, &fit.levels[k].covspec, opts).map_err(ModelError::from)
        })
        .collect::<Result<_, _>>()?;
    let p = fit.n_dims();
    let g = fit.grid().len();
    let d = fit.n_fixed_long();
    let curves = (0..fit.covariate_names.len())
        .map(|a| {
            let mut est = DMatrix::zeros(p, g);
            for (k, refit) in refits.iter().enumerate() {
                let pk = psi(fit, k);
                let bcoef = refit.beta[d + a];
                for r in 0..p {
                    for c in 0..g {
                        est[(r, c)] += bcoef * pk[(r, c)];
                    }
                }
            }
            est
        })
        .collect();
    Ok(curves)
}

/// Confidence bands from the bootstrap replicates around a point estimate.
/// Simultaneous bands use the max-statistic construction: the `level`
/// quantile of `sup_{t,p} |dev| / sd` scales the pointwise sd; pointwise
/// bands use per-point quantiles of the standardised deviations.
pub fn simultaneous_band(
    point: &DMatrix<f64>,
    boots: &[DMatrix<f64>],
    level: f64,
) -> ConfidenceBand {
    let (p, g) = point.shape();
    let nb = boots.len();
    let mut sd = DMatrix::zeros(p, g);
    for r in 0..p {
        for c in 0..g {
            let var = boots
                .iter()
                .map(|b| (b[(r, c)] - point[(r, c)]).powi(2))
                .sum::<f64>()
                / nb as f64;
            sd[(r, c)] = var.sqrt();
        }
    }
    let quantile = |mut vals: Vec<f64>| -> f64 {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let idx = ((level * nb as f64).ceil() as usize).clamp(1, nb) - 1;
        vals[idx]
    };
    let m: Vec<f64> = boots
        .iter()
        .map(|b| {
            let mut sup = 0.0f64;
            for r in 0..p {
                for c in 0..g {
                    if sd[(r, c)] > 0.0 {
                        sup = sup.max((b[(r, c)] - point[(r, c)]).abs() / sd[(r, c)]);
                    }
                }
            }
            sup
        })
        .collect();
    let q_sim = quantile(m);
    let mut band = ConfidenceBand {
        lower_pw: point.clone(),
        upper_pw: point.clone(),
        lower_sim: point.clone(),
        upper_sim: point.clone(),
    };
    for r in 0..p {
        for c in 0..g {
            let s = sd[(r, c)];
            if s == 0.0 {
                continue;
            }
            let q_pw = quantile(
                boots
                    .iter()
                    .map(|b| (b[(r, c)] - point[(r, c)]).abs() / s)
                    .collect(),
            );
            band.lower_pw[(r, c)] -= q_pw * s;
            band.upper_pw[(r, c)] += q_pw * s;
            band.lower_sim[(r, c)] -= q_sim * s;
            band.upper_sim[(r, c)] += q_sim * s;
        }
    }
    band
}

// ---------------------------------------------------------------------------
// Covariance surfaces
// ---------------------------------------------------------------------------

/// Random-effect design row for score `k` at longitudinal time `T`.
fn xi_level(
    fit: &MvLfmmFit,
    k: usize,
    subject_level: bool,
    big_t: f64,
) -> Result<DVector<f64>, ModelError> {
    let levels = &fit.levels[k];
    let (basis, cols) = if subject_level {
        (&levels.subject_basis, &levels.covspec.subject.columns)
    } else {
        (&levels.side_basis, &levels.covspec.side.columns)
    };
    let row = basis.eval(&[big_t])?;
    Ok(DVector::from_fn(cols.len(), |i, _| row[(0, cols[i])]))
}

/// One P x P slice of the model covariance function at the given arguments.
/// For the subject level this is `Q(t,t',T,T') = sum_k psi_k(t) psi_k(t')^T
/// xi(T)^T Q*_k xi(T')`; analogously for the subject-side level with R*, and
/// `S(t,t') = sum_k s_k psi_k(t) psi_k(t')^T` for the error level (the
/// longitudinal arguments are ignored there).
pub fn covariance_surface(
    fit: &MvLfmmFit,
    level: CovLevel,
    t1: f64,
    t2: f64,
    big_t1: f64,
    big_t2: f64,
) -> Result<DMatrix<f64>, ModelError> {
    let p = fit.n_dims();
    let mut out = DMatrix::zeros(p, p);
    for k in 0..fit.k() {
        let psi1 = fit.fpca.eigenfunction(k, &[t1]);
        let psi2 = fit.fpca.eigenfunction(k, &[t2]);
        let weight = match level {
            CovLevel::Subject => {
                let x1 = xi_level(fit, k, true, big_t1)?;
                let x2 = xi_level(fit, k, true, big_t2)?;
                (x1.transpose() * &fit.fits[k].q_star * x2)[(0, 0)]
            }
            CovLevel::SubjectSide => {
                let x1 = xi_level(fit, k, false, big_t1)?;
                let x2 = xi_level(fit, k, false, big_t2)?;
                (x1.transpose() * &fit.fits[k].r_star * x2)[(0, 0)]
            }
            CovLevel::Error => fit.fits[k].s,
        };
        for r in 0..p {
            for c in 0..p {
                out[(r, c)] += weight * psi1[(r, 0)] * psi2[(c, 0)];
            }
        }
    }
    Ok(out)
}

/// Model-implied covariance between two observations at evaluation times
/// `t1`, `t2`: same subject different side shares only the subject level;
/// same subject-side different stride adds the side level; the identical
/// observation adds the error level; different subjects are uncorrelated.
pub fn implied_covariance(
    fit: &MvLfmmFit,
    key1: &ObservationKey,
    key2: &ObservationKey,
    t1: f64,
    t2: f64,
) -> Result<DMatrix<f64>, ModelError> {
    let p = fit.n_dims();
    if key1.subject_id != key2.subject_id {
        return Ok(DMatrix::zeros(p, p));
    }
    let mut out = covariance_surface(
        fit,
        CovLevel::Subject,
        t1,
        t2,
        key1.long_time,
        key2.long_time,
    )?;
    if key1.side == key2.side {
        out += covariance_surface(
            fit,
            CovLevel::SubjectSide,
            t1,
            t2,
            key1.long_time,
            key2.long_time,
        )?;
        if key1.stride_index == key2.stride_index {
            out += covariance_surface(fit, CovLevel::Error, t1, t2, 0.0, 0.0)?;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Prediction and trajectories
// ---------------------------------------------------------------------------

fn blup_u<'a>(fit: &'a MvLfmmFit, k: usize, subject_id: &str) -> Option<&'a DVector<f64>> {
    let blups = &fit.fits[k].blups_u;
    blups
        .binary_search_by(|(sid, _)| sid.as_str().cmp(subject_id))
        .ok()
        .map(|i| &blups[i].1)
}

fn blup_v<'a>(
    fit: &'a MvLfmmFit,
    k: usize,
    subject_id: &str,
    side: Side,
) -> Option<&'a DVector<f64>> {
    let blups = &fit.fits[k].blups_v;
    blups
        .binary_search_by(|(sid, s, _)| (sid.as_str(), *s).cmp(&(subject_id, side)))
        .ok()
        .map(|i| &blups[i].2)
}

/// Predicted score for observation `key` under score model `k`.
fn predict_score(
    fit: &MvLfmmFit,
    k: usize,
    key: &ObservationKey,
    covariate_row: &[f64],
) -> Result<f64, ModelError> {
    let d = fit.n_fixed_long();
    let xf = fit.long_basis.fixed.eval(&[key.long_time])?;
    let beta = &fit.fits[k].beta;
    let mut score = (0..d).map(|dd| xf[(0, dd)] * beta[dd]).sum::<f64>();
    for (a, &x) in covariate_row.iter().enumerate() {
        score += x * beta[d + a];
    }
    if let Some(u) = blup_u(fit, k, &key.subject_id) {
        let xu = xi_level(fit, k, true, key.long_time)?;
        score += xu.dot(u);
    }
    if let Some(v) = blup_v(fit, k, &key.subject_id, key.side) {
        let xv = xi_level(fit, k, false, key.long_time)?;
        score += xv.dot(v);
    }
    Ok(score)
}

/// Predict the full multivariate curve for an observation: the mean function
/// plus the predicted score combination of the eigenfunctions. Unseen
/// subjects or sides get zero BLUP contributions (population prediction).
pub fn predict_curve(
    fit: &MvLfmmFit,
    key: &ObservationKey,
    covariate_row: &[f64],
) -> Result<MvCurve, ModelError> {
    if covariate_row.len() != fit.covariate_names.len() {
        return Err(ModelError::CovariateMismatch {
            expected: fit.covariate_names.len(),
            got: covariate_row.len(),
        });
    }
    let mut values = fit.fpca.mean.values.clone();
    for k in 0..fit.k() {
        let score = predict_score(fit, k, key, covariate_row)?;
        let pk = psi(fit, k);
        values += pk * score;
    }
    Ok(MvCurve {
        values,
        grid: fit.grid().to_vec(),
    })
}

/// Fitted random-effect profile `u_i(t, T)` (plus `v_ij(t, T)` when a side
/// is given) evaluated at every `T` in `big_t_grid`; one P x G matrix per
/// grid value.
pub fn subject_trajectory(
    fit: &MvLfmmFit,
    subject_id: &str,
    side: Option<Side>,
    big_t_grid: &[f64],
) -> Result<Vec<DMatrix<f64>>, ModelError> {
    if blup_u(fit, 0, subject_id).is_none() {
        return Err(ModelError::UnknownSubject(subject_id.to_string()));
    }
    if let Some(s) = side {
        if blup_v(fit, 0, subject_id, s).is_none() {
            return Err(ModelError::UnknownSide(subject_id.to_string(), s));
        }
    }
    let p = fit.n_dims();
    let g = fit.grid().len();
    let mut out = vec![DMatrix::zeros(p, g); big_t_grid.len()];
    for k in 0..fit.k() {
        let pk = psi(fit, k);
        for (j, &big_t) in big_t_grid.iter().enumerate() {
            let mut w = 0.0;
            if let Some(u) = blup_u(fit, k, subject_id) {
                w += xi_level(fit, k, true, big_t)?.dot(u);
            }
            if let Some(s) = side {
                if let Some(v) = blup_v(fit, k, subject_id, s) {
                    w += xi_level(fit, k, false, big_t)?.dot(v);
                }
            }
            for r in 0..p {
                for c in 0..g {
                    out[j][(r, c)] += w * pk[(r, c)];
                }
            }
        }
    }
    Ok(out)
}

const CHANGE_T_GRID: usize = 101;

/// Longitudinal change summaries of the fitted subject-side profile
/// `f(t,T) = u_i(t,T) + v_ij(t,T)`: the mean integrated squared first
/// derivative in `T` (analytic via the basis derivatives) and the root mean
/// squared `T = 1` vs `T = 0` difference, both averaging dimensions with the
/// `1/|t-domain|` weight.
pub fn change_metrics(
    fit: &MvLfmmFit,
    subject_id: &str,
    side: Side,
) -> Result<ChangeMetrics, ModelError> {
    if blup_u(fit, 0, subject_id).is_none() {
        return Err(ModelError::UnknownSubject(subject_id.to_string()));
    }
    let grid = fit.grid();
    let t_span = grid[grid.len() - 1] - grid[0];
    let big_t: Vec<f64> = (0..CHANGE_T_GRID)
        .map(|i| i as f64 / (CHANGE_T_GRID - 1) as f64)
        .collect();
    let p = fit.n_dims();
    let g = grid.len();
    // Per-score profile weights g_k(T) and their analytic T-derivatives.
    let kk = fit.k();
    let mut w: DMatrix<f64> = DMatrix::zeros(kk, big_t.len());
    let mut dw: DMatrix<f64> = DMatrix::zeros(kk, big_t.len());
    for k in 0..kk {
        let levels = &fit.levels[k];
        let xu = levels.subject_basis.eval(&big_t)?;
        let dxu = levels.subject_basis.eval_deriv(&big_t, 1)?;
        let xv = levels.side_basis.eval(&big_t)?;
        let dxv = levels.side_basis.eval_deriv(&big_t, 1)?;
        let u = blup_u(fit, k, subject_id);
        let v = blup_v(fit, k, subject_id, side);
        for (j, _) in big_t.iter().enumerate() {
            if let Some(u) = u {
                for (ci, &c) in levels.covspec.subject.columns.iter().enumerate() {
                    w[(k, j)] += xu[(j, c)] * u[ci];
                    dw[(k, j)] += dxu[(j, c)] * u[ci];
                }
            }
            if let Some(v) = v {
                for (ci, &c) in levels.covspec.side.columns.iter().enumerate() {
                    w[(k, j)] += xv[(j, c)] * v[ci];
                    dw[(k, j)] += dxv[(j, c)] * v[ci];
                }
            }
        }
    }
    let psis: Vec<DMatrix<f64>> = (0..kk).map(|k| psi(fit, k)).collect();
    // isd = (1/|t|) sum_p Int_t Int_T (df_p/dT)^2 dT dt by trapezoid rule.
    let mut isd = 0.0;
    let mut change = 0.0;
    for r in 0..p {
        for c in 0..g {
            let tw = trapezoid_weight(grid, c);
            let mut inner = 0.0;
            for (j, _) in big_t.iter().enumerate() {
                let df: f64 = (0..kk).map(|k| dw[(k, j)] * psis[k][(r, c)]).sum();
                inner += df * df * trapezoid_weight(&big_t, j);
            }
            isd += inner * tw;
            let f1: f64 = (0..kk)
                .map(|k| w[(k, big_t.len() - 1)] * psis[k][(r, c)])
                .sum();
            let f0: f64 = (0..kk).map(|k| w[(k, 0)] * psis[k][(r, c)]).sum();
            change += (f1 - f0) * (f1 - f0) * tw;
        }
    }
    Ok(ChangeMetrics {
        isd: isd / t_span,
        overall_change: (change / t_span).sqrt(),
    })
}

fn trapezoid_weight(grid: &[f64], i: usize) -> f64 {
    let left = if i == 0 { grid[0] } else { grid[i - 1] };
    let right = if i + 1 == grid.len() {
        grid[grid.len() - 1]
    } else {
        grid[i + 1]
    };
    (right - left) / 2.0
}
